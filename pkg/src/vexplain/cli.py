"""Command-line entry point: data generation, classifier and generator
training, decoding, evaluation, gradient/oracle self-checks, and the
five-variant comparison report.

Every subcommand echoes its fully resolved configuration (including the
seed) so any run can be reproduced bit-for-bit, and refuses to overwrite
existing outputs unless --overwrite is passed. A JSON config file may set
any flag (keys use the flag's dest name, e.g. "learning_rate"); explicit
command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from .classifier import (
    ClassifierConfig,
    load_classifier,
    save_classifier,
    token_count_classifier,
    train_classifier,
)
from .data import SynthSpec, Vocabulary, generate_synth, load_corpus, save_corpus, teacher_pairs
from .generator import (
    Conditioning,
    compute_class_embeddings,
    greedy_decode,
    init_generator,
    load_generator,
    nll_gradient,
    relevance_loss,
    run_teacher_forced,
    sample_sequence,
    save_generator,
)
from .metrics import evaluate_models
from .nnet import grad_check
from .seeding import substream
from .training import (
    MODES,
    TrainConfig,
    mode_flags,
    monte_carlo_gradient,
    oracle_expected_reward,
    tape_max_rel_error,
    train,
)


class CliError(Exception):
    pass


def _out_path(path, overwrite: bool) -> Path:
    p = Path(path)
    if p.exists() and not overwrite:
        raise CliError(f"refusing to overwrite existing '{p}' (pass --overwrite)")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    print("resolved config: " + json.dumps(resolved, sort_keys=True, default=str))


# ---------------------------------------------------------------- synth-data


def cmd_synth_data(args) -> int:
    out = _out_path(args.out, args.overwrite)
    spec = SynthSpec(
        num_classes=args.classes,
        instances_per_class=args.instances_per_class,
        sentences_per_instance=args.sentences_per_instance,
        vocab_size=args.vocab_size,
        planted_per_class=args.planted_per_class,
        feature_dim=args.feature_dim,
        feature_noise=args.feature_noise,
        seed=args.seed,
    )
    corpus = generate_synth(spec)
    save_corpus(corpus, out)
    print(
        f"wrote {out}: {len(corpus.instances)} instances, {corpus.num_classes} classes, "
        f"vocabulary {corpus.vocabulary.size}"
    )
    return 0


# ----------------------------------------------------------- train-classifier


def cmd_train_classifier(args) -> int:
    out = _out_path(args.out, args.overwrite)
    corpus = load_corpus(args.corpus)
    config = ClassifierConfig(
        embed_dim=args.embed_dim,
        hidden_size=args.hidden,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_len=args.max_len,
        seed=args.seed,
    )
    model, accuracy = train_classifier(corpus, config)
    save_classifier(model, out)
    print(f"wrote {out}: held-out accuracy {accuracy:.4f} (frozen)")
    return 0


# ------------------------------------------------------------------- train


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        mode=args.mode,
        lam=args.lam,
        samples_per_instance=args.samples,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        gradient_clip=args.gradient_clip,
        seed=args.seed,
        use_baseline=args.baseline,
        embed_dim=args.embed_dim,
        hidden_size=args.hidden,
        max_len=args.max_len,
    )


def cmd_train(args) -> int:
    out = _out_path(args.out, args.overwrite)
    log_path = _out_path(args.log or str(out) + ".log.jsonl", args.overwrite)
    corpus = load_corpus(args.corpus)
    config = _train_config_from_args(args)
    config.validate()
    flags = mode_flags(config.mode)

    classifier = None
    if config.effective_lambda() > 0:
        if not args.classifier:
            raise CliError(
                f"mode '{config.mode}' trains with a discriminative loss: "
                "--classifier CHECKPOINT (a frozen sentence classifier) is required"
            )
        classifier = load_classifier(args.classifier)
        if not classifier.frozen:
            raise CliError(f"classifier {args.classifier} is not marked frozen")

    class_embeddings = None
    if flags.use_class:
        if not args.lm:
            raise CliError(
                f"mode '{config.mode}' conditions on the class: --lm CHECKPOINT "
                "(an image-only language model, e.g. a trained 'description' model) "
                "is required to derive class embeddings"
            )
        lm = load_generator(args.lm)
        if lm.use_class:
            raise CliError(f"{args.lm} conditions on the class; need an image-only model")
        if lm.hidden_size != config.hidden_size:
            raise CliError(
                f"language model hidden size {lm.hidden_size} != --hidden {config.hidden_size}"
            )
        class_embeddings = compute_class_embeddings(lm, corpus, max_len=config.max_len)

    result = train(corpus, config, classifier=classifier, class_embeddings=class_embeddings)
    save_generator(result.model, out)

    lines = []
    for rec in result.records:
        lines.append(json.dumps({"type": "update", **dataclasses.asdict(rec)}, sort_keys=True))
    for summary in result.epochs:
        lines.append(json.dumps({"type": "epoch", **dataclasses.asdict(summary)}, sort_keys=True))
    log_path.write_text("\n".join(lines) + "\n")

    best = result.epochs[result.best_epoch - 1]
    print(
        f"wrote {out}: best epoch {result.best_epoch}/{config.epochs} "
        f"(val loss {best.val_loss:.4f}"
        + (f", val reward {best.val_reward:.4f})" if best.val_reward is not None else ")")
    )
    return 0


# ----------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    out = _out_path(args.out, args.overwrite)
    model = load_generator(args.model)
    corpus = load_corpus(args.corpus)
    rng = substream(args.seed, "generate") if args.sample else None
    lines = []
    for inst in corpus.split_instances(args.split):
        cond = model.conditioning_for(inst)
        if args.sample:
            tokens = sample_sequence(model, cond, rng).tokens
        else:
            tokens = greedy_decode(model, cond)
        sentence = " ".join(model.vocab.decode(tokens))
        lines.append(
            json.dumps(
                {"id": inst.instance_id, "class": inst.class_label, "sentence": sentence},
                sort_keys=True,
            )
        )
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out}: {len(lines)} sentences ({'sampled' if args.sample else 'greedy'})")
    return 0


# ----------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(args.corpus)
    classifier = load_classifier(args.classifier)
    models = {}
    for spec in args.model:
        if "=" not in spec:
            raise CliError(f"--model expects NAME=CHECKPOINT, got '{spec}'")
        name, path = spec.split("=", 1)
        models[name] = load_generator(path)
    report = evaluate_models(models, corpus, classifier, split=args.split)
    _out_path(out_dir / "report.txt", args.overwrite).write_text(report.table() + "\n")
    _out_path(out_dir / "report.jsonl", args.overwrite).write_text(report.json_lines())
    _out_path(out_dir / "per_image.jsonl", args.overwrite).write_text(report.per_image_lines())
    print(report.table())
    print(f"wrote report files under {out_dir}")
    return 0


# ----------------------------------------------------------------- gradcheck


def _toy_setup(seed: int):
    """Small random model + sequence for self-checks: vocab 6, hidden 6."""
    rng = substream(seed, "gradcheck")
    vocab = Vocabulary(["<sos>", "<eos>", "<unk>", "red", "blue", "wing"])
    model = init_generator(
        vocab, rng, embed_dim=4, hidden_size=6, feature_dim=3, max_len=8,
        use_image=True, use_class=True, init_scale=0.5,
    )
    cond = Conditioning(
        image_feature=rng.normal(size=3),
        class_label=0,
        class_embedding=rng.normal(size=6),
    )
    tokens = [3, 5, 4, 1]  # red wing blue <eos>
    return model, cond, tokens, rng


def cmd_gradcheck(args) -> int:
    model, cond, tokens, rng = _toy_setup(args.seed)

    def relevance_fn(_params):
        return relevance_loss(model, [(tokens, cond)])

    err_rel = grad_check(relevance_fn, model.params(), epsilon=2.5e-3)

    sampled = sample_sequence(model, cond, rng)
    fixed = sampled.tokens[: len(sampled.caches)]  # model-emitted steps only

    def logp_fn(_params):
        caches, logps = run_teacher_forced(model, fixed, cond)
        return -sum(logps), nll_gradient(model, caches, fixed)

    err_logp = grad_check(logp_fn, model.params(), epsilon=2.5e-3)

    print(f"relevance-loss gradient max relative error: {err_rel:.3e}")
    print(f"sampled log-prob gradient max relative error: {err_logp:.3e}")
    ok = err_rel < 1e-5 and err_logp < 1e-5
    print("gradcheck: " + ("PASS (< 1e-5)" if ok else "FAIL (>= 1e-5)"))
    return 0 if ok else 1


# -------------------------------------------------------------- oracle-check


def _tiny_instance(seed: int):
    """vocab-4 / hidden-4 instance small enough for exact enumeration.

    The reward model concentrates reward on sequences with two 'a' tokens,
    so expected-reward gradient entries are resolvable by 50k samples.
    """
    rng = substream(seed, "oracle")
    vocab = Vocabulary(["<sos>", "<eos>", "<unk>", "a"])
    model = init_generator(
        vocab, rng, embed_dim=3, hidden_size=4, feature_dim=2, max_len=3,
        use_image=True, use_class=False, init_scale=0.5,
    )
    a = vocab.index["a"]
    model.b_out[a] += 2.0  # tilt sampling toward the rewarded token
    classifier = token_count_classifier(vocab, a)
    cond = Conditioning(image_feature=rng.normal(size=2), class_label=0)
    return model, classifier, cond


def cmd_oracle_check(args) -> int:
    model, classifier, cond = _tiny_instance(args.seed)
    exact = oracle_expected_reward(model, cond, classifier, true_class=0, max_len=args.max_len)
    mc = monte_carlo_gradient(
        model, cond, classifier, true_class=0, n_samples=args.samples,
        rng=substream(args.seed, "oracle-mc"), max_len=args.max_len,
    )
    rel = tape_max_rel_error(mc.gradient, exact.gradient, threshold=1e-3)
    print(f"enumerated sequences: {exact.num_sequences}, probability mass: {exact.mass!r}")
    print(f"exact expected reward: {exact.expected_reward:.6f}, "
          f"Monte Carlo mean reward ({mc.n_samples} samples): {mc.mean_reward:.6f}")
    print(f"max relative gradient error on entries > 1e-3: {rel:.4f}")
    ok = rel <= 0.02 and abs(exact.mass - 1.0) <= 1e-9
    print("oracle-check: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


# ------------------------------------------------------------------- report


CANONICAL_ORDER = ("definition", "description", "explanation-label", "explanation-dis", "explanation")


def run_variant_matrix(corpus, seed: int, base: TrainConfig, classifier_config: ClassifierConfig):
    """Train all five variants with one seed schedule; returns the trained
    models, the frozen classifier, and the per-variant training results."""
    classifier_config = dataclasses.replace(classifier_config, seed=seed)
    classifier, cls_acc = train_classifier(corpus, classifier_config)

    def config_for(mode):
        return dataclasses.replace(base, mode=mode, seed=seed)

    results = {}
    results["description"] = train(corpus, config_for("description"))
    embeddings = compute_class_embeddings(results["description"].model, corpus)
    results["definition"] = train(corpus, config_for("definition"), class_embeddings=embeddings)
    results["explanation-label"] = train(
        corpus, config_for("explanation-label"), class_embeddings=embeddings
    )
    results["explanation-dis"] = train(
        corpus, config_for("explanation-dis"), classifier=classifier
    )
    results["explanation"] = train(
        corpus, config_for("explanation"), classifier=classifier, class_embeddings=embeddings
    )
    models = {name: results[name].model for name in CANONICAL_ORDER}
    return models, classifier, results, cls_acc


def definition_constancy(model, corpus, split: str = "test") -> bool:
    """True when the definition variant emits one fixed sentence per class."""
    decoded: dict[int, set[str]] = {}
    for inst in corpus.split_instances(split):
        cond = model.conditioning_for(inst)
        sentence = " ".join(model.vocab.decode(greedy_decode(model, cond)))
        decoded.setdefault(inst.class_label, set()).add(sentence)
    return all(len(s) == 1 for s in decoded.values())


def reproduce_table(
    out_dir,
    seeds,
    base: TrainConfig,
    synth: SynthSpec | None = None,
    classifier_config: ClassifierConfig | None = None,
    corpus=None,
    overwrite: bool = False,
    quiet: bool = False,
):
    """Run the five-variant comparison over several seeds on a synthetic
    corpus; writes per-seed reports, the seed-median table, and a verdict on
    the expected orderings (explanation best on the class-relevance metrics,
    discriminative training non-harmful to classifier accuracy)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        synth = synth or SynthSpec()
        corpus = generate_synth(synth)
        save_corpus(corpus, _out_path(out_dir / "corpus.jsonl", overwrite))
    classifier_config = classifier_config or ClassifierConfig(max_len=base.max_len)

    per_seed_rows: dict[str, dict[str, list[float]]] = {
        name: {"cider": [], "class_similarity": [], "class_rank": [], "classifier_accuracy": []}
        for name in CANONICAL_ORDER
    }
    constancy_by_seed = []
    reward_improved_by_seed = []
    for seed in seeds:
        models, classifier, results, cls_acc = run_variant_matrix(
            corpus, seed, base, classifier_config
        )
        report = evaluate_models(models, corpus, classifier, split="test")
        seed_dir = out_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        _out_path(seed_dir / "report.txt", overwrite).write_text(report.table() + "\n")
        _out_path(seed_dir / "report.jsonl", overwrite).write_text(report.json_lines())
        curves = []
        for name, result in results.items():
            for summary in result.epochs:
                curves.append(
                    json.dumps(
                        {"model": name, "best_epoch": result.best_epoch,
                         **dataclasses.asdict(summary)},
                        sort_keys=True,
                    )
                )
        _out_path(seed_dir / "training_curves.jsonl", overwrite).write_text("\n".join(curves) + "\n")

        for row in report.rows:
            per_seed_rows[row.model]["cider"].append(row.mean_cider)
            per_seed_rows[row.model]["class_similarity"].append(row.mean_class_similarity)
            per_seed_rows[row.model]["class_rank"].append(row.mean_class_rank)
            per_seed_rows[row.model]["classifier_accuracy"].append(row.classifier_accuracy)

        constancy_by_seed.append(definition_constancy(models["definition"], corpus))
        expl = results["explanation"]
        first = expl.epochs[0].train_reward
        best = expl.epochs[expl.best_epoch - 1].train_reward
        reward_improved_by_seed.append(best > first)
        if not quiet:
            print(f"[seed {seed}] classifier held-out accuracy {cls_acc:.3f}")
            print(report.table())

    medians = {
        name: {metric: statistics.median(vals) for metric, vals in metrics.items()}
        for name, metrics in per_seed_rows.items()
    }
    orderings = {
        "explanation_rank_le_description": (
            medians["explanation"]["class_rank"] <= medians["description"]["class_rank"]
        ),
        "explanation_similarity_ge_description": (
            medians["explanation"]["class_similarity"]
            >= medians["description"]["class_similarity"]
        ),
        "explanation_accuracy_ge_label_only": (
            medians["explanation"]["classifier_accuracy"]
            >= medians["explanation-label"]["classifier_accuracy"]
        ),
        "explanation_dis_accuracy_ge_description": (
            medians["explanation-dis"]["classifier_accuracy"]
            >= medians["description"]["classifier_accuracy"]
        ),
        "definition_constant_per_class": all(constancy_by_seed),
        "reward_improved_every_seed": all(reward_improved_by_seed),
    }
    verdict = {
        "seeds": list(seeds),
        "medians": medians,
        "orderings": orderings,
        "all_pass": all(orderings.values()),
    }
    _out_path(out_dir / "verdict.json", overwrite).write_text(json.dumps(verdict, indent=2, sort_keys=True))

    lines = [f"{'model':<20} {'CIDEr':>8} {'ClassSim':>9} {'ClassRank':>10} {'ClsAcc':>7}"]
    lines.append("-" * len(lines[0]))
    for name in CANONICAL_ORDER:
        m = medians[name]
        lines.append(
            f"{name:<20} {m['cider']:>8.3f} {m['class_similarity']:>9.3f} "
            f"{m['class_rank']:>10.3f} {m['classifier_accuracy']:>7.3f}"
        )
    lines.append(f"(medians over seeds {list(seeds)})")
    table = "\n".join(lines)
    _out_path(out_dir / "median_table.txt", overwrite).write_text(table + "\n")
    if not quiet:
        print(table)
        for key, ok in orderings.items():
            print(f"  {key}: {'PASS' if ok else 'FAIL'}")
    return verdict


def cmd_report(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    base = _train_config_from_args(args)
    base.validate()
    synth = SynthSpec(
        seed=args.data_seed,
        num_classes=args.classes,
        instances_per_class=args.instances_per_class,
        feature_noise=args.feature_noise,
    )
    classifier_config = ClassifierConfig(
        epochs=args.classifier_epochs, max_len=args.max_len, seed=seeds[0]
    )
    verdict = reproduce_table(
        args.out, seeds, base, synth=synth, classifier_config=classifier_config,
        overwrite=args.overwrite,
    )
    if args.strict and not verdict["all_pass"]:
        return 1
    return 0


# ------------------------------------------------------------------ parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--overwrite", action="store_true", help="allow replacing existing outputs")
    p.add_argument("--config", type=str, default=None,
                   help="JSON file of flag defaults (explicit flags win)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="explanation")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="discriminative loss weight (ignored by modes without it)")
    p.add_argument("--samples", type=int, default=1, help="sampled sentences per instance")
    p.add_argument("--lr", dest="learning_rate", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--gradient-clip", type=float, default=5.0)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--baseline", action="store_true",
                   help="subtract a moving-average reward baseline (default off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vexplain",
        description="Class-discriminative sentence generation: train, decode, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a planted-token synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--instances-per-class", type=int, default=20)
    p.add_argument("--sentences-per-instance", type=int, default=3)
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--planted-per-class", type=int, default=1)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--feature-noise", type=float, default=0.5)
    _add_common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-classifier", help="train and freeze the sentence classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--lr", dest="learning_rate", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-len", type=int, default=20)
    _add_common(p)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train", help="train one generator variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classifier", default=None,
                   help="frozen classifier checkpoint (required when the mode uses the discriminative loss)")
    p.add_argument("--lm", default=None,
                   help="image-only language-model checkpoint used to derive class embeddings "
                        "(required for class-conditioned modes)")
    p.add_argument("--log", default=None, help="training log path (default <out>.log.jsonl)")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode sentences for a corpus split")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--sample", action="store_true", help="sample instead of greedy decoding")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generator checkpoints on a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--model", action="append", required=True, metavar="NAME=CHECKPOINT")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="directory for report files")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check", help="Monte Carlo estimator vs exact enumeration")
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--max-len", type=int, default=3)
    _add_common(p)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("report", help="five-variant comparison over several seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated run seeds")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--instances-per-class", type=int, default=20)
    p.add_argument("--feature-noise", type=float, default=2.0)
    p.add_argument("--classifier-epochs", type=int, default=30)
    p.add_argument("--strict", action="store_true", help="exit nonzero if an ordering fails")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def _known_dests(parser: argparse.ArgumentParser) -> set[str]:
    dests = set()
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                dests |= _known_dests(sub)
        elif action.dest != "help":
            dests.add(action.dest)
    return dests


def run(argv: list[str]) -> int:
    parser = build_parser()
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            config = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            print(f"error: cannot read config {cfg_path}: {e}", file=sys.stderr)
            return 1
        unknown = set(config) - _known_dests(parser)
        if unknown:
            print(f"error: unknown config keys: {sorted(unknown)}", file=sys.stderr)
            return 1
        parser.set_defaults(**config)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _echo_config(args)
    try:
        return args.func(args)
    except (CliError, ValueError, RuntimeError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
