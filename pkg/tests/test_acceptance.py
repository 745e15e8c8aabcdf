"""Acceptance suite: every criterion at its stated tolerance, one
PASS/FAIL line each (run with -s to see them).

Criteria 5-7 share one five-seed pipeline run (module-scoped fixture).
"""

import json
import math
import time

import numpy as np
import pytest

from vexplain.classifier import ClassifierConfig, token_count_classifier, uniform_classifier
from vexplain.cli import reproduce_table, run
from vexplain.data import SynthSpec, Vocabulary, generate_synth
from vexplain.generator import (
    Conditioning,
    init_generator,
    nll_gradient,
    relevance_loss,
    run_teacher_forced,
    sample_sequence,
)
from vexplain.metrics import NgramStats, cider
from vexplain.nnet import grad_check
from vexplain.seeding import substream
from vexplain.training import (
    TrainConfig,
    monte_carlo_gradient,
    oracle_expected_reward,
    tape_max_rel_error,
)

GRAD_EPS = 2.5e-3  # five-point central-difference step, validated on seed sweeps


def _report(name, ok, detail):
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------- criterion 1


def _toy_model(seed):
    rng = substream(seed, "gradcheck")
    vocab = Vocabulary(["<sos>", "<eos>", "<unk>", "red", "blue", "wing"])
    model = init_generator(vocab, rng, embed_dim=4, hidden_size=6, feature_dim=3,
                           max_len=8, init_scale=0.5)
    cond = Conditioning(rng.normal(size=3), 0, rng.normal(size=6))
    return model, cond, rng


def test_criterion_1_gradient_correctness():
    """Relevance-loss and sampled log-prob gradients vs central differences."""
    t0 = time.monotonic()
    worst_rel, worst_logp = 0.0, 0.0
    for seed in (0, 1, 2):
        model, cond, rng = _toy_model(seed)
        tokens = [3, 5, 4, 1]
        err = grad_check(lambda _p: relevance_loss(model, [(tokens, cond)]),
                         model.params(), epsilon=GRAD_EPS)
        worst_rel = max(worst_rel, err)

        sampled = sample_sequence(model, cond, rng)
        fixed = sampled.tokens[: len(sampled.caches)]
        if fixed:
            def logp_fn(_p):
                caches, logps = run_teacher_forced(model, fixed, cond)
                return -sum(logps), nll_gradient(model, caches, fixed)

            worst_logp = max(worst_logp, grad_check(logp_fn, model.params(), epsilon=GRAD_EPS))
    elapsed = time.monotonic() - t0
    ok = worst_rel < 1e-5 and worst_logp < 1e-5 and elapsed < 30
    _report(
        "1 gradient-correctness",
        ok,
        f"relevance {worst_rel:.2e}, log-prob {worst_logp:.2e}, tol 1e-5, {elapsed:.1f}s < 30s",
    )


# ---------------------------------------------------------------- criterion 2


def _oracle_instance(seed=0):
    rng = substream(seed, "oracle")
    vocab = Vocabulary(["<sos>", "<eos>", "<unk>", "a"])
    model = init_generator(vocab, rng, embed_dim=3, hidden_size=4, feature_dim=2,
                           max_len=3, use_image=True, use_class=False, init_scale=0.5)
    model.b_out[vocab.index["a"]] += 2.0
    classifier = token_count_classifier(vocab, vocab.index["a"])
    cond = Conditioning(rng.normal(size=2), 0)
    return model, classifier, cond


def test_criterion_2_estimator_vs_enumeration_oracle():
    """50k-sample Monte Carlo gradient within 2% of exact enumeration."""
    t0 = time.monotonic()
    model, classifier, cond = _oracle_instance()
    exact = oracle_expected_reward(model, cond, classifier, true_class=0, max_len=3)
    mass_ok = abs(exact.mass - 1.0) <= 1e-9

    mc = monte_carlo_gradient(model, cond, classifier, true_class=0,
                              n_samples=50_000, rng=substream(0, "mc"), max_len=3)
    rel = tape_max_rel_error(mc.gradient, exact.gradient, threshold=1e-3)

    # sampling consistency of the expected reward itself
    reward_se = math.sqrt(
        max(exact.expected_reward * (1 - exact.expected_reward), 1e-12) / mc.n_samples
    )
    reward_ok = abs(mc.mean_reward - exact.expected_reward) <= 3 * reward_se
    elapsed = time.monotonic() - t0
    ok = mass_ok and rel <= 0.02 and reward_ok and elapsed < 120
    _report(
        "2 estimator-vs-oracle",
        ok,
        f"mass-1 {exact.mass - 1.0:.1e} tol 1e-9; max rel {rel:.4f} tol 0.02 over "
        f"{exact.num_sequences} sequences; reward dev {abs(mc.mean_reward - exact.expected_reward):.2e}"
        f" <= 3se {3 * reward_se:.2e}; {elapsed:.0f}s < 120s",
    )


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_zero_mean_control():
    """Constant rewards: estimator mean within 3 standard errors of zero."""
    model, _, cond = _oracle_instance(seed=1)
    classifier = uniform_classifier(model.vocab, 4)
    mc = monte_carlo_gradient(model, cond, classifier, true_class=2,
                              n_samples=10_000, rng=substream(1, "mc"), max_len=3)
    norm = mc.gradient.global_norm()
    ok = norm <= 3 * mc.se_norm
    _report(
        "3 zero-mean-control",
        ok,
        f"|mean| {norm:.2e} <= 3se {3 * mc.se_norm:.2e} over {mc.n_samples} samples "
        f"(constant reward {mc.mean_reward:.4f})",
    )


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_cider_fixtures():
    """Identity 10.0, disjoint 0.0, and the 3-document hand-worked value."""
    docs = {
        "A": ["red wing red beak"],
        "B": ["blue tail blue beak", "blue wing"],
        "C": ["green crest"],
    }
    stats = NgramStats.from_documents(list(docs.values()))
    identity = cider("red wing red beak", docs["A"], stats)
    disjoint = cider("green crest", docs["A"], stats)
    fixture = cider("red wing blue beak", docs["A"], stats)
    expected_fixture = 2.6565890969646153  # brute-force TF-IDF/cosine oracle
    ok = (
        abs(identity - 10.0) <= 1e-9
        and disjoint == 0.0
        and abs(fixture - expected_fixture) <= 1e-9
    )
    _report(
        "4 cider-fixtures",
        ok,
        f"identity {identity!r}, disjoint {disjoint!r}, fixture dev "
        f"{abs(fixture - expected_fixture):.1e} tol 1e-9",
    )


# ----------------------------------------------------- criteria 5-7 pipeline

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_report")
    t0 = time.monotonic()
    verdict = reproduce_table(
        out, SEEDS, TrainConfig(), synth=SynthSpec(),
        classifier_config=ClassifierConfig(), quiet=True,
    )
    elapsed = time.monotonic() - t0
    return verdict, elapsed, out


def test_criterion_5_table_orderings(pipeline):
    """Five-seed medians: explanation beats description on class relevance;
    discriminative training does not hurt classifier accuracy."""
    verdict, elapsed, _ = pipeline
    m = verdict["medians"]
    o = verdict["orderings"]
    ok = (
        o["explanation_rank_le_description"]
        and o["explanation_similarity_ge_description"]
        and o["explanation_accuracy_ge_label_only"]
        and o["explanation_dis_accuracy_ge_description"]
        and elapsed < 900
    )
    _report(
        "5 table-orderings",
        ok,
        f"rank expl {m['explanation']['class_rank']:.2f} <= desc "
        f"{m['description']['class_rank']:.2f}; sim expl "
        f"{m['explanation']['class_similarity']:.3f} >= desc "
        f"{m['description']['class_similarity']:.3f}; acc expl "
        f"{m['explanation']['classifier_accuracy']:.2f} >= label "
        f"{m['explanation-label']['classifier_accuracy']:.2f}; acc dis "
        f"{m['explanation-dis']['classifier_accuracy']:.2f} >= desc "
        f"{m['description']['classifier_accuracy']:.2f}; {elapsed:.0f}s < 900s",
    )


def test_criterion_6_definition_constancy(pipeline):
    """Definition decodes are identical across all test images of a class."""
    verdict, _, _ = pipeline
    ok = verdict["orderings"]["definition_constant_per_class"]
    _report("6 definition-constancy", ok, f"constant per class on seeds {list(SEEDS)}")


def test_criterion_7_reward_improvement(pipeline):
    """Best-epoch mean sampled reward exceeds epoch 1's for every seed."""
    verdict, _, out = pipeline
    curves = {}
    for seed in SEEDS:
        lines = (out / f"seed{seed}" / "training_curves.jsonl").read_text().splitlines()
        rows = [json.loads(line) for line in lines if json.loads(line)["model"] == "explanation"]
        first = next(r for r in rows if r["epoch"] == 1)
        best = next(r for r in rows if r["epoch"] == r["best_epoch"])
        curves[seed] = (first["train_reward"], best["train_reward"])
    ok = all(best > first for first, best in curves.values())
    detail = ", ".join(f"s{s}: {a:.3f}->{b:.3f}" for s, (a, b) in curves.items())
    _report("7 reward-improvement", ok, detail)


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_bit_identical_reproducibility(tmp_path):
    """Same config and seed: byte-identical checkpoints and reports."""
    d = tmp_path
    corpus_args = ["synth-data", "--out", str(d / "c.jsonl"), "--classes", "3",
                   "--instances-per-class", "6", "--seed", "0"]
    assert run(corpus_args) == 0
    assert run(["train-classifier", "--corpus", str(d / "c.jsonl"),
                "--out", str(d / "clf.ckpt"), "--epochs", "5", "--seed", "0"]) == 0

    train_args = ["train", "--corpus", str(d / "c.jsonl"), "--mode", "explanation-dis",
                  "--classifier", str(d / "clf.ckpt"), "--lambda", "1.0",
                  "--epochs", "3", "--hidden", "16", "--embed-dim", "8", "--seed", "5"]
    assert run(train_args + ["--out", str(d / "m1.ckpt")]) == 0
    assert run(train_args + ["--out", str(d / "m2.ckpt")]) == 0
    ckpt_ok = (d / "m1.ckpt").read_bytes() == (d / "m2.ckpt").read_bytes()
    log_ok = (d / "m1.ckpt.log.jsonl").read_bytes() == (d / "m2.ckpt.log.jsonl").read_bytes()

    eval_args = ["evaluate", "--corpus", str(d / "c.jsonl"),
                 "--classifier", str(d / "clf.ckpt"),
                 "--model", "m=" + str(d / "m1.ckpt")]
    assert run(eval_args + ["--out", str(d / "e1")]) == 0
    assert run(eval_args + ["--out", str(d / "e2")]) == 0
    report_ok = all(
        (d / "e1" / f).read_bytes() == (d / "e2" / f).read_bytes()
        for f in ("report.jsonl", "per_image.jsonl", "report.txt")
    )
    ok = ckpt_ok and log_ok and report_ok
    _report(
        "8 determinism",
        ok,
        f"checkpoint {'==' if ckpt_ok else '!='}, log {'==' if log_ok else '!='}, "
        f"reports {'==' if report_ok else '!='}",
    )
