"""Discriminative (score-function) training of the generator.

The update direction is relevance_gradient - lambda * mean(reward * grad
log p(sampled)), descended with SGD: negative log-likelihood of ground
truth goes down while the frozen classifier's reward on sampled sentences
goes up. An exact enumeration oracle over all terminating sequences makes
the expected reward and its gradient computable on tiny instances, which
pins down the Monte Carlo estimator's correctness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierModel, reward
from .data import Corpus, teacher_pairs
from .generator import (
    Conditioning,
    GeneratorModel,
    SampledSentence,
    forward_step,
    init_generator,
    init_states,
    nll_gradient,
    relevance_loss,
    run_teacher_forced,
    sample_sequence,
)
from .nnet import GradientTape
from .seeding import substream

MODES = ("definition", "description", "explanation-label", "explanation-dis", "explanation")


@dataclass(frozen=True)
class ModeFlags:
    use_image: bool
    use_class: bool
    discriminative: bool


MODE_FLAGS = {
    "definition": ModeFlags(use_image=False, use_class=True, discriminative=False),
    "description": ModeFlags(use_image=True, use_class=False, discriminative=False),
    "explanation-label": ModeFlags(use_image=True, use_class=True, discriminative=False),
    "explanation-dis": ModeFlags(use_image=True, use_class=False, discriminative=True),
    "explanation": ModeFlags(use_image=True, use_class=True, discriminative=True),
}


def mode_flags(mode: str) -> ModeFlags:
    if mode not in MODE_FLAGS:
        raise ValueError(f"unknown mode '{mode}'; expected one of {MODES}")
    return MODE_FLAGS[mode]


@dataclass
class TrainConfig:
    mode: str = "explanation"
    lam: float = 1.0  # weight of the discriminative term
    samples_per_instance: int = 1
    learning_rate: float = 0.1
    epochs: int = 15
    batch_size: int = 16
    gradient_clip: float = 5.0
    seed: int = 0
    use_baseline: bool = False  # moving-average reward baseline, off by default
    embed_dim: int = 32
    hidden_size: int = 64
    max_len: int = 20

    def validate(self) -> None:
        mode_flags(self.mode)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.samples_per_instance < 1:
            raise ValueError("samples_per_instance must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.gradient_clip <= 0:
            raise ValueError("gradient_clip must be > 0")

    def effective_lambda(self) -> float:
        """The discriminative weight actually applied: modes without the
        discriminative loss train with weight zero regardless of ``lam``."""
        return self.lam if mode_flags(self.mode).discriminative else 0.0


@dataclass
class UpdateRecord:
    epoch: int
    relevance_loss: float
    mean_reward: float | None
    grad_norm_relevance: float
    grad_norm_discriminative: float
    num_instances: int


@dataclass
class RewardBaseline:
    """Optional moving average subtracted from rewards (variance reduction)."""

    momentum: float = 0.9
    value: float = 0.0
    initialized: bool = False

    def update(self, r: float) -> None:
        if not self.initialized:
            self.value = r
            self.initialized = True
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * r


def _score_function_gradient(model: GeneratorModel, sampled: SampledSentence, weight: float) -> GradientTape:
    if sampled.model_version != model.version:
        raise ValueError("stale sample: model weights changed since sampling")
    targets = sampled.tokens[: len(sampled.caches)]
    # grad log p = -grad NLL; a forced final EOS has no cache and contributes nothing.
    return nll_gradient(model, sampled.caches, targets).scaled(-weight)


def discriminative_gradient(
    model: GeneratorModel, sampled: SampledSentence, reward_value: float
) -> GradientTape:
    """reward * grad log p(sampled sentence), per the score-function identity."""
    if not 0.0 <= reward_value <= 1.0:
        raise ValueError(f"reward {reward_value} outside [0, 1]")
    return _score_function_gradient(model, sampled, reward_value)


def combined_update(
    model: GeneratorModel,
    batch,
    classifier: ClassifierModel | None,
    config: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
    baseline: RewardBaseline | None = None,
) -> UpdateRecord:
    """One SGD step on a minibatch of TrainPairs.

    Computes the teacher-forced relevance gradient; when the discriminative
    weight is positive, additionally samples sentences per instance, scores
    them with the frozen classifier, and averages the reward-weighted
    log-likelihood gradients. The applied update is
    relevance - lambda * discriminative, clipped to the global-norm budget.
    """
    if not batch:
        raise ValueError("combined_update: empty batch")
    lam = config.effective_lambda()
    conds = [model.conditioning_for(pair) for pair in batch]

    rel_loss, rel_tape = relevance_loss(model, [(p.tokens, c) for p, c in zip(batch, conds)])
    if not math.isfinite(rel_loss):
        raise ValueError(f"non-finite relevance loss at epoch {epoch}")

    disc_tape = GradientTape.zeros_like(model.params())
    rewards: list[float] = []
    if lam > 0:
        if classifier is None:
            raise ValueError("discriminative training requires a frozen sentence classifier")
        scale = 1.0 / (len(batch) * config.samples_per_instance)
        for pair, cond in zip(batch, conds):
            for _ in range(config.samples_per_instance):
                sampled = sample_sequence(model, cond, rng)
                r = reward(classifier, sampled.tokens, pair.class_label)
                if not math.isfinite(r):
                    raise ValueError(
                        f"non-finite reward at epoch {epoch}, instance {pair.instance_id}"
                    )
                rewards.append(r)
                if baseline is None:
                    contrib = discriminative_gradient(model, sampled, r)
                else:
                    contrib = _score_function_gradient(model, sampled, r - baseline.value)
                    baseline.update(r)
                disc_tape.add(contrib, scale=scale)

    combined = rel_tape.copy()
    combined.add(disc_tape, scale=-lam)
    combined.check_finite(f"at epoch {epoch}")
    combined.clip_global_norm(config.gradient_clip)
    model.apply_gradients(combined, config.learning_rate)

    return UpdateRecord(
        epoch=epoch,
        relevance_loss=rel_loss,
        mean_reward=(sum(rewards) / len(rewards)) if rewards else None,
        grad_norm_relevance=rel_tape.global_norm(),
        grad_norm_discriminative=disc_tape.global_norm(),
        num_instances=len(batch),
    )


@dataclass
class OracleResult:
    expected_reward: float
    gradient: GradientTape
    mass: float
    num_sequences: int


def oracle_expected_reward(
    model: GeneratorModel,
    cond: Conditioning,
    classifier: ClassifierModel,
    true_class: int,
    max_len: int,
) -> OracleResult:
    """Exact expected reward and expected-reward gradient by enumerating
    every terminating sequence of length <= max_len.

    The final step forces EOS with probability one (the sampler's
    convention), so enumerated sequence probabilities form a proper
    distribution: their mass must come out as 1 within 1e-9.
    """
    v = model.vocab.size
    if v**max_len > 1_000_000:
        raise ValueError(f"enumeration guard: {v}^{max_len} sequences exceed 10^6")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    eos = model.vocab.eos
    tape = GradientTape.zeros_like(model.params())
    masses: list[float] = []
    weighted: list[float] = []

    def leaf(tokens, caches, p_seq):
        r = reward(classifier, tokens, true_class)
        masses.append(p_seq)
        weighted.append(p_seq * r)
        if caches and p_seq * r != 0.0:
            targets = tokens[: len(caches)]
            tape.add(nll_gradient(model, caches, targets), scale=-(p_seq * r))

    def expand(prev, s1, s2, tokens, caches, p_seq, body_len):
        if body_len == max_len - 1:
            leaf(tokens + [eos], caches, p_seq)
            return
        probs, n1, n2, cache = forward_step(model, prev, s1, s2, cond)
        for tok in range(v):
            p_next = p_seq * float(probs[tok])
            if tok == eos:
                leaf(tokens + [eos], caches + [cache], p_next)
            else:
                expand(tok, n1, n2, tokens + [tok], caches + [cache], p_next, body_len + 1)

    s1, s2 = init_states(model)
    expand(model.vocab.sos, s1, s2, [], [], 1.0, 0)

    mass = math.fsum(masses)
    if abs(mass - 1.0) > 1e-9:
        raise RuntimeError(f"enumerated probability mass {mass!r} deviates from 1")
    return OracleResult(
        expected_reward=math.fsum(weighted),
        gradient=tape,
        mass=mass,
        num_sequences=len(masses),
    )


@dataclass
class McGradientResult:
    """Monte Carlo estimate of the expected-reward gradient."""

    mean_reward: float
    gradient: GradientTape
    se_norm: float  # standard error of the mean-gradient vector's norm
    n_samples: int


def monte_carlo_gradient(
    model: GeneratorModel,
    cond: Conditioning,
    classifier: ClassifierModel,
    true_class: int,
    n_samples: int,
    rng: np.random.Generator,
    max_len: int | None = None,
) -> McGradientResult:
    """Average of reward * grad log p over sampled sentences, with the
    entry-wise sample variance folded into one standard-error scalar."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    params = model.params()
    total = GradientTape.zeros_like(params)
    sumsq = {name: np.zeros_like(arr) for name, arr in params.items()}
    reward_total = 0.0
    for _ in range(n_samples):
        sampled = sample_sequence(model, cond, rng, max_len)
        r = reward(classifier, sampled.tokens, true_class)
        reward_total += r
        g = discriminative_gradient(model, sampled, r)
        total.add(g)
        for name, arr in g.blocks.items():
            sumsq[name] += arr * arr
    mean = total.scaled(1.0 / n_samples)
    var_sum = 0.0
    for name, arr in mean.blocks.items():
        var = (sumsq[name] / n_samples - arr * arr) * (n_samples / (n_samples - 1))
        var_sum += float(np.sum(np.maximum(var, 0.0)))
    return McGradientResult(
        mean_reward=reward_total / n_samples,
        gradient=mean,
        se_norm=math.sqrt(var_sum / n_samples),
        n_samples=n_samples,
    )


def tape_max_rel_error(estimate: GradientTape, exact: GradientTape, threshold: float = 1e-3) -> float:
    """Max relative deviation over entries whose exact magnitude exceeds
    ``threshold``; 0.0 if no entry does."""
    worst = 0.0
    for name, ref in exact.blocks.items():
        est = estimate[name]
        mask = np.abs(ref) > threshold
        if np.any(mask):
            rel = np.abs(est[mask] - ref[mask]) / np.abs(ref[mask])
            worst = max(worst, float(rel.max()))
    return worst


@dataclass
class EpochSummary:
    epoch: int
    train_loss: float
    train_reward: float | None
    val_loss: float
    val_reward: float | None
    val_objective: float


@dataclass
class TrainResult:
    model: GeneratorModel
    epochs: list[EpochSummary]
    records: list[UpdateRecord] = field(repr=False, default_factory=list)
    best_epoch: int = 0


def mean_nll(model: GeneratorModel, pairs) -> float:
    """Forward-only relevance loss over TrainPairs (no gradients)."""
    if not pairs:
        raise ValueError("mean_nll: no pairs")
    total = 0.0
    for pair in pairs:
        cond = model.conditioning_for(pair)
        _, logps = run_teacher_forced(model, pair.tokens, cond)
        total += -sum(logps)
    return total / len(pairs)


def train(
    corpus: Corpus,
    config: TrainConfig,
    classifier: ClassifierModel | None = None,
    class_embeddings: np.ndarray | None = None,
) -> TrainResult:
    """Full training run for one ablation mode; deterministic under config.seed.

    Keeps the checkpoint of the epoch with the best validation objective
    (validation NLL minus lambda times mean sampled validation reward).
    """
    config.validate()
    flags = mode_flags(config.mode)
    lam = config.effective_lambda()
    if lam > 0:
        if classifier is None:
            raise ValueError(
                f"mode '{config.mode}' trains with a discriminative loss and requires "
                "a frozen sentence classifier"
            )
        if not classifier.frozen:
            raise ValueError("classifier must be frozen before generator training")
    if flags.use_class:
        if class_embeddings is None:
            raise ValueError(
                f"mode '{config.mode}' conditions on the class and requires class "
                "embeddings computed from an image-only language model"
            )
        class_embeddings = np.asarray(class_embeddings, dtype=np.float64)
        if class_embeddings.shape != (corpus.num_classes, config.hidden_size):
            raise ValueError(
                f"class embeddings have shape {class_embeddings.shape}, expected "
                f"({corpus.num_classes}, {config.hidden_size})"
            )

    model = init_generator(
        corpus.vocabulary,
        substream(config.seed, "init"),
        embed_dim=config.embed_dim,
        hidden_size=config.hidden_size,
        feature_dim=corpus.feature_dim,
        use_image=flags.use_image,
        use_class=flags.use_class,
        max_len=config.max_len,
    )
    if flags.use_class:
        model.class_embeddings = class_embeddings

    pairs = teacher_pairs(corpus, "train", config.max_len)
    if not pairs:
        raise ValueError("no training pairs")
    val_pairs = teacher_pairs(corpus, "val", config.max_len) or pairs

    shuffle_rng = substream(config.seed, "shuffle")
    sample_rng = substream(config.seed, "sample")
    baseline = RewardBaseline() if config.use_baseline else None

    records: list[UpdateRecord] = []
    summaries: list[EpochSummary] = []
    best_objective = math.inf
    best_epoch = 0
    best_state = None

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(pairs))
        epoch_records = []
        for start in range(0, len(pairs), config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            rec = combined_update(
                model, batch, classifier, config, sample_rng, epoch=epoch, baseline=baseline
            )
            epoch_records.append(rec)
        records.extend(epoch_records)

        n_total = sum(r.num_instances for r in epoch_records)
        train_loss = sum(r.relevance_loss * r.num_instances for r in epoch_records) / n_total
        if lam > 0:
            train_reward = (
                sum(r.mean_reward * r.num_instances for r in epoch_records) / n_total
            )
        else:
            train_reward = None

        val_loss = mean_nll(model, val_pairs)
        val_reward = None
        if lam > 0:
            vr_rng = substream(config.seed, f"val-sample-{epoch}")
            vals = []
            for pair in val_pairs:
                cond = model.conditioning_for(pair)
                sampled = sample_sequence(model, cond, vr_rng)
                vals.append(reward(classifier, sampled.tokens, pair.class_label))
            val_reward = sum(vals) / len(vals)
        val_objective = val_loss - lam * (val_reward or 0.0)

        summaries.append(
            EpochSummary(
                epoch=epoch,
                train_loss=train_loss,
                train_reward=train_reward,
                val_loss=val_loss,
                val_reward=val_reward,
                val_objective=val_objective,
            )
        )
        if val_objective < best_objective:
            best_objective = val_objective
            best_epoch = epoch
            best_state = model.snapshot()

    assert best_state is not None
    model.restore(best_state)
    return TrainResult(model=model, epochs=summaries, records=records, best_epoch=best_epoch)
