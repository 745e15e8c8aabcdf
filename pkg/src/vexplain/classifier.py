"""Single-layer LSTM sentence classifier.

Trained once on ground-truth sentences, then frozen. During generator
training it only supplies rewards: the probability it assigns to the true
class given a sampled sentence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .data import Corpus, Vocabulary, teacher_pairs
from .nnet import (
    GATE_F,
    GATE_G,
    GATE_I,
    GATE_O,
    GradientTape,
    LstmCellWeights,
    LstmState,
    LstmStepCache,
    init_lstm_weights,
    lstm_step,
    lstm_step_backward,
    softmax,
)
from .seeding import substream

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    # lr 1.0: plain SGD needs it to clear the small-init plateau within the
    # epoch budget on toy corpora (validated on seed sweeps)
    embed_dim: int = 16
    hidden_size: int = 32
    learning_rate: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    gradient_clip: float = 5.0
    max_len: int = 20
    seed: int = 0


@dataclass
class ClassifierModel:
    vocab: Vocabulary
    num_classes: int
    embed_dim: int
    hidden_size: int
    embed: np.ndarray  # (V, E)
    lstm: LstmCellWeights  # E -> H
    w_out: np.ndarray  # (K, H)
    b_out: np.ndarray  # (K,)
    frozen: bool = False

    def params(self) -> dict[str, np.ndarray]:
        return {
            "embed": self.embed,
            "lstm.wx": self.lstm.wx,
            "lstm.wh": self.lstm.wh,
            "lstm.b": self.lstm.b,
            "out.w": self.w_out,
            "out.b": self.b_out,
        }

    def apply_gradients(self, tape: GradientTape, learning_rate: float) -> None:
        if self.frozen:
            raise ValueError("classifier is frozen; refusing weight update")
        for name, arr in self.params().items():
            arr -= learning_rate * tape[name]


def init_classifier(
    vocab: Vocabulary,
    num_classes: int,
    rng: np.random.Generator,
    embed_dim: int = 16,
    hidden_size: int = 32,
    init_scale: float = 0.1,
) -> ClassifierModel:
    return ClassifierModel(
        vocab=vocab,
        num_classes=num_classes,
        embed_dim=embed_dim,
        hidden_size=hidden_size,
        embed=rng.uniform(-init_scale, init_scale, size=(vocab.size, embed_dim)),
        lstm=init_lstm_weights(rng, embed_dim, hidden_size, scale=init_scale),
        w_out=rng.uniform(-init_scale, init_scale, size=(num_classes, hidden_size)),
        b_out=rng.uniform(-init_scale, init_scale, size=num_classes),
    )


def _run(model: ClassifierModel, tokens: list[int]) -> tuple[list[LstmStepCache], np.ndarray]:
    if not tokens:
        raise ValueError("classify: empty token sequence")
    state = LstmState.zeros(model.hidden_size)
    caches = []
    for tok in tokens:
        if not 0 <= tok < model.vocab.size:
            raise ValueError(f"token id {tok} out of range")
        state, cache = lstm_step(model.lstm, model.embed[tok], state)
        caches.append(cache)
    final_hidden = caches[-1].gates[GATE_O] * caches[-1].tanh_cell
    probs = softmax(model.w_out @ final_hidden + model.b_out)
    return caches, probs


def classify(model: ClassifierModel, tokens: list[int]) -> np.ndarray:
    """Class distribution for a token sequence (read including its EOS)."""
    _, probs = _run(model, tokens)
    return probs


def reward(model: ClassifierModel, tokens: list[int], true_class: int) -> float:
    """Probability of the true class given only the sentence; in [0, 1]."""
    if not model.frozen:
        raise ValueError("reward requires a frozen classifier")
    if not 0 <= true_class < model.num_classes:
        raise ValueError(f"class index {true_class} out of range [0, {model.num_classes})")
    return float(classify(model, tokens)[true_class])


def _example_gradient(model: ClassifierModel, tokens: list[int], label: int) -> tuple[float, GradientTape]:
    """Cross-entropy loss -log p(label) and its gradient for one sentence."""
    caches, probs = _run(model, tokens)
    loss = -math.log(probs[label])
    tape = GradientTape.zeros_like(model.params())

    dlogits = probs.copy()
    dlogits[label] -= 1.0
    final_hidden = caches[-1].gates[GATE_O] * caches[-1].tanh_cell
    tape.blocks["out.w"] += np.outer(dlogits, final_hidden)
    tape.blocks["out.b"] += dlogits

    dh = model.w_out.T @ dlogits
    dc = np.zeros(model.hidden_size)
    for t in range(len(caches) - 1, -1, -1):
        de, dh, dc, g = lstm_step_backward(model.lstm, caches[t], dh, dc)
        tape.blocks["lstm.wx"] += g["wx"]
        tape.blocks["lstm.wh"] += g["wh"]
        tape.blocks["lstm.b"] += g["b"]
        tape.blocks["embed"][tokens[t]] += de
    return loss, tape


def accuracy(model: ClassifierModel, pairs) -> float:
    correct = sum(1 for p in pairs if int(np.argmax(classify(model, p.tokens))) == p.class_label)
    return correct / len(pairs) if pairs else float("nan")


def train_classifier(
    corpus: Corpus, config: ClassifierConfig, rng: np.random.Generator | None = None
) -> tuple[ClassifierModel, float]:
    """SGD training on train-split sentences; returns (frozen model, held-out accuracy)."""
    train_pairs = teacher_pairs(corpus, "train", config.max_len)
    val_pairs = teacher_pairs(corpus, "val", config.max_len)
    per_class = {c: 0 for c in range(corpus.num_classes)}
    for p in train_pairs:
        per_class[p.class_label] += 1
    empty = [c for c, n in per_class.items() if n == 0]
    if empty:
        raise ValueError(f"classes with no training sentences: {empty}")

    if rng is None:
        rng = substream(config.seed, "classifier")
    model = init_classifier(
        corpus.vocabulary,
        corpus.num_classes,
        rng,
        embed_dim=config.embed_dim,
        hidden_size=config.hidden_size,
    )

    n = len(train_pairs)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [train_pairs[i] for i in order[start : start + config.batch_size]]
            tape = GradientTape.zeros_like(model.params())
            total = 0.0
            for pair in batch:
                loss, g = _example_gradient(model, pair.tokens, pair.class_label)
                total += loss
                tape.add(g, scale=1.0 / len(batch))
            if not math.isfinite(total):
                raise ValueError(f"non-finite classifier loss at epoch {epoch + 1}")
            tape.clip_global_norm(config.gradient_clip)
            model.apply_gradients(tape, config.learning_rate)
        log.debug("classifier epoch %d done", epoch + 1)

    holdout = accuracy(model, val_pairs if val_pairs else train_pairs)
    model.frozen = True
    return model, holdout


def uniform_classifier(vocab: Vocabulary, num_classes: int, hidden_size: int = 4) -> ClassifierModel:
    """A frozen classifier that outputs 1/K regardless of input (constant reward)."""
    model = init_classifier(vocab, num_classes, np.random.default_rng(0), 4, hidden_size)
    model.w_out[:] = 0.0
    model.b_out[:] = 0.0
    model.frozen = True
    return model


def token_count_classifier(vocab: Vocabulary, token_id: int) -> ClassifierModel:
    """A frozen 2-class model whose class-0 probability is ~1 exactly when
    ``token_id`` occurs at least twice in the sequence, ~0 otherwise.

    Hand-built with saturated gates: the cell's first unit counts
    occurrences, the output head thresholds the count. Rewards concentrated
    on a known sequence set make Monte Carlo estimates of the expected
    reward gradient resolvable at feasible sample counts, so this is the
    reward model used by the estimator-vs-enumeration self-check.
    """
    e, h = 4, 4
    embed = np.zeros((vocab.size, e))
    embed[token_id, 0] = 1.0
    wx = np.zeros((4, h, e))
    wh = np.zeros((4, h, h))
    b = np.zeros((4, h))
    b[GATE_I] = -50.0
    wx[GATE_I, 0, 0] = 100.0  # input gate opens only for the counted token
    b[GATE_F] = 50.0  # forget gate pinned open: the count persists
    b[GATE_O] = 50.0
    b[GATE_G, 0] = -50.0
    wx[GATE_G, 0, 0] = 100.0  # candidate contributes +1 per occurrence
    w_out = np.zeros((2, h))
    w_out[0, 0] = 40.0  # fires once tanh(count) passes the two-occurrence level
    b_out = np.array([-35.0, 0.0])
    return ClassifierModel(
        vocab=vocab,
        num_classes=2,
        embed_dim=e,
        hidden_size=h,
        embed=embed,
        lstm=LstmCellWeights(e, h, wx, wh, b),
        w_out=w_out,
        b_out=b_out,
        frozen=True,
    )


def save_classifier(model: ClassifierModel, path) -> None:
    meta = {
        "num_classes": model.num_classes,
        "embed_dim": model.embed_dim,
        "hidden_size": model.hidden_size,
        "frozen": model.frozen,
        "vocab": model.vocab.tokens,
    }
    checkpoint.save_blocks(path, "classifier", dict(model.params()), meta)


def load_classifier(path) -> ClassifierModel:
    kind, blocks, meta = checkpoint.load_blocks(path)
    if kind != "classifier":
        raise ValueError(f"{path}: checkpoint kind '{kind}' is not a classifier")
    vocab = Vocabulary(meta["vocab"])
    e, h = int(meta["embed_dim"]), int(meta["hidden_size"])
    lstm = LstmCellWeights(e, h, blocks["lstm.wx"], blocks["lstm.wh"], blocks["lstm.b"])
    lstm.validate()
    return ClassifierModel(
        vocab=vocab,
        num_classes=int(meta["num_classes"]),
        embed_dim=e,
        hidden_size=h,
        embed=blocks["embed"],
        lstm=lstm,
        w_out=blocks["out.w"],
        b_out=blocks["out.b"],
        frozen=bool(meta["frozen"]),
    )
