"""Conditional sentence generator: a two-LSTM stack where the second LSTM
receives the first LSTM's output concatenated with an image feature and a
class-embedding vector at every timestep.

The same architecture realizes all conditioning ablations: masked inputs
are zeroed, so a "definition" model (class only) and a "description" model
(image only) differ from the full model just by their mask flags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import Corpus, Vocabulary, check_token_sequence, teacher_pairs
from .nnet import (
    GATE_O,
    GradientTape,
    LstmCellWeights,
    LstmState,
    LstmStepCache,
    init_lstm_weights,
    lstm_step,
    lstm_step_backward,
    require_finite,
    sample_categorical,
    softmax,
)


@dataclass
class Conditioning:
    """What a generation is conditioned on: image feature vector and class.

    ``class_embedding`` may be None (treated as zeros), e.g. while training
    the image-only language model used to derive the embeddings.
    """

    image_feature: np.ndarray
    class_label: int
    class_embedding: np.ndarray | None = None


@dataclass
class StepCache:
    """Forward intermediates of one generation step, kept for backprop."""

    token: int  # input token fed at this step
    cache1: LstmStepCache
    cache2: LstmStepCache
    probs: np.ndarray

    @property
    def hidden2(self) -> np.ndarray:
        c = self.cache2
        return c.gates[GATE_O] * c.tanh_cell


@dataclass
class SampledSentence:
    """A sampled token sequence with its log-probability and the per-step
    distributions/intermediates needed for score-function gradients."""

    tokens: list[int]
    log_prob: float
    distributions: list[np.ndarray]
    forced_eos: bool
    model_version: int
    cond: Conditioning
    caches: list[StepCache] = field(repr=False, default_factory=list)


@dataclass
class GeneratorModel:
    vocab: Vocabulary
    embed_dim: int
    hidden_size: int
    feature_dim: int
    use_image: bool
    use_class: bool
    max_len: int
    embed: np.ndarray  # (V, E)
    lstm1: LstmCellWeights  # E -> H
    lstm2: LstmCellWeights  # (H + feature_dim + H) -> H
    w_out: np.ndarray  # (V, H)
    b_out: np.ndarray  # (V,)
    class_embeddings: np.ndarray | None = None  # (K, H), filled in after LM training
    version: int = 0

    def params(self) -> dict[str, np.ndarray]:
        """Trainable blocks, as live views (mutating them mutates the model)."""
        return {
            "embed": self.embed,
            "lstm1.wx": self.lstm1.wx,
            "lstm1.wh": self.lstm1.wh,
            "lstm1.b": self.lstm1.b,
            "lstm2.wx": self.lstm2.wx,
            "lstm2.wh": self.lstm2.wh,
            "lstm2.b": self.lstm2.b,
            "out.w": self.w_out,
            "out.b": self.b_out,
        }

    def apply_gradients(self, tape: GradientTape, learning_rate: float) -> None:
        for name, arr in self.params().items():
            arr -= learning_rate * tape[name]
        self.version += 1

    def snapshot(self) -> dict:
        state = {name: arr.copy() for name, arr in self.params().items()}
        if self.class_embeddings is not None:
            state["class_embeddings"] = self.class_embeddings.copy()
        return state

    def restore(self, state: dict) -> None:
        for name, arr in self.params().items():
            np.copyto(arr, state[name])
        if "class_embeddings" in state:
            self.class_embeddings = state["class_embeddings"].copy()
        self.version += 1

    def conditioning_for(self, instance) -> Conditioning:
        """Build the Conditioning for a dataset instance, looking up the
        class embedding from the model's own table."""
        emb = None
        if self.use_class:
            if self.class_embeddings is None:
                raise ValueError(
                    "model conditions on the class but has no class-embedding table"
                )
            emb = self.class_embeddings[instance.class_label]
        return Conditioning(instance.feature, instance.class_label, emb)


def init_generator(
    vocab: Vocabulary,
    rng: np.random.Generator,
    embed_dim: int = 32,
    hidden_size: int = 64,
    feature_dim: int = 16,
    use_image: bool = True,
    use_class: bool = True,
    max_len: int = 20,
    init_scale: float = 0.1,
) -> GeneratorModel:
    v = vocab.size
    cond_dim = hidden_size + feature_dim + hidden_size
    return GeneratorModel(
        vocab=vocab,
        embed_dim=embed_dim,
        hidden_size=hidden_size,
        feature_dim=feature_dim,
        use_image=use_image,
        use_class=use_class,
        max_len=max_len,
        embed=rng.uniform(-init_scale, init_scale, size=(v, embed_dim)),
        lstm1=init_lstm_weights(rng, embed_dim, hidden_size, scale=init_scale),
        lstm2=init_lstm_weights(rng, cond_dim, hidden_size, scale=init_scale),
        w_out=rng.uniform(-init_scale, init_scale, size=(v, hidden_size)),
        b_out=rng.uniform(-init_scale, init_scale, size=v),
    )


def _conditioning_inputs(model: GeneratorModel, cond: Conditioning) -> tuple[np.ndarray, np.ndarray]:
    h = model.hidden_size
    feature = np.asarray(cond.image_feature, dtype=np.float64)
    if feature.shape != (model.feature_dim,):
        raise ValueError(
            f"image feature has shape {feature.shape}, expected ({model.feature_dim},)"
        )
    f_eff = feature if model.use_image else np.zeros(model.feature_dim)
    if cond.class_embedding is None:
        c_eff = np.zeros(h)
    else:
        emb = np.asarray(cond.class_embedding, dtype=np.float64)
        if emb.shape != (h,):
            raise ValueError(f"class embedding has shape {emb.shape}, expected ({h},)")
        c_eff = emb if model.use_class else np.zeros(h)
    return f_eff, c_eff


def init_states(model: GeneratorModel) -> tuple[LstmState, LstmState]:
    """Per-sequence initial states (zeros)."""
    return LstmState.zeros(model.hidden_size), LstmState.zeros(model.hidden_size)


def forward_step(
    model: GeneratorModel,
    prev_token: int,
    state1: LstmState,
    state2: LstmState,
    cond: Conditioning,
) -> tuple[np.ndarray, LstmState, LstmState, StepCache]:
    """Advance one step: returns the next-token distribution and new states.

    The image feature and class embedding are injected into the second
    LSTM's input at every step.
    """
    if not 0 <= prev_token < model.vocab.size:
        raise ValueError(f"token id {prev_token} out of range")
    f_eff, c_eff = _conditioning_inputs(model, cond)

    e = model.embed[prev_token]
    s1, cache1 = lstm_step(model.lstm1, e, state1)
    z = np.concatenate([s1.hidden, f_eff, c_eff])
    s2, cache2 = lstm_step(model.lstm2, z, state2)
    probs = softmax(model.w_out @ s2.hidden + model.b_out)
    return probs, s1, s2, StepCache(token=prev_token, cache1=cache1, cache2=cache2, probs=probs)


def run_teacher_forced(
    model: GeneratorModel, tokens: list[int], cond: Conditioning
) -> tuple[list[StepCache], list[float]]:
    """Feed ground-truth tokens; returns per-step caches and log p(token_t)."""
    s1, s2 = init_states(model)
    prev = model.vocab.sos
    caches, logps = [], []
    for target in tokens:
        probs, s1, s2, cache = forward_step(model, prev, s1, s2, cond)
        caches.append(cache)
        logps.append(math.log(probs[target]))
        prev = target
    return caches, logps


def nll_gradient(model: GeneratorModel, caches: list[StepCache], targets: list[int]) -> GradientTape:
    """Gradient of sum_t -log p_t(targets[t]) through the whole stack.

    ``caches`` are the forward intermediates of the steps that emitted
    ``targets`` (one per target, in order).
    """
    if len(caches) != len(targets):
        raise ValueError("one cache per target required")
    tape = GradientTape.zeros_like(model.params())
    h = model.hidden_size
    dh1 = np.zeros(h)
    dc1 = np.zeros(h)
    dh2 = np.zeros(h)
    dc2 = np.zeros(h)
    for t in range(len(caches) - 1, -1, -1):
        cache = caches[t]
        dlogits = cache.probs.copy()
        dlogits[targets[t]] -= 1.0

        h2 = cache.hidden2
        tape.blocks["out.w"] += np.outer(dlogits, h2)
        tape.blocks["out.b"] += dlogits
        dh2 += model.w_out.T @ dlogits

        dz, dh2, dc2, g2 = lstm_step_backward(model.lstm2, cache.cache2, dh2, dc2)
        tape.blocks["lstm2.wx"] += g2["wx"]
        tape.blocks["lstm2.wh"] += g2["wh"]
        tape.blocks["lstm2.b"] += g2["b"]

        # Only the first slice of the second LSTM's input comes from the
        # first LSTM; the conditioning slices are constants.
        dh1 += dz[:h]
        de, dh1, dc1, g1 = lstm_step_backward(model.lstm1, cache.cache1, dh1, dc1)
        tape.blocks["lstm1.wx"] += g1["wx"]
        tape.blocks["lstm1.wh"] += g1["wh"]
        tape.blocks["lstm1.b"] += g1["b"]
        tape.blocks["embed"][cache.token] += de
    return tape


def relevance_loss(
    model: GeneratorModel, batch: list[tuple[list[int], Conditioning]]
) -> tuple[float, GradientTape]:
    """Teacher-forced negative mean per-sequence sum of log-probabilities.

    Returns the scalar loss and its gradient for every weight block.
    """
    if not batch:
        raise ValueError("relevance_loss: empty batch")
    n = len(batch)
    tape = GradientTape.zeros_like(model.params())
    total = 0.0
    for tokens, cond in batch:
        check_token_sequence(model.vocab, tokens, model.max_len)
        caches, logps = run_teacher_forced(model, tokens, cond)
        total += -sum(logps)
        tape.add(nll_gradient(model, caches, tokens), scale=1.0 / n)
    return total / n, tape


def sequence_log_prob(model: GeneratorModel, tokens: list[int], cond: Conditioning) -> float:
    """Teacher-forced log p of a full token sequence under ``cond``."""
    _, logps = run_teacher_forced(model, tokens, cond)
    return sum(logps)


def _point_mass(size: int, index: int) -> np.ndarray:
    p = np.zeros(size)
    p[index] = 1.0
    return p


def sample_sequence(
    model: GeneratorModel,
    cond: Conditioning,
    rng: np.random.Generator,
    max_len: int | None = None,
) -> SampledSentence:
    """Sample a sentence token-by-token from the model's step distributions.

    Stops at EOS. If the cap is hit first, EOS is forced as the final token:
    its recorded distribution is a point mass, so it contributes probability
    one (log-probability zero) and no gradient, which keeps the distribution
    over length-capped sequences proper.
    """
    max_len = model.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    eos = model.vocab.eos
    s1, s2 = init_states(model)
    prev = model.vocab.sos
    tokens: list[int] = []
    dists: list[np.ndarray] = []
    caches: list[StepCache] = []
    log_prob = 0.0
    forced = False
    for t in range(max_len):
        if t == max_len - 1:
            tokens.append(eos)
            dists.append(_point_mass(model.vocab.size, eos))
            forced = True
            break
        probs, s1, s2, cache = forward_step(model, prev, s1, s2, cond)
        tok = sample_categorical(rng, probs)
        tokens.append(tok)
        dists.append(probs)
        caches.append(cache)
        log_prob += math.log(probs[tok])
        if tok == eos:
            break
        prev = tok
    return SampledSentence(
        tokens=tokens,
        log_prob=log_prob,
        distributions=dists,
        forced_eos=forced,
        model_version=model.version,
        cond=cond,
        caches=caches,
    )


def greedy_decode(
    model: GeneratorModel,
    cond: Conditioning,
    max_len: int | None = None,
) -> list[int]:
    """Argmax decoding (ties -> lowest index), same termination as sampling."""
    max_len = model.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    eos = model.vocab.eos
    s1, s2 = init_states(model)
    prev = model.vocab.sos
    tokens: list[int] = []
    for t in range(max_len):
        if t == max_len - 1:
            tokens.append(eos)
            break
        probs, s1, s2, _ = forward_step(model, prev, s1, s2, cond)
        tok = int(np.argmax(probs))
        tokens.append(tok)
        if tok == eos:
            break
        prev = tok
    return tokens


def decode_words(model: GeneratorModel, tokens: list[int]) -> str:
    """Token ids -> sentence string (EOS dropped)."""
    return " ".join(model.vocab.decode(tokens))


def compute_class_embeddings(
    model: GeneratorModel, corpus: Corpus, max_len: int | None = None
) -> np.ndarray:
    """Per-class average of the second LSTM's hidden states over all
    timesteps of all teacher-forced train sequences of that class.

    ``model`` must be an image-only language model (class conditioning
    disabled), trained beforehand.
    """
    if model.use_class:
        raise ValueError("class embeddings must come from a model without class conditioning")
    max_len = model.max_len if max_len is None else max_len
    k = corpus.num_classes
    sums = np.zeros((k, model.hidden_size))
    counts = np.zeros(k, dtype=np.int64)
    for pair in teacher_pairs(corpus, "train", max_len):
        cond = Conditioning(pair.feature, pair.class_label)
        caches, _ = run_teacher_forced(model, pair.tokens, cond)
        for cache in caches:
            sums[pair.class_label] += cache.hidden2
        counts[pair.class_label] += len(caches)
    for c in range(k):
        if counts[c] == 0:
            raise ValueError(f"class {c} has no training sequences")
    return sums / counts[:, None]


def save_generator(model: GeneratorModel, path) -> None:
    blocks = dict(model.params())
    if model.class_embeddings is not None:
        blocks["class_embeddings"] = model.class_embeddings
    meta = {
        "embed_dim": model.embed_dim,
        "hidden_size": model.hidden_size,
        "feature_dim": model.feature_dim,
        "use_image": model.use_image,
        "use_class": model.use_class,
        "max_len": model.max_len,
        "vocab": model.vocab.tokens,
    }
    checkpoint.save_blocks(path, "generator", blocks, meta)


def load_generator(path) -> GeneratorModel:
    kind, blocks, meta = checkpoint.load_blocks(path)
    if kind != "generator":
        raise ValueError(f"{path}: checkpoint kind '{kind}' is not a generator")
    vocab = Vocabulary(meta["vocab"])
    h = int(meta["hidden_size"])
    e = int(meta["embed_dim"])
    d = int(meta["feature_dim"])
    lstm1 = LstmCellWeights(e, h, blocks["lstm1.wx"], blocks["lstm1.wh"], blocks["lstm1.b"])
    lstm2 = LstmCellWeights(
        h + d + h, h, blocks["lstm2.wx"], blocks["lstm2.wh"], blocks["lstm2.b"]
    )
    lstm1.validate()
    lstm2.validate()
    model = GeneratorModel(
        vocab=vocab,
        embed_dim=e,
        hidden_size=h,
        feature_dim=d,
        use_image=bool(meta["use_image"]),
        use_class=bool(meta["use_class"]),
        max_len=int(meta["max_len"]),
        embed=blocks["embed"],
        lstm1=lstm1,
        lstm2=lstm2,
        w_out=blocks["out.w"],
        b_out=blocks["out.b"],
        class_embeddings=blocks.get("class_embeddings"),
    )
    require_finite("embed", model.embed)
    require_finite("out.w", model.w_out)
    return model
