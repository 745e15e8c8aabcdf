"""Minimal numeric kernel: activations, an LSTM cell with hand-derived
forward/backward passes, gradient tapes, and finite-difference checking.

Everything is float64. The backward passes are derived by hand so that
downstream gradient estimators can be verified independently of any
autodiff framework.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Gate order inside the stacked weight blocks: input, forget, output, candidate.
GATE_I, GATE_F, GATE_O, GATE_G = 0, 1, 2, 3


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (no overflow for large |x|)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction. Output sums to 1 within 1e-12."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax: empty logits vector")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax: non-finite logits")
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Draw one index from a probability vector by inverse-CDF lookup."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(probs) - 1)


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")


@dataclass
class LstmState:
    """Hidden and cell vectors of one LSTM cell."""

    hidden: np.ndarray
    cell: np.ndarray

    @staticmethod
    def zeros(hidden_size: int) -> "LstmState":
        return LstmState(np.zeros(hidden_size), np.zeros(hidden_size))


@dataclass
class LstmCellWeights:
    """Weights of a single LSTM cell.

    ``wx`` stacks the four input-to-hidden matrices as (4, H, D), ``wh`` the
    four hidden-to-hidden matrices as (4, H, H) and ``b`` the four bias
    vectors as (4, H), indexed by GATE_I/GATE_F/GATE_O/GATE_G.
    """

    input_size: int
    hidden_size: int
    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray

    def validate(self) -> None:
        d, h = self.input_size, self.hidden_size
        if self.wx.shape != (4, h, d):
            raise ValueError(f"wx shape {self.wx.shape} != (4, {h}, {d})")
        if self.wh.shape != (4, h, h):
            raise ValueError(f"wh shape {self.wh.shape} != (4, {h}, {h})")
        if self.b.shape != (4, h):
            raise ValueError(f"b shape {self.b.shape} != (4, {h})")
        for name in ("wx", "wh", "b"):
            require_finite(name, getattr(self, name))


@dataclass
class LstmStepCache:
    """Forward intermediates of one lstm_step, needed by the backward pass."""

    x: np.ndarray
    prev: LstmState
    gates: np.ndarray  # (4, H) post-activation: i, f, o, g
    cell: np.ndarray
    tanh_cell: np.ndarray


def init_lstm_weights(
    rng: np.random.Generator,
    input_size: int,
    hidden_size: int,
    scale: float = 0.1,
    forget_bias: float = 1.0,
) -> LstmCellWeights:
    """Uniform [-scale, scale] init; forget-gate bias starts at ``forget_bias``."""
    w = LstmCellWeights(
        input_size=input_size,
        hidden_size=hidden_size,
        wx=rng.uniform(-scale, scale, size=(4, hidden_size, input_size)),
        wh=rng.uniform(-scale, scale, size=(4, hidden_size, hidden_size)),
        b=rng.uniform(-scale, scale, size=(4, hidden_size)),
    )
    w.b[GATE_F] = forget_bias
    return w


def lstm_step(w: LstmCellWeights, x: np.ndarray, prev: LstmState) -> tuple[LstmState, LstmStepCache]:
    """One LSTM step.

    i = sig(Wix x + Wih h + bi)      f = sig(Wfx x + Wfh h + bf)
    o = sig(Wox x + Woh h + bo)      g = tanh(Wcx x + Wch h + bc)
    c' = f*c + i*g                   h' = o * tanh(c')
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (w.input_size,):
        raise ValueError(f"lstm_step: x has shape {x.shape}, expected ({w.input_size},)")
    if prev.hidden.shape != (w.hidden_size,) or prev.cell.shape != (w.hidden_size,):
        raise ValueError("lstm_step: state dimension mismatch")

    h = w.hidden_size
    # One fused matvec per weight kind; the (4, H, *) blocks are contiguous.
    pre = (
        w.wx.reshape(4 * h, w.input_size) @ x
        + w.wh.reshape(4 * h, h) @ prev.hidden
        + w.b.reshape(4 * h)
    ).reshape(4, h)
    gates = np.empty_like(pre)
    gates[GATE_I] = sigmoid(pre[GATE_I])
    gates[GATE_F] = sigmoid(pre[GATE_F])
    gates[GATE_O] = sigmoid(pre[GATE_O])
    gates[GATE_G] = np.tanh(pre[GATE_G])

    cell = gates[GATE_F] * prev.cell + gates[GATE_I] * gates[GATE_G]
    tanh_cell = np.tanh(cell)
    hidden = gates[GATE_O] * tanh_cell

    cache = LstmStepCache(x=x, prev=prev, gates=gates, cell=cell, tanh_cell=tanh_cell)
    return LstmState(hidden=hidden, cell=cell), cache


def lstm_step_backward(
    w: LstmCellWeights,
    cache: LstmStepCache,
    dh: np.ndarray,
    dc: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Exact reverse-mode gradients of lstm_step.

    ``dh``/``dc`` are the upstream gradients w.r.t. the new hidden and cell
    vectors. Returns (dx, dprev_hidden, dprev_cell, dweights) where dweights
    has the same 'wx'/'wh'/'b' block shapes as the cell weights.
    """
    if cache is None:
        raise ValueError("lstm_step_backward: missing forward intermediates")
    i, f, o, g = cache.gates[GATE_I], cache.gates[GATE_F], cache.gates[GATE_O], cache.gates[GATE_G]
    tc = cache.tanh_cell

    do = dh * tc
    dcell = dc + dh * o * (1.0 - tc * tc)
    df = dcell * cache.prev.cell
    dprev_cell = dcell * f
    di = dcell * g
    dg = dcell * i

    dpre = np.empty_like(cache.gates)
    dpre[GATE_I] = di * i * (1.0 - i)
    dpre[GATE_F] = df * f * (1.0 - f)
    dpre[GATE_O] = do * o * (1.0 - o)
    dpre[GATE_G] = dg * (1.0 - g * g)

    h = w.hidden_size
    flat = dpre.reshape(4 * h)
    dwx = np.einsum("gh,d->ghd", dpre, cache.x)
    dwh = np.einsum("gh,d->ghd", dpre, cache.prev.hidden)
    db = dpre.copy()
    dx = w.wx.reshape(4 * h, w.input_size).T @ flat
    dprev_hidden = w.wh.reshape(4 * h, h).T @ flat

    return dx, dprev_hidden, dprev_cell, {"wx": dwx, "wh": dwh, "b": db}


class GradientTape:
    """Additive gradient accumulator, one ndarray block per weight block."""

    def __init__(self, blocks: dict[str, np.ndarray]):
        self.blocks = blocks

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "GradientTape":
        return cls({name: np.zeros_like(arr) for name, arr in params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def add_block(self, name: str, arr: np.ndarray, scale: float = 1.0) -> None:
        self.blocks[name] += scale * arr

    def add(self, other: "GradientTape", scale: float = 1.0) -> None:
        for name, arr in other.blocks.items():
            self.blocks[name] += scale * arr

    def scaled(self, scale: float) -> "GradientTape":
        return GradientTape({name: scale * arr for name, arr in self.blocks.items()})

    def copy(self) -> "GradientTape":
        return GradientTape({name: arr.copy() for name, arr in self.blocks.items()})

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(arr * arr)) for arr in self.blocks.values()))

    def clip_global_norm(self, max_norm: float) -> float:
        """Rescale in place if the global norm exceeds ``max_norm``; returns the pre-clip norm."""
        norm = self.global_norm()
        if norm > max_norm:
            factor = max_norm / norm
            for arr in self.blocks.values():
                arr *= factor
        return norm

    def check_finite(self, context: str = "") -> None:
        for name, arr in self.blocks.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite gradient in block '{name}' {context}".strip())


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(fn, params: dict[str, np.ndarray], epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn(params) -> (loss, tape)`` must be deterministic in the current
    parameter values (seed and freeze any sampling before calling). Entries
    are perturbed in place and restored. Returns the max relative error
    |a - n| / max(1e-8, |a| + |n|) over every entry of every block.

    The numeric side is the five-point central-difference stencil
    (8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h, grouped as differences
    first so equal evaluations cancel exactly; its O(h^4) truncation lets h
    be large enough that roundoff stays below the near-zero-entry floor of
    the relative-error formula.
    """
    loss, tape = fn(params)
    if not math.isfinite(loss):
        raise ValueError(f"grad_check: non-finite loss {loss}")

    def value_at(w, idx, offset):
        orig = w[idx]
        w[idx] = orig + offset
        out, _ = fn(params)
        w[idx] = orig
        if not math.isfinite(out):
            raise ValueError("grad_check: non-finite loss during perturbation")
        return out

    worst = 0.0
    for name, w in params.items():
        analytic = tape[name]
        for idx in np.ndindex(w.shape):
            inner = value_at(w, idx, epsilon) - value_at(w, idx, -epsilon)
            outer = value_at(w, idx, 2.0 * epsilon) - value_at(w, idx, -2.0 * epsilon)
            numeric = (8.0 * inner - outer) / (12.0 * epsilon)
            worst = max(worst, relative_error(float(analytic[idx]), numeric))
    return worst
