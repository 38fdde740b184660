"""Minimal numerical building blocks: LSTM cell, dropout, MSE, softmax, Adam.

Everything is double precision and framework-free; tensors are plain
C-contiguous float64 numpy arrays.  The single-step cell functions here
are the reference implementation; the whole-sequence kernels used by
training live in ``edgepop.nn.kernels``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


@dataclass(eq=False)
class LstmCellWeights:
    """One LSTM layer's parameters, packed row-wise by gate.

    ``w`` has shape (4*hidden, hidden + input) with gate blocks ordered
    forget, input, candidate, output; the first ``hidden`` columns act on
    the previous output and the rest on the current input.  The per-gate
    views below expose the conventional split.
    """

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = as_tensor(self.w)
        self.b = as_tensor(self.b)
        if self.w.ndim != 2 or self.w.shape[0] % 4 != 0:
            raise ValueError("weight matrix must have 4*hidden rows")
        hidden = self.w.shape[0] // 4
        if self.w.shape[1] <= hidden:
            raise ValueError("weight matrix must include input columns")
        if self.b.shape != (4 * hidden,):
            raise ValueError("bias length must be 4*hidden")

    @property
    def hidden(self) -> int:
        return self.w.shape[0] // 4

    @property
    def input_width(self) -> int:
        return self.w.shape[1] - self.hidden

    # Per-gate views; writes through them reach the packed storage.
    @property
    def W_f(self) -> np.ndarray:
        return self.w[: self.hidden]

    @property
    def W_i(self) -> np.ndarray:
        return self.w[self.hidden : 2 * self.hidden]

    @property
    def W_C(self) -> np.ndarray:
        return self.w[2 * self.hidden : 3 * self.hidden]

    @property
    def W_o(self) -> np.ndarray:
        return self.w[3 * self.hidden :]

    @property
    def b_f(self) -> np.ndarray:
        return self.b[: self.hidden]

    @property
    def b_i(self) -> np.ndarray:
        return self.b[self.hidden : 2 * self.hidden]

    @property
    def b_C(self) -> np.ndarray:
        return self.b[2 * self.hidden : 3 * self.hidden]

    @property
    def b_o(self) -> np.ndarray:
        return self.b[3 * self.hidden :]

    @classmethod
    def from_gates(cls, W_f, W_i, W_C, W_o, b_f, b_i, b_C, b_o) -> "LstmCellWeights":
        w = np.concatenate([as_tensor(m) for m in (W_f, W_i, W_C, W_o)], axis=0)
        b = np.concatenate([as_tensor(v) for v in (b_f, b_i, b_C, b_o)])
        return cls(w, b)

    def clone(self) -> "LstmCellWeights":
        return LstmCellWeights(self.w.copy(), self.b.copy())


@dataclass(eq=False)
class LstmState:
    """Hidden output and memory cell of one layer at one step."""

    y: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.y = as_tensor(self.y)
        self.C = as_tensor(self.C)
        if self.y.shape != self.C.shape:
            raise ValueError("output and memory state must share a shape")


@dataclass(eq=False)
class CellCache:
    """Forward intermediates needed for the exact backward pass."""

    weights: LstmCellWeights
    x: np.ndarray
    y_prev: np.ndarray
    C_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    C: np.ndarray
    tc: np.ndarray


def init_lstm_weights(
    hidden: int, input_width: int, rng: np.random.Generator
) -> LstmCellWeights:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
    forget-gate bias 1 to stabilize early memory retention."""
    fan_in = hidden + input_width
    limit = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-limit, limit, size=(4 * hidden, fan_in))
    b = np.zeros(4 * hidden)
    b[:hidden] = 1.0
    return LstmCellWeights(w, b)


def lstm_cell_forward(
    x: np.ndarray, prev: LstmState, weights: LstmCellWeights
) -> tuple[LstmState, CellCache]:
    """One gated update: gates from W @ [y_prev, x] + b, then
    C = f*C_prev + i*g and y = o*tanh(C)."""
    x = as_tensor(x)
    h = weights.hidden
    if x.shape != (weights.input_width,) or prev.y.shape != (h,):
        raise ValueError("input/state widths do not match the weights")
    z = np.concatenate([prev.y, x])
    a = weights.w @ z + weights.b
    f = sigmoid(a[:h])
    i = sigmoid(a[h : 2 * h])
    g = np.tanh(a[2 * h : 3 * h])
    o = sigmoid(a[3 * h :])
    C = f * prev.C + i * g
    tc = np.tanh(C)
    y = o * tc
    cache = CellCache(weights, x, prev.y.copy(), prev.C.copy(), f, i, g, o, C, tc)
    return LstmState(y, C), cache


def lstm_cell_backward(
    cache: CellCache, dy: np.ndarray, dC: np.ndarray
) -> tuple[LstmCellWeights, np.ndarray, LstmState]:
    """Exact gradients of one cell step.

    dy and dC are the loss gradients w.r.t. the step's output and memory
    state.  Returns the weight gradients (packed like LstmCellWeights),
    the gradient w.r.t. the input, and the gradient w.r.t. the previous
    state.
    """
    w = cache.weights
    h = w.hidden
    dy = as_tensor(dy)
    dC = as_tensor(dC)
    if dy.shape != (h,) or dC.shape != (h,):
        raise ValueError("gradient widths do not match the cache")
    do = dy * cache.tc
    dc = dC + dy * cache.o * (1.0 - cache.tc**2)
    df = dc * cache.C_prev
    di = dc * cache.g
    dg = dc * cache.i
    da = np.concatenate(
        [
            df * cache.f * (1.0 - cache.f),
            di * cache.i * (1.0 - cache.i),
            dg * (1.0 - cache.g**2),
            do * cache.o * (1.0 - cache.o),
        ]
    )
    z = np.concatenate([cache.y_prev, cache.x])
    dw = np.outer(da, z)
    db = da
    dz = w.w.T @ da
    d_prev = LstmState(dz[:h], dc * cache.f)
    return LstmCellWeights(dw, db), dz[h:], d_prev


def dropout_forward(
    x: np.ndarray,
    rate: float,
    training: bool,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: zero entries with probability ``rate`` and scale
    survivors by 1/(1-rate) so the expectation is unchanged.  Identity
    outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference over every element, with its gradient
    2*(pred-target)/count w.r.t. the prediction."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    diff = pred - target
    count = pred.size
    loss = float(np.sum(diff * diff) / count)
    return loss, 2.0 * diff / count


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-shifted)."""
    v = as_tensor(v)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(eq=False)
class AdamState:
    """First/second-moment accumulators for one parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def clip_gradients(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    """Scale the gradient list so its global L2 norm is at most max_norm."""
    if not max_norm or max_norm <= 0.0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    max_norm: float | None = None,
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied in place to the parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists must align")
    grads = clip_gradients(grads, max_norm)
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = AdamState.BETA1, AdamState.BETA2, AdamState.EPS
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Dense layers for the feed-forward comparison models.
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DenseLayer:
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = as_tensor(self.w)
        self.b = as_tensor(self.b)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("dense layer needs w:(out,in) and b:(out,)")

    def clone(self) -> "DenseLayer":
        return DenseLayer(self.w.copy(), self.b.copy())


def init_dense_layer(out_width: int, in_width: int, rng: np.random.Generator) -> DenseLayer:
    limit = 1.0 / np.sqrt(in_width)
    return DenseLayer(rng.uniform(-limit, limit, size=(out_width, in_width)), np.zeros(out_width))


def dense_forward(
    x: np.ndarray, layer: DenseLayer, activation: str = "tanh"
) -> tuple[np.ndarray, tuple]:
    """x:(B,in) -> (B,out) with tanh or identity activation."""
    x = as_tensor(x)
    pre = x @ layer.w.T + layer.b
    if activation == "tanh":
        out = np.tanh(pre)
    elif activation == "linear":
        out = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return out, (x, out, layer, activation)


def dense_backward(cache: tuple, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, out, layer, activation = cache
    dout = as_tensor(dout)
    dpre = dout * (1.0 - out**2) if activation == "tanh" else dout
    dw = dpre.T @ x
    db = dpre.sum(axis=0)
    dx = dpre @ layer.w
    return dw, db, dx
