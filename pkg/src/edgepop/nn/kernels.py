"""Whole-sequence LSTM kernels with a compiled fast path.

``seq_forward``/``seq_backward`` process a full (time, batch, width)
tensor for one layer.  The input-to-gate projections are hoisted out of
the time loop as single large matmuls; only the recurrent part iterates.
That loop runs either in the Cython extension or in the numpy fallback
below, chosen once at import (override with EDGEPOP_BACKEND=python|cython).
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np
from scipy.special import expit

_requested = os.environ.get("EDGEPOP_BACKEND", "auto").lower()
if _requested not in ("auto", "cython", "python"):
    raise ValueError(f"EDGEPOP_BACKEND must be auto, cython or python, not {_requested!r}")

_cy = None
if _requested in ("auto", "cython"):
    try:
        from . import _kernels_cy as _cy
    except ImportError:
        if _requested == "cython":
            raise


def backend_name() -> str:
    """Which loop implementation was selected at import."""
    return "cython" if _cy is not None else "python"


class SeqCache(NamedTuple):
    """Per-step gate activations retained for the backward pass."""

    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tc: np.ndarray
    y: np.ndarray


def _loop_forward_py(ax, wr, y, f, i, g, o, c, tc):
    n_steps, batch, h4 = ax.shape
    h = h4 // 4
    y_prev = np.zeros((batch, h))
    c_prev = np.zeros((batch, h))
    for t in range(n_steps):
        a = ax[t]
        a += y_prev @ wr.T
        f[t] = expit(a[:, :h])
        i[t] = expit(a[:, h : 2 * h])
        g[t] = np.tanh(a[:, 2 * h : 3 * h])
        o[t] = expit(a[:, 3 * h :])
        c[t] = f[t] * c_prev + i[t] * g[t]
        tc[t] = np.tanh(c[t])
        y[t] = o[t] * tc[t]
        y_prev = y[t]
        c_prev = c[t]


def _loop_backward_py(dy_out, wr, f, i, g, o, c, tc, da):
    n_steps, batch, h = dy_out.shape
    dy_rec = np.zeros((batch, h))
    dc_rec = np.zeros((batch, h))
    for t in range(n_steps - 1, -1, -1):
        dy = dy_out[t] + dy_rec
        do = dy * tc[t]
        dc = dc_rec + dy * o[t] * (1.0 - tc[t] ** 2)
        c_prev = c[t - 1] if t > 0 else 0.0
        da_t = da[t]
        da_t[:, :h] = dc * c_prev * f[t] * (1.0 - f[t])
        da_t[:, h : 2 * h] = dc * g[t] * i[t] * (1.0 - i[t])
        da_t[:, 2 * h : 3 * h] = dc * i[t] * (1.0 - g[t] ** 2)
        da_t[:, 3 * h :] = do * o[t] * (1.0 - o[t])
        dc_rec = dc * f[t]
        dy_rec = da_t @ wr


def seq_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, SeqCache]:
    """Run one LSTM layer over x:(T,B,in), zero initial state.

    Returns the output sequence (T,B,hidden) and the cache for
    ``seq_backward``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("expected (time, batch, width) input")
    n_steps, batch, in_w = x.shape
    h4 = w.shape[0]
    h = h4 // 4
    if w.shape[1] != h + in_w:
        raise ValueError("weight width does not match input width")
    wr = np.ascontiguousarray(w[:, :h])
    wx = w[:, h:]
    ax = x.reshape(n_steps * batch, in_w) @ wx.T
    ax += b
    ax = np.ascontiguousarray(ax.reshape(n_steps, batch, h4))
    y, f, i, g, o, c, tc = (np.empty((n_steps, batch, h)) for _ in range(7))
    if _cy is not None:
        _cy.loop_forward(ax, wr, y, f, i, g, o, c, tc)
    else:
        _loop_forward_py(ax, wr, y, f, i, g, o, c, tc)
    return y, SeqCache(f, i, g, o, c, tc, y)


def seq_backward(
    w: np.ndarray, x: np.ndarray, cache: SeqCache, dy_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a seq_forward call.

    dy_out:(T,B,hidden) holds the loss gradient w.r.t. every step's
    output.  Returns (dw, db, dx) with dw packed like the weight matrix.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    dy_out = np.ascontiguousarray(dy_out, dtype=np.float64)
    n_steps, batch, in_w = x.shape
    h4 = w.shape[0]
    h = h4 // 4
    wr = np.ascontiguousarray(w[:, :h])
    da = np.empty((n_steps, batch, h4))
    if _cy is not None:
        _cy.loop_backward(dy_out, wr, cache.f, cache.i, cache.g, cache.o, cache.c, cache.tc, da)
    else:
        _loop_backward_py(dy_out, wr, cache.f, cache.i, cache.g, cache.o, cache.c, cache.tc, da)
    da2 = da.reshape(n_steps * batch, h4)
    dx = (da2 @ w[:, h:]).reshape(n_steps, batch, in_w)
    y_prev = np.concatenate([np.zeros((1, batch, h)), cache.y[:-1]])
    dw = np.empty_like(w)
    dw[:, :h] = da2.T @ y_prev.reshape(n_steps * batch, h)
    dw[:, h:] = da2.T @ x.reshape(n_steps * batch, in_w)
    db = da2.sum(axis=0)
    return dw, db, dx
