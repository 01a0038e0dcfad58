"""LSTM cell with backpropagation through time.

Weights are ``(4H, I + H)`` acting on ``[x, h_prev]``; gate rows are ordered
input, forget, output, candidate.
"""
from __future__ import annotations

import numpy as np

from .layers import check_finite
from .params import LayerParams


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _hidden(params: LayerParams) -> int:
    h4 = params.weights.shape[0]
    if h4 % 4:
        raise ValueError(f"LSTM weight rows must be a multiple of 4, got {h4}")
    return h4 // 4


def lstm_cell_forward(x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, params: LayerParams):
    """One step on a batch. Returns ``(h, c, cache)``."""
    hsz = _hidden(params)
    if h_prev.shape[-1] != hsz or c_prev.shape[-1] != hsz:
        raise ValueError(f"state width does not match hidden size {hsz}")
    xh = np.concatenate([x, h_prev], axis=-1)
    if xh.shape[-1] != params.weights.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match LSTM weights")
    a = xh @ params.weights.T + params.biases
    i = sigmoid(a[..., :hsz])
    f = sigmoid(a[..., hsz : 2 * hsz])
    o = sigmoid(a[..., 2 * hsz : 3 * hsz])
    g = np.tanh(a[..., 3 * hsz :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = check_finite(o * tc, "LSTM hidden state")
    return h, c, (xh, c_prev, i, f, o, g, tc)


def lstm_cell_backward(dh: np.ndarray, dc: np.ndarray, cache, params: LayerParams):
    """Returns ``(dx, dh_prev, dc_prev, dW, db)``; ``dc`` is the gradient flowing into ``c``."""
    xh, c_prev, i, f, o, g, tc = cache
    hsz = _hidden(params)
    do = dh * tc
    dc = dc + dh * o * (1 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1
    )
    xh2 = xh.reshape(-1, xh.shape[-1])
    da2 = da.reshape(-1, 4 * hsz)
    dW = da2.T @ xh2
    db = da2.sum(axis=0)
    dxh = da @ params.weights
    nx = xh.shape[-1] - hsz
    return dxh[..., :nx], dxh[..., nx:], dc_prev, dW, db


def lstm_forward(xs: np.ndarray, params: LayerParams, h0=None, c0=None):
    """Run over ``xs`` shaped ``(N, T, I)``. Returns ``(hs (N, T, H), cache)``."""
    n, steps, _ = xs.shape
    hsz = _hidden(params)
    h = np.zeros((n, hsz), dtype=xs.dtype) if h0 is None else h0
    c = np.zeros((n, hsz), dtype=xs.dtype) if c0 is None else c0
    hs = np.empty((n, steps, hsz), dtype=xs.dtype)
    caches = []
    for t in range(steps):
        h, c, cache = lstm_cell_forward(xs[:, t], h, c, params)
        hs[:, t] = h
        caches.append(cache)
    return hs, caches


def lstm_backward(dhs: np.ndarray, caches, params: LayerParams, dh_last=None, dc_last=None):
    """BPTT over the cached steps. Returns ``(dxs, dW, db, dh0, dc0)``."""
    n, steps, hsz = dhs.shape
    dh_next = np.zeros((n, hsz), dtype=dhs.dtype) if dh_last is None else dh_last
    dc_next = np.zeros((n, hsz), dtype=dhs.dtype) if dc_last is None else dc_last
    dW = np.zeros_like(params.weights)
    db = np.zeros_like(params.biases)
    dxs = None
    for t in reversed(range(steps)):
        dx, dh_next, dc_next, dWt, dbt = lstm_cell_backward(dhs[:, t] + dh_next, dc_next, caches[t], params)
        if dxs is None:
            dxs = np.empty((n, steps, dx.shape[-1]), dtype=dx.dtype)
        dxs[:, t] = dx
        dW += dWt
        db += dbt
    return dxs, dW, db, dh_next, dc_next
