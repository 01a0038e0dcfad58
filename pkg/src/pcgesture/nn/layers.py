"""Forward/backward kernels for the fixed layer set.

Every kernel works on a leading batch axis. Spatial tensors are
``(N, C, X, Y, Z)``; dense tensors are ``(N, features)``. Arrays keep the
dtype they arrive in: float32 for training, float64 for gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .params import LayerParams, NumericError


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Triple = (3, 3, 3)
    stride: Triple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride components must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_shape(self, spatial: Triple) -> Triple:
        return tuple(same_padding(n, k, s)[0] for n, k, s in zip(spatial, self.kernel, self.stride))


def same_padding(n: int, k: int, s: int) -> tuple[int, int, int]:
    """(output size, low pad, high pad) with ``out = ceil(n / s)``; odd excess goes high."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def pool_output_size(n: int, k: int, s: int) -> int:
    """Ceil-mode pooling size; the last window must start inside the input."""
    out = max(math.ceil((n - k) / s), 0) + 1
    while out > 1 and (out - 1) * s >= n:
        out -= 1
    return out


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected a {ndim - 1}D or batched {ndim}D array, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# conv3d


def _pad_input(x: np.ndarray, spec: ConvSpec):
    geom = [same_padding(n, k, s) for n, k, s in zip(x.shape[2:], spec.kernel, spec.stride)]
    pads = [(0, 0), (0, 0)] + [(lo, hi) for _, lo, hi in geom]
    return np.pad(x, pads), tuple(g[0] for g in geom), tuple(g[1] for g in geom)


def _im2col(xpad: np.ndarray, spec: ConvSpec, out: Triple) -> np.ndarray:
    sx, sy, sz = spec.stride
    ox, oy, oz = out
    win = sliding_window_view(xpad, spec.kernel, axis=(2, 3, 4))
    win = win[:, :, : (ox - 1) * sx + 1 : sx, : (oy - 1) * sy + 1 : sy, : (oz - 1) * sz + 1 : sz]
    n, c = xpad.shape[:2]
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * ox * oy * oz, c * int(np.prod(spec.kernel)))


def conv3d_forward(x: np.ndarray, spec: ConvSpec, params: LayerParams, ordered: Optional[bool] = None):
    """Cross-correlation with "same" padding and per-channel bias.

    Two summation strategies give the same map:

    * ``ordered=True`` accumulates, for every output element, over input
      channel, then kx, ky, kz in that order, then adds the bias. This is
      bit-reproducible against a naive nested-loop reference.
    * ``ordered=False`` uses an im2col matrix product (BLAS order).

    The default is ordered for float64 inputs and BLAS for float32.
    """
    x, squeeze = _batched(x, 5)
    w, b = params.weights, params.biases
    if x.shape[1] != spec.in_channels or w.shape != spec.weight_shape:
        raise ValueError(f"conv input {x.shape} / weights {w.shape} do not match {spec}")
    if ordered is None:
        ordered = x.dtype == np.float64
    xpad, out, lo = _pad_input(x, spec)
    n = x.shape[0]
    if ordered:
        sx, sy, sz = spec.stride
        ox, oy, oz = out
        acc = np.zeros((n, spec.out_channels, ox, oy, oz), dtype=np.result_type(x, w))
        for ci in range(spec.in_channels):
            for a in range(spec.kernel[0]):
                for bb in range(spec.kernel[1]):
                    for c in range(spec.kernel[2]):
                        patch = xpad[:, ci, a : a + (ox - 1) * sx + 1 : sx,
                                     bb : bb + (oy - 1) * sy + 1 : sy,
                                     c : c + (oz - 1) * sz + 1 : sz]
                        acc += w[None, :, ci, a, bb, c, None, None, None] * patch[:, None]
        y = acc + b[None, :, None, None, None]
        cols = None
    else:
        cols = _im2col(xpad, spec, out)
        y = cols @ w.reshape(spec.out_channels, -1).T + b
        y = y.reshape(n, *out, spec.out_channels).transpose(0, 4, 1, 2, 3)
        y = np.ascontiguousarray(y)
    check_finite(y, "conv3d output")
    cache = {"xpad_shape": xpad.shape, "x_shape": x.shape, "lo": lo, "out": out,
             "cols": cols, "xpad": xpad if cols is None else None, "squeeze": squeeze}
    return (y[0] if squeeze else y), cache


def conv3d_backward(grad_out: np.ndarray, cache, spec: ConvSpec, params: LayerParams,
                    input_grad: bool = True):
    """Returns ``(grad_input, grad_weights, grad_biases)``.

    ``input_grad=False`` skips the input gradient (returned as ``None``), which
    is all a first layer needs.
    """
    g, _ = _batched(grad_out, 5)
    n = cache["x_shape"][0]
    out = cache["out"]
    if g.shape != (n, spec.out_channels, *out):
        raise ValueError(f"grad_out shape {g.shape} does not match forward output")
    w = params.weights
    cols = cache["cols"]
    if cols is None:
        cols = _im2col(cache["xpad"], spec, out)
    g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, spec.out_channels)
    grad_w = (g2.T @ cols).reshape(w.shape)
    grad_b = g2.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b
    gcols = (g2 @ w.reshape(spec.out_channels, -1)).reshape(n, *out, spec.in_channels, *spec.kernel)
    gcols = np.ascontiguousarray(gcols.transpose(0, 4, 5, 6, 7, 1, 2, 3))  # N, C, kx, ky, kz, ox, oy, oz
    gxpad = np.zeros(cache["xpad_shape"], dtype=g2.dtype)
    sx, sy, sz = spec.stride
    ox, oy, oz = out
    for a in range(spec.kernel[0]):
        for bb in range(spec.kernel[1]):
            for c in range(spec.kernel[2]):
                gxpad[:, :, a : a + (ox - 1) * sx + 1 : sx,
                      bb : bb + (oy - 1) * sy + 1 : sy,
                      c : c + (oz - 1) * sz + 1 : sz] += gcols[:, :, a, bb, c]
    X, Y, Z = cache["x_shape"][2:]
    lx, ly, lz = cache["lo"]
    grad_x = gxpad[:, :, lx : lx + X, ly : ly + Y, lz : lz + Z]
    if cache["squeeze"]:
        grad_x = grad_x[0]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# --------------------------------------------------------------------------
# max pooling


def maxpool3d_forward(x: np.ndarray, kernel=(2, 2, 2), stride=(2, 2, 2)):
    """Ceil-mode max pooling; partial windows at the high edges are clipped.

    Returns ``(output, argmax)`` where ``argmax`` holds flat indices into the
    spatial block of each ``(sample, channel)``. Ties go to the first cell in
    canonical (x, y, z) order.
    """
    x, squeeze = _batched(x, 5)
    kernel, stride = _triple(kernel), _triple(stride)
    if min(kernel) < 1 or min(stride) < 1:
        raise ValueError("pool kernel and stride must be >= 1")
    spatial = x.shape[2:]
    out = tuple(pool_output_size(n, k, s) for n, k, s in zip(spatial, kernel, stride))
    need = [(o - 1) * s + k for o, s, k in zip(out, stride, kernel)]
    pads = [(0, 0), (0, 0)] + [(0, max(nd - n, 0)) for nd, n in zip(need, spatial)]
    xpad = np.pad(x, pads, constant_values=-np.inf)
    # flat spatial index of every padded cell, in the unpadded block (-1 on padding)
    ids = np.full(xpad.shape[2:], -1, dtype=np.int64)
    ids[: spatial[0], : spatial[1], : spatial[2]] = np.arange(int(np.prod(spatial))).reshape(spatial)
    sl = tuple(slice(0, (o - 1) * s + 1, s) for o, s in zip(out, stride))
    win = sliding_window_view(xpad, kernel, axis=(2, 3, 4))[(slice(None), slice(None)) + sl]
    id_win = sliding_window_view(ids, kernel)[sl]
    n, c = x.shape[:2]
    flat = win.reshape(n, c, *out, -1)
    pick = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, pick[..., None], axis=-1)[..., 0]
    argmax = np.take_along_axis(
        np.broadcast_to(id_win.reshape(*out, -1), (n, c, *out, id_win[0, 0, 0].size)),
        pick[..., None], axis=-1)[..., 0]
    if squeeze:
        return y[0], argmax[0]
    return y, argmax


def maxpool3d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    """Route each output gradient to its argmax cell; overlaps accumulate."""
    if grad_out.shape != argmax.shape:
        raise ValueError(f"grad_out {grad_out.shape} does not match argmax {argmax.shape}")
    input_shape = tuple(input_shape)
    lead = input_shape[:-3]
    cells = int(np.prod(input_shape[-3:]))
    g = grad_out.reshape(int(np.prod(lead, dtype=np.int64)), -1)
    idx = argmax.reshape(g.shape)
    grad_in = np.zeros((g.shape[0], cells), dtype=grad_out.dtype)
    rows = np.repeat(np.arange(g.shape[0]), g.shape[1])
    np.add.at(grad_in, (rows, idx.ravel()), g.ravel())
    return grad_in.reshape(input_shape)


# --------------------------------------------------------------------------
# elementwise and dense


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """``y = W x + b`` with ``W`` shaped ``(out, in)``; ``x`` is flattened per sample."""
    x2, squeeze = (x.reshape(1, -1), True) if x.ndim == 1 else (x.reshape(x.shape[0], -1), False)
    w = params.weights
    if x2.shape[1] != w.shape[1]:
        raise ValueError(f"dense input has {x2.shape[1]} features, weights expect {w.shape[1]}")
    y = check_finite(x2 @ w.T + params.biases, "dense output")
    return y[0] if squeeze else y


def dense_backward(grad_out: np.ndarray, x: np.ndarray, params: LayerParams):
    """Returns ``(grad_x, grad_W, grad_b)``; ``grad_x`` takes the shape of ``x``."""
    g = grad_out.reshape(1, -1) if grad_out.ndim == 1 else grad_out
    x2 = x.reshape(g.shape[0], -1)
    if g.shape[1] != params.weights.shape[0]:
        raise ValueError("grad_out does not match dense output width")
    grad_x = (g @ params.weights).reshape(x.shape)
    return grad_x, g.T @ x2, g.sum(axis=0)


def dropout_forward(x: np.ndarray, rate: float, training: bool, rng: Optional[np.random.Generator]):
    """Inverted dropout. Returns ``(output, keep_mask)``; the mask is 0/1."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, np.ones_like(x)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * keep * x.dtype.type(1.0 / (1.0 - rate)), keep


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    """``rate`` must be the rate in effect during forward (0 at inference)."""
    if rate == 0:
        return grad_out * mask
    return grad_out * mask * grad_out.dtype.type(1.0 / (1.0 - rate))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_crossentropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probabilities, grad_logits)``. A 1-D ``logits`` with a
    scalar label is treated as a batch of one and returned unbatched.
    """
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if c < 2:
        raise ValueError("need at least two classes")
    if y.shape != (n,) or np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"labels {labels!r} invalid for {c} classes")
    check_finite(z, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    probs = e / total
    losses = np.log(total[:, 0]) - shifted[np.arange(n), y]
    grad = probs.copy()
    grad[np.arange(n), y] -= 1
    grad /= n
    loss = float(losses.mean())
    if single:
        return loss, probs[0], grad[0]
    return loss, probs, grad
