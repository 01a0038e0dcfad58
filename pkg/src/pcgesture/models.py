"""The two network architectures, assembled from the layer kernels in :mod:`pcgesture.nn`.

``cnn3d`` stacks the ``m`` grids of a window as input channels (early fusion)
and runs conv -> ReLU [-> pool] blocks, ReLU+dropout fully connected layers
and a linear output layer. ``cnn3d_lstm`` runs one shared mini CNN over each
time step, feeds the per-step features to an LSTM and classifies its final
hidden state.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import (
    ConvSpec,
    LayerParams,
    conv3d_backward,
    conv3d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    he_uniform,
    lstm_backward,
    lstm_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    pool_output_size,
    relu_backward,
    relu_forward,
    softmax,
    softmax_crossentropy,
    xavier_uniform,
)
from .voxelizer import GridDims, WindowTensor

KINDS = ("cnn3d", "cnn3d_lstm")
POOL = (2, 2, 2)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple[int, int, int, int]  # (m, nx, ny, nz)
    convs: tuple[ConvSpec, ...]
    pool_after: tuple[bool, ...]
    fc_widths: tuple[int, ...]
    num_classes: int
    dropout: float = 0.3
    lstm_hidden: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "convs", tuple(self.convs))
        object.__setattr__(self, "pool_after", tuple(bool(p) for p in self.pool_after))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if self.kind not in KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}")
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must be 4 positive ints (m, nx, ny, nz), got {self.input_shape}")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        if not self.convs or len(self.pool_after) != len(self.convs):
            raise SpecError("need at least one conv layer and one pool flag per conv layer")
        if not 0 <= self.dropout < 1:
            raise SpecError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kind == "cnn3d_lstm" and self.lstm_hidden < 1:
            raise SpecError("cnn3d_lstm needs a positive LSTM hidden size")
        if min(self.fc_widths, default=1) < 1:
            raise SpecError("fully connected widths must be positive")
        infer_shapes(self)  # validates the chain

    @property
    def m(self) -> int:
        return self.input_shape[0]

    @property
    def conv_prefix(self) -> str:
        return "conv" if self.kind == "cnn3d" else "step_conv"

    def layer_names(self) -> list[str]:
        names = [f"{self.conv_prefix}{i + 1}" for i in range(len(self.convs))]
        if self.kind == "cnn3d_lstm":
            names.append("lstm")
        names += [f"fc{i + 1}" for i in range(len(self.fc_widths))]
        return names + ["out"]


def infer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample output shape of every stage, in execution order.

    For ``cnn3d_lstm`` the conv stages are per time step.
    """
    m, *spatial = spec.input_shape
    channels = m if spec.kind == "cnn3d" else 1
    shapes = []
    for i, (conv, pool) in enumerate(zip(spec.convs, spec.pool_after)):
        name = f"{spec.conv_prefix}{i + 1}"
        if conv.in_channels != channels:
            raise SpecError(f"{name} expects {conv.in_channels} input channels, chain gives {channels}")
        if all(n == 1 for n in spatial):
            raise SpecError(f"{name} receives a 1x1x1 map: input dims too small for the schedule")
        spatial = list(conv.output_shape(tuple(spatial)))
        channels = conv.out_channels
        shapes.append((name, (channels, *spatial)))
        if pool:
            spatial = [pool_output_size(n, k, s) for n, k, s in zip(spatial, POOL, POOL)]
            shapes.append((f"{name}.pool", (channels, *spatial)))
    if min(spatial) < 1:
        raise SpecError("schedule collapses a spatial extent to zero")
    width = channels * int(np.prod(spatial))
    shapes.append(("flatten", (width,)))
    if spec.kind == "cnn3d_lstm":
        shapes.append(("lstm", (spec.lstm_hidden,)))
    for i, w in enumerate(spec.fc_widths):
        shapes.append((f"fc{i + 1}", (w,)))
    shapes.append(("out", (spec.num_classes,)))
    return shapes


def _dims_tuple(dims) -> tuple[int, int, int]:
    return dims.shape if isinstance(dims, GridDims) else tuple(int(d) for d in dims)


def default_cnn3d_spec(m: int, dims, num_classes: int, widths=(32, 64, 128, 128),
                       fc_widths=(256, 128), dropout: float = 0.3) -> ModelSpec:
    """Four stride-2 conv layers (5, 5, 3, 2 kernels), pooling after layers 2 and 4."""
    kernels = (5, 5, 3, 2)
    if len(widths) != 4:
        raise SpecError("cnn3d needs four conv widths")
    convs, cin = [], m
    for k, w in zip(kernels, widths):
        convs.append(ConvSpec(cin, w, (k, k, k), (2, 2, 2)))
        cin = w
    return ModelSpec("cnn3d", (m, *_dims_tuple(dims)), tuple(convs), (False, True, False, True),
                     tuple(fc_widths), num_classes, dropout)


def default_cnn3d_lstm_spec(m: int, dims, num_classes: int, widths=(16, 32), hidden: int = 128,
                            fc_widths=(128,), dropout: float = 0.3) -> ModelSpec:
    """Shared per-step mini CNN (5^3 then 3^3, stride 2, pool), LSTM, one FC layer."""
    convs = (ConvSpec(1, widths[0], (5, 5, 5), (2, 2, 2)),
             ConvSpec(widths[0], widths[1], (3, 3, 3), (2, 2, 2)))
    return ModelSpec("cnn3d_lstm", (m, *_dims_tuple(dims)), convs, (False, True),
                     tuple(fc_widths), num_classes, dropout, hidden)


# --------------------------------------------------------------------------
# config text and digest


def spec_to_config(spec: ModelSpec) -> str:
    cp = configparser.ConfigParser()
    cp["model"] = {
        "kind": spec.kind,
        "input": ",".join(map(str, spec.input_shape)),
        "classes": str(spec.num_classes),
        "dropout": repr(spec.dropout),
        "lstm_hidden": str(spec.lstm_hidden),
        "fc_widths": ",".join(map(str, spec.fc_widths)),
    }
    for i, (conv, pool) in enumerate(zip(spec.convs, spec.pool_after)):
        cp[f"{spec.conv_prefix}{i + 1}"] = {
            "in_channels": str(conv.in_channels),
            "out_channels": str(conv.out_channels),
            "kernel": ",".join(map(str, conv.kernel)),
            "stride": ",".join(map(str, conv.stride)),
            "pool_after": "true" if pool else "false",
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def spec_from_config(text: str) -> ModelSpec:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        if cp.sections()[:1] != ["model"]:
            raise SpecError("model config must start with a [model] section")
        model = cp["model"]
        ints = lambda s: tuple(int(v) for v in s.split(",") if v.strip())
        convs, pools = [], []
        for name in cp.sections()[1:]:
            sec = cp[name]
            convs.append(ConvSpec(sec.getint("in_channels"), sec.getint("out_channels"),
                                  ints(sec["kernel"]), ints(sec["stride"])))
            pools.append(sec.getboolean("pool_after"))
        return ModelSpec(model["kind"], ints(model["input"]), tuple(convs), tuple(pools),
                         ints(model.get("fc_widths", "")), model.getint("classes"),
                         float(model["dropout"]), model.getint("lstm_hidden", 0))
    except (KeyError, ValueError, configparser.Error) as exc:
        raise SpecError(f"invalid model config: {exc}") from None


def spec_digest(spec: ModelSpec) -> str:
    return hashlib.sha256(spec_to_config(spec).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# parameters


@dataclass(eq=False)
class ModelParams:
    layers: dict[str, LayerParams]
    digest: str

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.layers.items()}, self.digest)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.layers.items()}, self.digest)

    @property
    def dtype(self):
        return next(iter(self.layers.values())).weights.dtype

    def __getitem__(self, name: str) -> LayerParams:
        return self.layers[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.digest == other.digest and self.layers.keys() == other.layers.keys()
                and all(self.layers[k] == other.layers[k] for k in self.layers))

    def validate(self, spec: ModelSpec) -> None:
        if self.digest != spec_digest(spec):
            raise SpecError("parameter digest does not match the model spec")
        if list(self.layers) != spec.layer_names():
            raise SpecError(f"parameter blocks {list(self.layers)} do not match spec layers")


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelParams:
    """He-uniform for ReLU layers, Xavier-uniform for the LSTM and output; zero biases."""
    rng = np.random.default_rng(seed)
    layers: dict[str, LayerParams] = {}
    for i, conv in enumerate(spec.convs):
        fan_in = conv.in_channels * int(np.prod(conv.kernel))
        layers[f"{spec.conv_prefix}{i + 1}"] = LayerParams(
            he_uniform(rng, conv.weight_shape, fan_in, dtype), np.zeros(conv.out_channels, dtype))
    shapes = dict(infer_shapes(spec))
    width = shapes["flatten"][0]
    if spec.kind == "cnn3d_lstm":
        h = spec.lstm_hidden
        layers["lstm"] = LayerParams(xavier_uniform(rng, (4 * h, width + h), width + h, h, dtype),
                                     np.zeros(4 * h, dtype))
        width = h
    for i, w in enumerate(spec.fc_widths):
        layers[f"fc{i + 1}"] = LayerParams(he_uniform(rng, (w, width), width, dtype), np.zeros(w, dtype))
        width = w
    c = spec.num_classes
    layers["out"] = LayerParams(xavier_uniform(rng, (c, width), width, c, dtype), np.zeros(c, dtype))
    return ModelParams(layers, spec_digest(spec))


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(spec: ModelSpec, x, dtype) -> tuple[np.ndarray, bool]:
    if isinstance(x, WindowTensor):
        x = x.array()
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], WindowTensor):
        x = np.stack([w.array() for w in x])
    x = np.asarray(x)
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise SpecError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    return x.astype(dtype, copy=False), single


def _conv_stack(spec: ModelSpec, params: ModelParams, a: np.ndarray, cache: dict):
    for i, (conv, pool) in enumerate(zip(spec.convs, spec.pool_after)):
        name = f"{spec.conv_prefix}{i + 1}"
        z, cc = conv3d_forward(a, conv, params[name])
        r = relu_forward(z)
        entry = {"conv": cc, "z": z}
        cache["shapes"].append((name, z.shape[1:]))
        if pool:
            entry["pool_in_shape"] = r.shape
            r, entry["argmax"] = maxpool3d_forward(r, POOL, POOL)
            cache["shapes"].append((f"{name}.pool", r.shape[1:]))
        cache["convs"].append(entry)
        a = r
    return a


def _conv_stack_backward(spec: ModelSpec, params: ModelParams, g: np.ndarray, cache: dict, grads: dict):
    for i in reversed(range(len(spec.convs))):
        name = f"{spec.conv_prefix}{i + 1}"
        entry = cache["convs"][i]
        if "argmax" in entry:
            g = maxpool3d_backward(g, entry["argmax"], entry["pool_in_shape"])
        g = relu_backward(g, entry["z"])
        g, gw, gb = conv3d_backward(g, entry["conv"], spec.convs[i], params[name], input_grad=i > 0)
        grads[name] = (gw, gb)
    return g


def forward(spec: ModelSpec, params: ModelParams, x, training: bool = False,
            rng: Optional[np.random.Generator] = None):
    """Logits for one window (``(C,)``) or a batch (``(N, C)``), plus a backward cache.

    ``x`` may be a :class:`WindowTensor`, a list of them, an ``(m, nx, ny, nz)``
    array or an ``(N, m, nx, ny, nz)`` batch.
    """
    if training and spec.dropout > 0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    x, single = _as_batch(spec, x, params.dtype)
    n = x.shape[0]
    cache = {"digest": params.digest, "convs": [], "fcs": [], "shapes": [], "single": single}
    if spec.kind == "cnn3d":
        a = _conv_stack(spec, params, x, cache)
        cache["conv_out_shape"] = a.shape
        a = a.reshape(n, -1)
        cache["shapes"].append(("flatten", a.shape[1:]))
    else:
        m = spec.m
        a = _conv_stack(spec, params, x.reshape(n * m, 1, *x.shape[2:]), cache)
        cache["conv_out_shape"] = a.shape
        feats = a.reshape(n, m, -1)
        cache["shapes"].append(("flatten", feats.shape[2:]))
        hs, cache["lstm"] = lstm_forward(feats, params["lstm"])
        cache["lstm_hs_shape"] = hs.shape
        a = hs[:, -1]
        cache["shapes"].append(("lstm", a.shape[1:]))
    rate = spec.dropout if training else 0.0
    for i in range(len(spec.fc_widths)):
        name = f"fc{i + 1}"
        z = dense_forward(a, params[name])
        r = relu_forward(z)
        d, mask = dropout_forward(r, rate, training, rng)
        cache["fcs"].append({"x": a, "z": z, "mask": mask})
        cache["shapes"].append((name, z.shape[1:]))
        a = d
    cache["out_x"] = a
    logits = dense_forward(a, params["out"])
    cache["shapes"].append(("out", logits.shape[1:]))
    cache["rate"] = rate
    cache["logits"] = logits
    return (logits[0] if single else logits), cache


def backward(spec: ModelSpec, params: ModelParams, cache: dict, labels):
    """Mean cross-entropy loss and gradients for every parameter block.

    Returns ``(loss, grads)`` where ``grads[name] = (grad_weights, grad_biases)``.
    """
    if cache.get("digest") != params.digest:
        raise SpecError("stale cache: forward ran with different parameters")
    loss, _, g = softmax_crossentropy(cache["logits"], np.atleast_1d(labels))
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    g, gw, gb = dense_backward(g, cache["out_x"], params["out"])
    grads["out"] = (gw, gb)
    for i in reversed(range(len(spec.fc_widths))):
        name = f"fc{i + 1}"
        entry = cache["fcs"][i]
        g = dropout_backward(g, entry["mask"], cache["rate"])
        g = relu_backward(g, entry["z"])
        g, gw, gb = dense_backward(g, entry["x"], params[name])
        grads[name] = (gw, gb)
    if spec.kind == "cnn3d_lstm":
        dhs = np.zeros(cache["lstm_hs_shape"], dtype=g.dtype)
        dhs[:, -1] = g
        dfeats, gw, gb, _, _ = lstm_backward(dhs, cache["lstm"], params["lstm"])
        grads["lstm"] = (gw, gb)
        g = dfeats
    g = g.reshape(cache["conv_out_shape"])
    _conv_stack_backward(spec, params, g, cache, grads)
    return loss, {name: grads[name] for name in spec.layer_names()}


def predict(spec: ModelSpec, params: ModelParams, x):
    """``(class id, probabilities)``; ties resolve to the lowest class id.

    Batched input returns arrays of class ids and probabilities.
    """
    logits, _ = forward(spec, params, x, training=False)
    probs = softmax(logits)
    return (int(np.argmax(probs)) if probs.ndim == 1 else probs.argmax(axis=1)), probs
