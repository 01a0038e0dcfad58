"""Parameter blocks, initialisers and the Adam optimiser."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np


class NumericError(FloatingPointError):
    """A forward, backward or update step produced NaN or Inf."""


@dataclass(eq=False)
class LayerParams:
    """Weights and biases of one layer plus their Adam moments."""

    weights: np.ndarray
    biases: np.ndarray
    m_weights: np.ndarray = None
    v_weights: np.ndarray = None
    m_biases: np.ndarray = None
    v_biases: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        for name, ref in (("m_weights", self.weights), ("v_weights", self.weights),
                          ("m_biases", self.biases), ("v_biases", self.biases)):
            cur = getattr(self, name)
            if cur is None:
                setattr(self, name, np.zeros_like(ref))
            elif cur.shape != ref.shape:
                raise ValueError(f"{name} shape {cur.shape} does not match parameter {ref.shape}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "biases": self.biases}

    def adam_arrays(self) -> dict[str, np.ndarray]:
        return {"weights.m": self.m_weights, "weights.v": self.v_weights,
                "biases.m": self.m_biases, "biases.v": self.v_biases}

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy(), self.m_weights.copy(),
                           self.v_weights.copy(), self.m_biases.copy(), self.v_biases.copy(), self.step)

    def astype(self, dtype) -> "LayerParams":
        c = lambda a: a.astype(dtype)
        return LayerParams(c(self.weights), c(self.biases), c(self.m_weights), c(self.v_weights),
                           c(self.m_biases), c(self.v_biases), self.step)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerParams):
            return NotImplemented
        mine = {**self.arrays(), **self.adam_arrays()}
        theirs = {**other.arrays(), **other.adam_arrays()}
        return self.step == other.step and all(
            mine[k].dtype == theirs[k].dtype and np.array_equal(mine[k], theirs[k]) for k in mine)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def adam_step(
    params: Mapping[str, LayerParams],
    grads: Mapping[str, tuple[np.ndarray, np.ndarray]],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update of every block named in ``grads``."""
    for name, (gw, gb) in grads.items():
        p = params[name]
        if gw.shape != p.weights.shape or gb.shape != p.biases.shape:
            raise ValueError(f"gradient shapes for {name!r} do not match its parameters")
        t = p.step + 1
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        updates = []
        for value, m, v, g in ((p.weights, p.m_weights, p.v_weights, gw),
                               (p.biases, p.m_biases, p.v_biases, gb)):
            dt = value.dtype.type
            m_new = dt(beta1) * m + dt(1 - beta1) * g
            v_new = dt(beta2) * v + dt(1 - beta2) * g * g
            delta = dt(lr) * (m_new / dt(c1)) / (np.sqrt(v_new / dt(c2)) + dt(eps))
            if not np.all(np.isfinite(delta)):
                raise NumericError(f"non-finite Adam update for {name!r}")
            updates.append((value, m, v, m_new, v_new, delta))
        for value, m, v, m_new, v_new, delta in updates:
            m[...] = m_new
            v[...] = v_new
            value -= delta
        p.step = t
