"""3D ROI jittering.

The jitter set for size ``alpha`` is the union of ``{0, alpha}^3`` and
``{0, -alpha}^3``: 15 distinct single-signed translations including zero.
One translation is drawn per gesture performance and applied to the ROI,
so the point cloud stays put while the capture box moves.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import GestureSequence, Roi, translate_roi
from .voxelizer import OccupancyGrid, WindowTensor, assemble_windows, voxelize_sequence

DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class JitterConfig:
    alpha: float = DEFAULT_ALPHA
    include_zero: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"jitter size must be >= 0, got {self.alpha}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def jitter_vectors(alpha: float) -> list[tuple[float, float, float]]:
    """Distinct jitter translations, sorted lexicographically (negatives first)."""
    if not alpha >= 0:
        raise ValueError(f"jitter size must be >= 0, got {alpha}")
    vecs = set()
    for a in (alpha, -alpha):
        vecs.update(itertools.product((0.0, a), repeat=3))
    # -0.0 and 0.0 collapse in the set; normalise the survivors
    return sorted({tuple(c + 0.0 for c in v) for v in vecs})


def sequence_rng(seed: int, ordinal: int) -> np.random.Generator:
    """Independent stream per sequence so results do not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, ordinal]))


def sample_jitter(cfg: JitterConfig, rng: np.random.Generator) -> np.ndarray:
    choices = jitter_vectors(cfg.alpha)
    if cfg.alpha > 0 and not cfg.include_zero:
        choices = [v for v in choices if any(v)]
    return np.array(choices[int(rng.integers(len(choices)))], dtype=np.float64)


def augment_sequence(
    seq: GestureSequence,
    roi: Roi,
    voxel_size: float,
    mode: str,
    cfg: JitterConfig,
    rng: np.random.Generator,
) -> list[OccupancyGrid]:
    v = sample_jitter(cfg, rng)
    return voxelize_sequence(seq, translate_roi(roi, v), voxel_size, mode)


def build_windows(
    dataset: Sequence[GestureSequence], roi: Roi, voxel_size: float, mode: str, m: int
) -> list[WindowTensor]:
    """Windows of the unaugmented dataset; ``sequence_id`` is the dataset ordinal."""
    out = []
    for n, seq in enumerate(dataset):
        out.extend(assemble_windows(voxelize_sequence(seq, roi, voxel_size, mode), m, seq.label, n))
    return out


def build_augmented_dataset(
    dataset: Sequence[GestureSequence],
    roi: Roi,
    voxel_size: float,
    mode: str,
    cfg: JitterConfig,
    m: int,
) -> list[WindowTensor]:
    """Original windows followed by one jittered copy of every sequence.

    Jittered copies get ``sequence_id = n + len(dataset)`` so the two copies
    of a performance stay distinguishable.
    """
    out = build_windows(dataset, roi, voxel_size, mode, m)
    for n, seq in enumerate(dataset):
        grids = augment_sequence(seq, roi, voxel_size, mode, cfg, sequence_rng(cfg.seed, n))
        out.extend(assemble_windows(grids, m, seq.label, n + len(dataset)))
    return out
