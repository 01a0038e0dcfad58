"""Deterministic synthetic gesture sequences.

Each class is a parametric motion of one or two Gaussian point blobs inside
the ROI. Every sequence gets its own RNG stream derived from
``(seed, class, ordinal)``, a random "subject" offset and a small amplitude
variation, so generation order never changes the output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import GestureSequence, PointCloudFrame, Roi, quantize, roi_mask

# (name, motion) pairs; a motion maps (frame index, frame count, amplitude)
# to one or two blob centres relative to the ROI centre.
Motion = Callable[[int, int, float], np.ndarray]

SWEEP = 0.18
ARC_RADIUS = 0.12
ARC_SPAN = 1.5 * math.pi
OSC_AMPLITUDE = 0.10
OSC_PERIOD = 4
TWO_BLOB_FAR = 0.18
TWO_BLOB_NEAR = 0.03


def _u(t: int, n: int) -> float:
    return t / (n - 1) if n > 1 else 0.0


def _sweep(axis: int) -> Motion:
    def motion(t, n, amp):
        c = np.zeros((1, 3))
        c[0, axis] = amp * SWEEP * (2 * _u(t, n) - 1)
        return c
    return motion


def _arc(a: int, b: int) -> Motion:
    def motion(t, n, amp):
        theta = ARC_SPAN * _u(t, n)
        c = np.zeros((1, 3))
        c[0, a] = amp * ARC_RADIUS * math.cos(theta)
        c[0, b] = amp * ARC_RADIUS * math.sin(theta)
        return c
    return motion


def _static(t, n, amp):
    return np.zeros((1, 3))


def _oscillate(t, n, amp):
    c = np.zeros((1, 3))
    c[0, 0] = amp * OSC_AMPLITUDE * math.sin(2 * math.pi * t / OSC_PERIOD)
    return c


def _two_blob(converge: bool) -> Motion:
    def motion(t, n, amp):
        u = _u(t, n) if converge else 1 - _u(t, n)
        d = amp * (TWO_BLOB_FAR + (TWO_BLOB_NEAR - TWO_BLOB_FAR) * u)
        return np.array([[-d, 0.0, 0.0], [d, 0.0, 0.0]])
    return motion


FAMILIES: list[tuple[str, Motion]] = [
    ("static", _static),
    ("sweep_x", _sweep(0)),
    ("sweep_y", _sweep(1)),
    ("sweep_z", _sweep(2)),
    ("arc_xy", _arc(0, 1)),
    ("arc_xz", _arc(0, 2)),
    ("arc_yz", _arc(1, 2)),
    ("oscillate_x", _oscillate),
    ("two_blob_converge", _two_blob(True)),
    ("two_blob_diverge", _two_blob(False)),
]
CLASS_NAMES = [name for name, _ in FAMILIES]


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    per_class: int = 30
    frames: int = 12
    points: int = 400
    noise: float = 0.01  # point scatter sigma, meters
    offset: float = 0.05  # per-sequence subject offset range, +/- meters
    amplitude_jitter: float = 0.15  # per-sequence motion scale in 1 +/- this
    margin: float = 0.05  # points stay this far inside the ROI
    n_subjects: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(FAMILIES):
            raise SynthError(f"num_classes must be in [1, {len(FAMILIES)}]")
        if min(self.per_class, self.frames, self.points, self.n_subjects) < 1:
            raise SynthError("counts must be positive")
        if min(self.noise, self.offset, self.amplitude_jitter, self.margin) < 0:
            raise SynthError("noise, offset, amplitude jitter and margin must be >= 0")
        if self.amplitude_jitter >= 1:
            raise SynthError("amplitude jitter must be < 1")


def sequence_seed(seed: int, label: int, ordinal: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, label, ordinal])


def generate_sequence(cfg: SynthConfig, roi: Roi, label: int, ordinal: int) -> GestureSequence:
    rng = np.random.default_rng(sequence_seed(cfg.seed, label, ordinal))
    offset = rng.uniform(-cfg.offset, cfg.offset, size=3) if cfg.offset > 0 else np.zeros(3)
    j = cfg.amplitude_jitter
    amp = rng.uniform(1 - j, 1 + j) if j > 0 else 1.0
    centre = (roi.lower + roi.upper) / 2 + offset
    motion = FAMILIES[label][1]
    inner = roi.shrink(cfg.margin)
    frames = []
    for t in range(cfg.frames):
        blobs = motion(t, cfg.frames, amp) + centre
        owner = np.arange(cfg.points) % len(blobs)
        # truncated at 3 sigma so the margin guarantee is exact
        scatter = np.clip(rng.normal(0.0, 1.0, size=(cfg.points, 3)), -3, 3) * cfg.noise
        pts = quantize(blobs[owner] + scatter)
        if not np.all(roi_mask(inner, pts)):
            raise SynthError(
                f"class {label} sequence {ordinal} leaves the ROI shrunk by {cfg.margin} m; "
                "reduce offset/noise or enlarge the ROI"
            )
        frames.append(PointCloudFrame(t, pts))
    return GestureSequence(tuple(frames), label, f"s{ordinal % cfg.n_subjects:02d}")


def generate(cfg: SynthConfig, roi: Roi) -> list[GestureSequence]:
    """``per_class`` sequences per class, ordered by class then ordinal."""
    return [
        generate_sequence(cfg, roi, label, k)
        for label in range(cfg.num_classes)
        for k in range(cfg.per_class)
    ]


def train_test_split(dataset: list[GestureSequence], test_per_class: int) -> list[str]:
    """Split tags: the last ``test_per_class`` sequences of each class go to test."""
    seen: dict[int, int] = {}
    totals: dict[int, int] = {}
    for s in dataset:
        totals[s.label] = totals.get(s.label, 0) + 1
    tags = []
    for s in dataset:
        k = seen.get(s.label, 0)
        seen[s.label] = k + 1
        tags.append("test" if k >= totals[s.label] - test_per_class else "train")
    return tags


def shifted_test_variant(dataset: list[GestureSequence], shift, roi: Roi | None = None) -> list[GestureSequence]:
    """Translate every point by ``shift``; with ``roi`` given, refuse to push points out of it."""
    shift = np.asarray(shift, dtype=np.float64)
    out = [seq.translated(shift) for seq in dataset]
    if roi is not None:
        for seq in out:
            for frame in seq.frames:
                if not np.all(roi_mask(roi, frame.points)):
                    raise SynthError(f"shift {shift.tolist()} moves points of frame {frame.index} out of the ROI")
    return out
