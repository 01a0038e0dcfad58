"""Point-cloud and ROI types, `.pcs` sequence I/O, ROI filtering and translation.

Points are stored as ``(n, 3)`` float64 arrays (meters) rather than lists of
point objects; :class:`Point3` is used for single points.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

PCS_MAGIC = "PCS 1"
COORD_FORMAT = "%.9g"


class PcsFormatError(ValueError):
    """Malformed `.pcs` input. ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def _as_points(points) -> np.ndarray:
    arr = np.array(points, dtype=np.float64, copy=True)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloudFrame:
    index: int
    points: np.ndarray

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"frame index must be non-negative, got {self.index}")
        object.__setattr__(self, "points", _as_points(self.points))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloudFrame):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.points, other.points)

    def translated(self, v) -> "PointCloudFrame":
        return PointCloudFrame(self.index, self.points + np.asarray(v, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class GestureSequence:
    frames: tuple[PointCloudFrame, ...]
    label: int
    subject_id: str = "s00"

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        if not self.subject_id or any(c.isspace() for c in self.subject_id):
            raise ValueError(f"subject id must be a non-empty token, got {self.subject_id!r}")
        for prev, cur in zip(frames, frames[1:]):
            if cur.index <= prev.index:
                raise ValueError(
                    f"frame indices must be strictly increasing ({prev.index} then {cur.index})"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GestureSequence):
            return NotImplemented
        return (
            self.label == other.label
            and self.subject_id == other.subject_id
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )

    def translated(self, v) -> "GestureSequence":
        return GestureSequence(tuple(f.translated(v) for f in self.frames), self.label, self.subject_id)


@dataclass(frozen=True)
class Roi:
    min: Point3
    max: Point3

    def __post_init__(self):
        lo, hi = Point3(*map(float, self.min)), Point3(*map(float, self.max))
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        if not all(np.isfinite(lo + hi)):
            raise ValueError("ROI bounds must be finite")
        if not (lo.x < hi.x and lo.y < hi.y and lo.z < hi.z):
            raise ValueError(f"ROI min must be below max on every axis: {lo} / {hi}")

    @classmethod
    def from_bounds(cls, x1, x2, y1, y2, z1, z2) -> "Roi":
        return cls(Point3(x1, y1, z1), Point3(x2, y2, z2))

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.min, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.max, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    def shrink(self, margin: float) -> "Roi":
        m = np.full(3, margin)
        return Roi(Point3(*(self.lower + m)), Point3(*(self.upper - m)))


# Capture volume used for the recorded gestures (meters).
REFERENCE_ROI = Roi.from_bounds(-0.50, 0.50, -0.30, 0.40, 0.50, 1.40)


def roi_contains(roi: Roi, p) -> bool:
    """Half-open containment: ``min <= p < max`` on every axis."""
    x, y, z = p
    return (
        roi.min.x <= x < roi.max.x
        and roi.min.y <= y < roi.max.y
        and roi.min.z <= z < roi.max.z
    )


def roi_mask(roi: Roi, points: np.ndarray) -> np.ndarray:
    """Vectorised :func:`roi_contains` over an ``(n, 3)`` array."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.all((points >= roi.lower) & (points < roi.upper), axis=1)


def filter_roi(frame: PointCloudFrame, roi: Roi) -> PointCloudFrame:
    return PointCloudFrame(frame.index, frame.points[roi_mask(roi, frame.points)])


def translate_roi(roi: Roi, v) -> Roi:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"translation must be a finite 3-vector, got {v!r}")
    return Roi(Point3(*(roi.lower + v)), Point3(*(roi.upper + v)))


# --------------------------------------------------------------------------
# .pcs sequence files


def write_sequence_file(seq: GestureSequence) -> bytes:
    out = io.StringIO()
    out.write(f"{PCS_MAGIC}\nlabel {seq.label}\nsubject {seq.subject_id}\n")
    for frame in seq.frames:
        out.write(f"FRAME {frame.index} {len(frame.points)}\n")
        for x, y, z in frame.points:
            out.write(f"{COORD_FORMAT % x} {COORD_FORMAT % y} {COORD_FORMAT % z}\n")
    return out.getvalue().encode("utf-8")


def _parse_int(token: str, what: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise PcsFormatError(f"{what} must be an integer, got {token!r}", lineno) from None


def _parse_block(block: list[str], index: int, count: int, first_lineno: int) -> np.ndarray:
    n_listed = len(block)
    for n, line in enumerate(block):
        if line.startswith("FRAME"):
            n_listed = n
            break
    if n_listed != count:
        raise PcsFormatError(
            f"frame {index} declares {count} points but lists {n_listed}", first_lineno + n_listed
        )
    rows = [line.split(" ") for line in block]
    try:
        if all(len(r) == 3 for r in rows):
            pts = np.array(rows, dtype=np.float64).reshape(count, 3)
            if np.all(np.isfinite(pts)):
                return pts
    except ValueError:
        pass
    # slow path: locate the offending line
    for n, r in enumerate(rows):
        lineno = first_lineno + n
        if len(r) != 3:
            raise PcsFormatError(f"expected 3 coordinates, got {block[n]!r}", lineno)
        try:
            vals = [float(c) for c in r]
        except ValueError:
            raise PcsFormatError(f"non-numeric coordinate in {block[n]!r}", lineno) from None
        if not all(np.isfinite(vals)):
            raise PcsFormatError(f"non-finite coordinate in {block[n]!r}", lineno)
    raise AssertionError("unreachable")


def parse_sequence_file(data: Union[bytes, str]) -> GestureSequence:
    """Parse a `.pcs` byte stream. Errors carry the 1-based line number."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PcsFormatError(f"not valid UTF-8: {exc}") from None
    lines = data.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def header(lineno: int, key: str) -> str:
        if len(lines) < lineno:
            raise PcsFormatError(f"missing header line {key!r}", lineno)
        parts = lines[lineno - 1].split(" ")
        if len(parts) != 2 or parts[0] != key or not parts[1]:
            raise PcsFormatError(f"expected '{key} <value>', got {lines[lineno - 1]!r}", lineno)
        return parts[1]

    if not lines or lines[0] != PCS_MAGIC:
        raise PcsFormatError(f"expected magic {PCS_MAGIC!r}", 1)
    label = _parse_int(header(2, "label"), "label", 2)
    subject = header(3, "subject")

    frames: list[PointCloudFrame] = []
    pos = 3
    while pos < len(lines):
        lineno = pos + 1
        parts = lines[pos].split(" ")
        if len(parts) != 3 or parts[0] != "FRAME":
            raise PcsFormatError(f"expected 'FRAME <index> <n_points>', got {lines[pos]!r}", lineno)
        index = _parse_int(parts[1], "frame index", lineno)
        count = _parse_int(parts[2], "point count", lineno)
        if index < 0 or count < 0:
            raise PcsFormatError("frame index and point count must be non-negative", lineno)
        if frames and index <= frames[-1].index:
            raise PcsFormatError(
                f"frame index {index} does not increase (previous {frames[-1].index})", lineno
            )
        block = lines[pos + 1 : pos + 1 + count]
        pts = _parse_block(block, index, count, pos + 2)
        frames.append(PointCloudFrame(index, pts))
        pos += 1 + count
    return GestureSequence(tuple(frames), label, subject)


def read_sequence(path) -> GestureSequence:
    with open(path, "rb") as fh:
        return parse_sequence_file(fh.read())


def quantize(points) -> np.ndarray:
    """Round coordinates to the 9 significant digits used on disk."""
    arr = np.asarray(points, dtype=np.float64)
    flat = [float(COORD_FORMAT % v) for v in arr.ravel().tolist()]
    return np.array(flat, dtype=np.float64).reshape(arr.shape)
