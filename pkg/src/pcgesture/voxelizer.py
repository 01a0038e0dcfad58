"""Occupancy-grid voxelization of point-cloud frames and lookback windows.

Grid values are laid out x-major, then y, then z (C order over ``(nx, ny, nz)``).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import GestureSequence, PointCloudFrame, Roi, roi_contains, roi_mask

DEFAULT_CELL_CAP = 2**24
# quotients within this distance of an integer are treated as exact
DIM_EPSILON = 1e-9

MODES = ("count", "binary")
OGD_MAGIC = b"OGD1"


class GridSizeError(ValueError):
    pass


@dataclass(frozen=True)
class GridDims:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"grid dims must be positive, got {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def cells(self) -> int:
        return self.nx * self.ny * self.nz


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    dims: GridDims
    voxel_size: float
    values: np.ndarray  # float32, shape dims.shape
    mode: str = "count"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown grid mode {self.mode!r}")
        vals = np.asarray(self.values, dtype=np.float32).reshape(self.dims.shape)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.voxel_size == other.voxel_size
            and self.mode == other.mode
            and np.array_equal(self.values, other.values)
        )

    def compatible(self, other: "OccupancyGrid") -> bool:
        return self.dims == other.dims and self.voxel_size == other.voxel_size and self.mode == other.mode

    @property
    def occupied(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass(frozen=True, eq=False)
class WindowTensor:
    """``m`` consecutive grids, oldest first, plus the sequence label."""

    grids: tuple[OccupancyGrid, ...]
    label: Optional[int] = None
    sequence_id: Optional[int] = None

    def __post_init__(self):
        grids = tuple(self.grids)
        object.__setattr__(self, "grids", grids)
        if not grids:
            raise ValueError("a window needs at least one grid")
        if not all(g.compatible(grids[0]) for g in grids[1:]):
            raise ValueError("all grids in a window must share dims, voxel size and mode")

    @property
    def m(self) -> int:
        return len(self.grids)

    @property
    def dims(self) -> GridDims:
        return self.grids[0].dims

    def array(self, dtype=np.float32) -> np.ndarray:
        """Stack to ``(m, nx, ny, nz)``; time steps become channels."""
        return np.stack([g.values for g in self.grids]).astype(dtype, copy=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WindowTensor):
            return NotImplemented
        return (
            self.label == other.label
            and self.sequence_id == other.sequence_id
            and len(self.grids) == len(other.grids)
            and all(a == b for a, b in zip(self.grids, other.grids))
        )


def _axis_cells(extent: float, voxel_size: float) -> int:
    q = extent / voxel_size
    r = round(q)
    n = int(r) if abs(q - r) <= DIM_EPSILON else math.ceil(q)
    return max(n, 1)


def grid_dims(roi: Roi, voxel_size: float, cell_cap: int = DEFAULT_CELL_CAP) -> GridDims:
    if not voxel_size > 0 or not math.isfinite(voxel_size):
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    dims = GridDims(*(_axis_cells(float(e), voxel_size) for e in roi.extent))
    if dims.cells > cell_cap:
        raise GridSizeError(f"grid {dims.shape} has {dims.cells} cells, cap is {cell_cap}")
    return dims


def _indices(roi: Roi, voxel_size: float, points: np.ndarray, dims: GridDims) -> np.ndarray:
    q = (points - roi.lower) / voxel_size
    # Same tolerance as the dims rule: 0.3/0.05 evaluates to 5.999999999999999
    # but the point sits on the boundary of cell 6, so snap near-integers first.
    r = np.round(q)
    q = np.where(np.abs(q - r) <= DIM_EPSILON, r, q)
    idx = np.floor(q).astype(np.int64)
    # a point just below max can still land on the dim itself
    return np.clip(idx, 0, np.array(dims.shape) - 1)


def point_to_voxel(roi: Roi, voxel_size: float, p) -> Optional[tuple[int, int, int]]:
    """Voxel index of ``p``, or ``None`` when ``p`` lies outside the ROI."""
    if not roi_contains(roi, p):
        return None
    dims = grid_dims(roi, voxel_size, cell_cap=2**63)
    i, j, k = _indices(roi, voxel_size, np.asarray(p, dtype=np.float64).reshape(1, 3), dims)[0]
    return int(i), int(j), int(k)


def voxelize(
    frame: PointCloudFrame,
    roi: Roi,
    voxel_size: float,
    mode: str = "binary",
    cell_cap: int = DEFAULT_CELL_CAP,
) -> OccupancyGrid:
    """Accumulate hits per voxel; binary mode clamps counts to 1."""
    if mode not in MODES:
        raise ValueError(f"unknown grid mode {mode!r}")
    dims = grid_dims(roi, voxel_size, cell_cap)
    pts = frame.points[roi_mask(roi, frame.points)]
    idx = _indices(roi, voxel_size, pts, dims)
    flat = np.ravel_multi_index(idx.T, dims.shape) if len(idx) else np.empty(0, dtype=np.int64)
    counts = np.bincount(flat, minlength=dims.cells).astype(np.float32)
    if mode == "binary":
        np.minimum(counts, 1.0, out=counts)
    return OccupancyGrid(dims, float(voxel_size), counts.reshape(dims.shape), mode)


def voxelize_sequence(
    seq: GestureSequence, roi: Roi, voxel_size: float, mode: str = "binary", **kw
) -> list[OccupancyGrid]:
    return [voxelize(f, roi, voxel_size, mode, **kw) for f in seq.frames]


def assemble_windows(
    grids: Sequence[OccupancyGrid],
    m: int,
    label: Optional[int] = None,
    sequence_id: Optional[int] = None,
) -> list[WindowTensor]:
    """One window per ``t >= m-1``; no padding for the first steps."""
    if m < 1:
        raise ValueError(f"window length must be >= 1, got {m}")
    grids = list(grids)
    if grids and not all(g.compatible(grids[0]) for g in grids[1:]):
        raise ValueError("grids must share dims, voxel size and mode")
    return [
        WindowTensor(tuple(grids[t - m + 1 : t + 1]), label, sequence_id)
        for t in range(m - 1, len(grids))
    ]


# --------------------------------------------------------------------------
# .ogd grid dumps


def dump_grid(grid: OccupancyGrid) -> bytes:
    head = OGD_MAGIC + struct.pack(
        "<3IfB", grid.dims.nx, grid.dims.ny, grid.dims.nz, grid.voxel_size, MODES.index(grid.mode)
    )
    return head + grid.values.astype("<f4").tobytes(order="C")


def load_grid(data: bytes) -> OccupancyGrid:
    head_size = 4 + struct.calcsize("<3IfB")
    if len(data) < head_size or data[:4] != OGD_MAGIC:
        raise ValueError("not an OGD1 grid dump")
    nx, ny, nz, voxel, mode = struct.unpack("<3IfB", data[4:head_size])
    if mode >= len(MODES):
        raise ValueError(f"bad grid mode byte {mode}")
    dims = GridDims(nx, ny, nz)
    body = data[head_size:]
    if len(body) != 4 * dims.cells:
        raise ValueError(f"expected {4 * dims.cells} value bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(dims.shape)
    return OccupancyGrid(dims, float(voxel), values, MODES[mode])
