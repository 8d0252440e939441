"""Grid-aligned value types.

Arrays are indexed ``[i, j, k]`` with ``i`` the x axis. The linear order used
on disk is x-fastest, which is numpy's Fortran order for these arrays.
Displacement fields are stored channel-first, shape ``(3, X, Y, Z)``, in
voxel units; the warp they describe is ``x -> x + u(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

MIN_DIM = 4


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("grid needs exactly 3 dims and 3 spacings")
        if any(d < MIN_DIM for d in dims):
            raise ValueError(f"every grid dim must be >= {MIN_DIM}, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @classmethod
    def cube(cls, n: int) -> "Grid":
        return cls((n, n, n))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _float_array(data) -> np.ndarray:
    a = np.asarray(data)
    # 64-bit is kept for gradient checks; everything else is stored as f32
    if a.dtype != np.float64:
        a = a.astype(np.float32)
    return a


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        a = _float_array(self.data)
        if a.shape != self.grid.dims:
            raise ValueError(f"data shape {a.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(a)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(a))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "ScalarVolume":
        data = np.asarray(data)
        return cls(Grid(data.shape, spacing), data)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        a = _float_array(self.data)
        if a.shape != (3,) + self.grid.dims:
            raise ValueError(f"field shape {a.shape} does not match (3,) + {self.grid.dims}")
        if not np.all(np.isfinite(a)):
            raise ValueError("field contains non-finite components")
        object.__setattr__(self, "data", _frozen(a))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        data = np.asarray(data)
        return cls(Grid(data.shape[1:], spacing), data)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data.astype(np.float64) ** 2, axis=0))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.shape != self.grid.dims:
            raise ValueError(f"label shape {a.shape} does not match grid {self.grid.dims}")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(a == np.round(a)):
                raise ValueError("labels must be integers")
        if a.size and a.min() < 0:
            raise ValueError("labels must be non-negative")
        if a.size and a.max() > np.iinfo(np.uint16).max:
            raise ValueError("label ids must fit in 16 bits")
        object.__setattr__(self, "data", _frozen(a.astype(np.uint16)))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        data = np.asarray(data)
        return cls(Grid(data.shape, spacing), data)

    def label_ids(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]


@dataclass(frozen=True, eq=False)
class ImagePair:
    fixed: ScalarVolume
    moving: ScalarVolume
    fixed_labels: Optional[LabelVolume] = None
    moving_labels: Optional[LabelVolume] = None
    truth_field: Optional[DisplacementField] = None
    name: str = ""

    def __post_init__(self):
        grid = self.fixed.grid
        for member in (self.moving, self.fixed_labels, self.moving_labels, self.truth_field):
            if member is not None and member.grid.dims != grid.dims:
                raise ValueError("all members of an image pair must share one grid")

    @property
    def grid(self) -> Grid:
        return self.fixed.grid


def normalize(v: ScalarVolume) -> ScalarVolume:
    """Affinely rescale to [0, 1]; a constant volume maps to zeros."""
    a = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot normalize a non-finite volume")
    lo, hi = a.min(), a.max()
    if hi == lo:
        out = np.zeros_like(a)
    else:
        out = (a - lo) / (hi - lo)
    return ScalarVolume(v.grid, out.astype(v.data.dtype))


def linear_index(grid: Grid, i: int, j: int, k: int) -> int:
    nx, ny, nz = grid.dims
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise IndexError(f"({i}, {j}, {k}) outside grid {grid.dims}")
    return i + nx * (j + ny * k)


def coords_from_index(grid: Grid, idx: int) -> tuple[int, int, int]:
    nx, ny, nz = grid.dims
    if not 0 <= idx < grid.size:
        raise IndexError(f"linear index {idx} outside [0, {grid.size})")
    i = idx % nx
    j = (idx // nx) % ny
    k = idx // (nx * ny)
    return i, j, k
