"""Spatial-transformer warping with trilinear interpolation.

Sample coordinates outside the grid are clamped to the border (replicate
padding); in a clamped axis the coordinate derivative is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ofgreg.volume import DisplacementField, Grid, LabelVolume, ScalarVolume


@dataclass(frozen=True, eq=False)
class WarpCache:
    """Sample geometry recorded by the forward warp."""

    dims: tuple[int, int, int]
    coords: np.ndarray  # (3, X, Y, Z) clamped sample coordinates
    base: np.ndarray  # (3, X, Y, Z) lower corner index per axis
    frac: np.ndarray  # (3, X, Y, Z) fractional offset in [0, 1]
    inside: np.ndarray  # (3, X, Y, Z) False where the axis was clamped

    @property
    def weights(self) -> np.ndarray:
        """The 8 corner weights, shape (8, X, Y, Z), corner order (dx, dy, dz) binary."""
        tx, ty, tz = self.frac
        out = []
        for dx in (0, 1):
            wx = tx if dx else 1.0 - tx
            for dy in (0, 1):
                wy = ty if dy else 1.0 - ty
                for dz in (0, 1):
                    wz = tz if dz else 1.0 - tz
                    out.append(wx * wy * wz)
        return np.stack(out)


def identity_field(grid: Grid, dtype=np.float32) -> DisplacementField:
    return DisplacementField(grid, np.zeros((3,) + grid.dims, dtype=dtype))


@lru_cache(maxsize=16)
def voxel_grid(dims) -> np.ndarray:
    g = np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"))
    g.setflags(write=False)
    return g


def sample_geometry(u: np.ndarray) -> WarpCache:
    dims = tuple(u.shape[1:])
    p = voxel_grid(dims) + u
    hi = np.array(dims, dtype=np.float64).reshape(3, 1, 1, 1) - 1.0
    inside = (p >= 0.0) & (p <= hi)
    pc = np.clip(p, 0.0, hi)
    base = np.minimum(np.floor(pc), hi - 1.0)
    frac = pc - base
    return WarpCache(tuple(dims), pc, base.astype(np.intp), frac, inside)


def _corner_index(cache: WarpCache, dx: int, dy: int, dz: int) -> np.ndarray:
    nx, ny, nz = cache.dims
    bx, by, bz = cache.base
    return ((bx + dx) * ny + (by + dy)) * nz + (bz + dz)


def _corners(img: np.ndarray, cache: WarpCache) -> dict:
    flat = img.reshape(-1)
    return {
        (dx, dy, dz): np.take(flat, _corner_index(cache, dx, dy, dz))
        for dx in (0, 1)
        for dy in (0, 1)
        for dz in (0, 1)
    }


def trilinear_array(img: np.ndarray, u: np.ndarray):
    """Array-level warp; returns (warped, cache). Interpolation runs in float64."""
    cache = sample_geometry(u)
    return _sample(np.asarray(img, dtype=np.float64), cache), cache


def _coordinate_derivative(c: dict, cache: WarpCache) -> np.ndarray:
    tx, ty, tz = cache.frac
    sx, sy, sz = 1.0 - tx, 1.0 - ty, 1.0 - tz
    # interpolate along z first, reused by the x and y derivatives
    c00 = c[0, 0, 0] * sz + c[0, 0, 1] * tz
    c01 = c[0, 1, 0] * sz + c[0, 1, 1] * tz
    c10 = c[1, 0, 0] * sz + c[1, 0, 1] * tz
    c11 = c[1, 1, 0] * sz + c[1, 1, 1] * tz
    gx = (c10 - c00) * sy + (c11 - c01) * ty
    gy = (c01 - c00) * sx + (c11 - c10) * tx
    d00 = c[0, 0, 1] - c[0, 0, 0]
    d01 = c[0, 1, 1] - c[0, 1, 0]
    d10 = c[1, 0, 1] - c[1, 0, 0]
    d11 = c[1, 1, 1] - c[1, 1, 0]
    gz = (d00 * sy + d01 * ty) * sx + (d10 * sy + d11 * ty) * tx
    grad = np.stack([gx, gy, gz])
    grad[~cache.inside] = 0.0
    return grad


def trilinear_with_jacobian(img: np.ndarray, u: np.ndarray):
    """Warped image and d(warped)/du per voxel, shape (3, X, Y, Z)."""
    cache = sample_geometry(u)
    c = _corners(np.asarray(img, dtype=np.float64), cache)
    return _interpolate(c, cache), _coordinate_derivative(c, cache)


def trilinear_backward_array(img: np.ndarray, cache: WarpCache, upstream: np.ndarray) -> np.ndarray:
    """d(loss)/du given d(loss)/d(warped) = upstream; float64 result."""
    c = _corners(np.asarray(img, dtype=np.float64), cache)
    return _coordinate_derivative(c, cache) * np.asarray(upstream, dtype=np.float64)


def _check_same_grid(a, b):
    if a.grid.dims != b.grid.dims:
        raise ValueError(f"grid mismatch: {a.grid.dims} vs {b.grid.dims}")


def warp_trilinear(moving: ScalarVolume, field: DisplacementField):
    """Warp ``moving`` by ``field``; returns ``(warped, cache)``."""
    _check_same_grid(moving, field)
    out, cache = trilinear_array(moving.data, field.data)
    return ScalarVolume(moving.grid, out.astype(moving.data.dtype)), cache


def warp_backward(moving: ScalarVolume, cache: WarpCache, upstream: ScalarVolume) -> DisplacementField:
    if cache.dims != moving.grid.dims or upstream.grid.dims != moving.grid.dims:
        raise ValueError("warp cache does not match the moving volume grid")
    grad = trilinear_backward_array(moving.data, cache, upstream.data)
    return DisplacementField(moving.grid, grad)


def nearest_array(labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    dims = tuple(labels.shape)
    p = voxel_grid(dims) + u
    hi = np.array(dims).reshape(3, 1, 1, 1) - 1
    # round half toward -inf: floor(p + 0.5)
    idx = np.clip(np.floor(p + 0.5), 0, hi).astype(np.intp)
    return labels[idx[0], idx[1], idx[2]]


def warp_nearest(labels: LabelVolume, field: DisplacementField) -> LabelVolume:
    _check_same_grid(labels, field)
    return LabelVolume(labels.grid, nearest_array(labels.data, field.data))


def interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """1-D linear interpolation operator on corner-aligned normalized coordinates."""
    m = np.zeros((n_dst, n_src))
    if n_src == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1)) if n_dst > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_src - 2)
    t = pos - lo
    rows = np.arange(n_dst)
    m[rows, lo] += 1.0 - t
    m[rows, lo + 1] += t
    return m


def resample_array(a: np.ndarray, dst_dims) -> np.ndarray:
    """Separable trilinear resampling of the last three axes."""
    out = np.asarray(a, dtype=np.float64)
    lead = out.ndim - 3
    for ax, n_dst in enumerate(dst_dims):
        m = interp_matrix(out.shape[lead + ax], n_dst)
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [lead + ax])), 0, lead + ax)
    return out


def resample_volume(v: ScalarVolume, target: Grid) -> ScalarVolume:
    return ScalarVolume(target, resample_array(v.data, target.dims).astype(v.data.dtype))


def resample_field(field: DisplacementField, target: Grid) -> DisplacementField:
    """Resample a field onto ``target``, rescaling components to target voxel units."""
    if any(d < 4 for d in target.dims):
        raise ValueError(f"target grid too small: {target.dims}")
    src = field.grid.dims
    if tuple(src) == tuple(target.dims):
        return DisplacementField(target, field.data.copy())
    out = resample_array(field.data, target.dims)
    scale = np.array([(t - 1) / (s - 1) for s, t in zip(src, target.dims)]).reshape(3, 1, 1, 1)
    return DisplacementField(target, (out * scale).astype(field.data.dtype))


def invert_field_array(u: np.ndarray, iterations: int = 30) -> np.ndarray:
    """Approximate inverse displacement by fixed-point iteration v = -u(x + v)."""
    u = np.asarray(u, dtype=np.float64)
    v = -u.copy()
    for _ in range(iterations):
        cache = sample_geometry(v)
        v = -np.stack([_sample(u[c], cache) for c in range(3)])
    return v


def _sample(img: np.ndarray, cache: WarpCache) -> np.ndarray:
    return _interpolate(_corners(img, cache), cache)


def _interpolate(c: dict, cache: WarpCache) -> np.ndarray:
    tx, ty, tz = cache.frac
    sx, sy, sz = 1.0 - tx, 1.0 - ty, 1.0 - tz
    c00 = c[0, 0, 0] * sz + c[0, 0, 1] * tz
    c01 = c[0, 1, 0] * sz + c[0, 1, 1] * tz
    c10 = c[1, 0, 0] * sz + c[1, 0, 1] * tz
    c11 = c[1, 1, 0] * sz + c[1, 1, 1] * tz
    return (c00 * sy + c01 * ty) * sx + (c10 * sy + c11 * ty) * tx


def invert_field(field: DisplacementField, iterations: int = 30) -> DisplacementField:
    return DisplacementField(field.grid, invert_field_array(field.data, iterations).astype(field.data.dtype))
