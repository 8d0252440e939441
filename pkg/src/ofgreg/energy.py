"""Registration energies and their gradients.

All reductions run in float64. The optimizer energy is

    E(u) = D_sim(fixed, moving o u) + reg_weight * smoothness(u) / (9 N)

where D_sim is ``1 - mean local NCC`` or the voxel-mean squared error, and
``smoothness`` is the summed squared forward difference of ``u``. Dividing by
9N (3 components x 3 axes x N voxels) turns the sum into a mean, so both
terms are per-voxel quantities and ``reg_weight`` does not scale with grid size.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import ndimage

from ofgreg.volume import DisplacementField, ScalarVolume
from ofgreg.warp import trilinear_array, trilinear_with_jacobian


class Similarity(str, Enum):
    NCC = "ncc"
    MSE = "mse"


@dataclass(frozen=True)
class EnergyConfig:
    similarity: Similarity = Similarity.NCC
    ncc_window: int = 5
    reg_weight: float = 1.0
    ncc_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "similarity", Similarity(self.similarity))
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if self.ncc_epsilon <= 0:
            raise ValueError("ncc_epsilon must be positive")


def box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the centred (2r+1)^3 window of the last three axes; windows clipped at the border."""
    out = np.asarray(a, dtype=np.float64)
    size = 2 * radius + 1
    for ax in range(out.ndim - 3, out.ndim):
        # zero padding == clipping the window to the grid
        out = ndimage.uniform_filter1d(out, size, axis=ax, mode="constant")
    return out * float(size**3)


@lru_cache(maxsize=8)
def _window_counts(shape, radius) -> np.ndarray:
    counts = np.ones(())
    for n in shape:
        i = np.arange(n)
        c = (np.minimum(i + radius, n - 1) - np.maximum(i - radius, 0) + 1).astype(np.float64)
        counts = np.multiply.outer(counts, c)
    counts.setflags(write=False)
    return counts


def _window_check(shape, window):
    if window > min(shape):
        raise ValueError(f"NCC window {window} larger than grid {shape}")


def _ncc_terms(f, w, window, eps):
    r = window // 2
    n = _window_counts(f.shape, r)
    sf, sw, sff, sww, sfw = box_sum(np.stack([f, w, f * f, w * w, f * w]), r)
    cross = sfw - sf * sw / n
    var_f = sff - sf * sf / n
    var_w = sww - sw * sw / n
    denom = var_f * var_w + eps
    return n, sf, sw, cross, var_f, var_w, denom


def ncc_array(f: np.ndarray, w: np.ndarray, window: int, eps: float):
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _window_check(f.shape, window)
    _, _, _, cross, _, _, denom = _ncc_terms(f, w, window, eps)
    cc = cross * cross / denom
    return float(cc.mean()), cc


def ncc_value_and_grad(f: np.ndarray, w: np.ndarray, window: int, eps: float):
    """Mean local NCC and the gradient of ``-mean`` with respect to the warped image."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _window_check(f.shape, window)
    r = window // 2
    n, sf, sw, cross, var_f, var_w, denom = _ncc_terms(f, w, window, eps)
    cc = cross * cross / denom
    # d cc_p / d w_q = alpha_p (f_q - fbar_p) - beta_p (w_q - wbar_p), for q in window(p);
    # summing over all windows containing q turns into box sums
    alpha = 2.0 * cross / denom
    beta = 2.0 * cross * cross * var_f / (denom * denom)
    s_a, s_af, s_b, s_bw = box_sum(np.stack([alpha, alpha * sf / n, beta, beta * sw / n]), r)
    g = f * s_a - s_af - w * s_b + s_bw
    return float(cc.mean()), -g / f.size


def ncc_grad_array(f: np.ndarray, w: np.ndarray, window: int, eps: float) -> np.ndarray:
    return ncc_value_and_grad(f, w, window, eps)[1]


def _same_grid(a, b):
    if a.grid.dims != b.grid.dims:
        raise ValueError(f"grid mismatch: {a.grid.dims} vs {b.grid.dims}")


def local_ncc(fixed: ScalarVolume, warped: ScalarVolume, cfg: EnergyConfig = EnergyConfig()):
    """Windowed squared NCC; returns ``(mean, per-voxel map)``."""
    _same_grid(fixed, warped)
    mean, cc = ncc_array(fixed.data, warped.data, cfg.ncc_window, cfg.ncc_epsilon)
    return mean, ScalarVolume(fixed.grid, cc)


def ncc_grad(fixed: ScalarVolume, warped: ScalarVolume, cfg: EnergyConfig = EnergyConfig()) -> ScalarVolume:
    _same_grid(fixed, warped)
    g = ncc_grad_array(fixed.data, warped.data, cfg.ncc_window, cfg.ncc_epsilon)
    return ScalarVolume(fixed.grid, g)


def mse_similarity(fixed: ScalarVolume, warped: ScalarVolume) -> float:
    _same_grid(fixed, warped)
    d = warped.data.astype(np.float64) - fixed.data.astype(np.float64)
    return float(np.mean(d * d))


def mse_similarity_grad(fixed: ScalarVolume, warped: ScalarVolume) -> ScalarVolume:
    _same_grid(fixed, warped)
    d = warped.data.astype(np.float64) - fixed.data.astype(np.float64)
    return ScalarVolume(fixed.grid, 2.0 * d / d.size)


def smoothness_array(u: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    total = 0.0
    for ax in (1, 2, 3):
        d = np.diff(u, axis=ax)
        total += float(np.sum(d * d))
    return total


def smoothness_grad_array(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    g = np.zeros_like(u)
    for ax in (1, 2, 3):
        d = np.diff(u, axis=ax)
        n = u.shape[ax]
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[ax] = slice(1, n)
        lo[ax] = slice(0, n - 1)
        g[tuple(hi)] += 2.0 * d
        g[tuple(lo)] -= 2.0 * d
    return g


def smoothness(field: DisplacementField) -> float:
    """Sum over voxels, components and axes of squared forward differences."""
    return smoothness_array(field.data)


def smoothness_grad(field: DisplacementField) -> DisplacementField:
    return DisplacementField(field.grid, smoothness_grad_array(field.data))


def similarity_array(f, w, cfg: EnergyConfig):
    """Similarity loss and its gradient with respect to the warped image."""
    if cfg.similarity is Similarity.NCC:
        mean, g = ncc_value_and_grad(f, w, cfg.ncc_window, cfg.ncc_epsilon)
        return 1.0 - mean, g
    d = np.asarray(w, dtype=np.float64) - np.asarray(f, dtype=np.float64)
    return float(np.mean(d * d)), 2.0 * d / d.size


def energy_array(f, m, u, cfg: EnergyConfig, with_grad: bool = True):
    """Energy (and its field gradient) on raw arrays; the optimizer's hot path."""
    reg = cfg.reg_weight / (9 * u[0].size)
    if not with_grad:
        w, _ = trilinear_array(m, u)
        if cfg.similarity is Similarity.NCC:
            sim = 1.0 - ncc_array(f, w, cfg.ncc_window, cfg.ncc_epsilon)[0]
        else:
            d = w - np.asarray(f, dtype=np.float64)
            sim = float(np.mean(d * d))
        return sim + reg * smoothness_array(u), None
    w, dw_du = trilinear_with_jacobian(m, u)
    sim, g_w = similarity_array(f, w, cfg)
    grad = dw_du * g_w
    if cfg.reg_weight:
        grad += reg * smoothness_grad_array(u)
    return sim + reg * smoothness_array(u), grad


def energy(fixed: ScalarVolume, moving: ScalarVolume, field: DisplacementField,
           cfg: EnergyConfig = EnergyConfig()) -> float:
    _same_grid(fixed, moving)
    _same_grid(fixed, field)
    return energy_array(fixed.data, moving.data, field.data, cfg, with_grad=False)[0]


def energy_grad(fixed: ScalarVolume, moving: ScalarVolume, field: DisplacementField,
                cfg: EnergyConfig = EnergyConfig()) -> DisplacementField:
    _same_grid(fixed, moving)
    _same_grid(fixed, field)
    _, g = energy_array(fixed.data, moving.data, field.data, cfg)
    return DisplacementField(field.grid, g)


def field_mse(a: DisplacementField, b: DisplacementField) -> float:
    """Mean squared difference over all scalar components (the supervision loss)."""
    _same_grid(a, b)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(d * d))


def field_mse_grad(a: DisplacementField, b: DisplacementField) -> DisplacementField:
    _same_grid(a, b)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    return DisplacementField(a.grid, 2.0 * d / d.size)
