"""Central finite-difference checks for every analytic gradient in the package.

Everything runs in float64. Components whose perturbation would cross a
trilinear cell boundary (where the warp is not differentiable) or touch a
clamped coordinate are excluded from sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ofgreg.energy import (
    EnergyConfig,
    energy_array,
    ncc_array,
    ncc_grad_array,
    smoothness_array,
    smoothness_grad_array,
)
from ofgreg.predictor import Architecture, backward_array, init_params, predict_array
from ofgreg.warp import sample_geometry, trilinear_array, trilinear_backward_array


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max rel err {self.max_rel_error:.3e}  (tol {self.tolerance:.0e}, n={self.samples})"


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, index, h: float) -> float:
    xp = x.copy()
    xm = x.copy()
    xp[index] += h
    xm[index] -= h
    return (fn(xp) - fn(xm)) / (2.0 * h)


def relative_errors(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    # floor keeps exact zeros from turning roundoff into a relative error of 1
    floor = 1e-6 * max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-300)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def smooth_components(u: np.ndarray, h: float, count: int, rng) -> list[tuple]:
    """Field components whose +-h perturbation stays inside one trilinear cell, unclamped."""
    cache = sample_geometry(u)
    hi = np.array(u.shape[1:]).reshape(3, 1, 1, 1) - 1
    ok = (cache.frac > 2 * h) & (cache.frac < 1 - 2 * h) & (cache.coords > 2 * h) & (cache.coords < hi - 2 * h)
    candidates = np.argwhere(ok)
    if len(candidates) == 0:
        raise RuntimeError("no differentiable components to sample")
    pick = rng.choice(len(candidates), size=min(count, len(candidates)), replace=False)
    return [tuple(int(v) for v in candidates[i]) for i in pick]


def _random_instance(rng, n=8, amplitude=1.5):
    from scipy import ndimage

    f = ndimage.gaussian_filter(rng.random((n, n, n)), 1.0)
    m = ndimage.gaussian_filter(rng.random((n, n, n)), 1.0)
    u = amplitude * rng.uniform(-1, 1, (3, n, n, n))
    return f, m, u


def check_warp_backward(rng, samples=200, h=1e-3) -> CheckResult:
    m = rng.random((6, 6, 6))
    u = rng.uniform(-1.5, 1.5, (3, 6, 6, 6))
    up = rng.standard_normal((6, 6, 6))
    _, cache = trilinear_array(m, u)
    g = trilinear_backward_array(m, cache, up)
    loss = lambda v: float(np.sum(up * trilinear_array(m, v)[0]))
    idx = smooth_components(u, h, samples, rng)
    num = [central_difference(loss, u, i, h) for i in idx]
    return CheckResult("warp_backward", float(relative_errors([g[i] for i in idx], num).max()), 1e-3, len(idx))


def check_ncc_grad(rng, samples=100, h=1e-5, window=5) -> CheckResult:
    f = rng.random((8, 8, 8))
    w = rng.random((8, 8, 8))
    g = ncc_grad_array(f, w, window, 1e-5)
    loss = lambda v: -ncc_array(f, v, window, 1e-5)[0]
    idx = [tuple(int(v) for v in rng.integers(0, 8, 3)) for _ in range(samples)]
    num = [central_difference(loss, w, i, h) for i in idx]
    return CheckResult("ncc_grad", float(relative_errors([g[i] for i in idx], num).max()), 1e-3, len(idx))


def check_mse_grad(rng, samples=100, h=1e-2) -> CheckResult:
    f = rng.random((8, 8, 8))
    w = rng.random((8, 8, 8))
    g = 2.0 * (w - f) / w.size
    loss = lambda v: float(np.mean((v - f) ** 2))
    idx = [tuple(int(v) for v in rng.integers(0, 8, 3)) for _ in range(samples)]
    num = [central_difference(loss, w, i, h) for i in idx]
    return CheckResult("mse_similarity_grad", float(relative_errors([g[i] for i in idx], num).max()), 1e-6, len(idx))


def check_smoothness_grad(rng, samples=100, h=1e-4) -> CheckResult:
    u = rng.standard_normal((3, 8, 8, 8))
    g = smoothness_grad_array(u)
    idx = [(int(rng.integers(0, 3)),) + tuple(int(v) for v in rng.integers(0, 8, 3)) for _ in range(samples)]
    num = [central_difference(smoothness_array, u, i, h) for i in idx]
    return CheckResult("smoothness_grad", float(relative_errors([g[i] for i in idx], num).max()), 1e-4, len(idx))


def check_field_mse_grad(rng, samples=100, h=1e-2) -> CheckResult:
    a = rng.standard_normal((3, 8, 8, 8))
    b = rng.standard_normal((3, 8, 8, 8))
    g = 2.0 * (a - b) / a.size
    loss = lambda v: float(np.mean((v - b) ** 2))
    idx = [(int(rng.integers(0, 3)),) + tuple(int(v) for v in rng.integers(0, 8, 3)) for _ in range(samples)]
    num = [central_difference(loss, a, i, h) for i in idx]
    return CheckResult("field_mse_grad", float(relative_errors([g[i] for i in idx], num).max()), 1e-6, len(idx))


def check_energy_grad(rng, similarity="ncc", samples=100, h=1e-4) -> CheckResult:
    f, m, u = _random_instance(rng)
    cfg = EnergyConfig(similarity=similarity, ncc_window=5, reg_weight=1.0)
    _, g = energy_array(f, m, u, cfg)
    loss = lambda v: energy_array(f, m, v, cfg, with_grad=False)[0]
    idx = smooth_components(u, h, samples, rng)
    num = [central_difference(loss, u, i, h) for i in idx]
    tol = 1e-3 if similarity == "ncc" else 1e-4
    return CheckResult(f"energy_grad[{similarity}]", float(relative_errors([g[i] for i in idx], num).max()), tol,
                       len(idx))


def _param_check(name, arch, dims, samples, tol, rng, h=1e-5) -> CheckResult:
    params = init_params(arch, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    # give the head real weight so every layer carries gradient signal
    params.tensors["head.w"] = rng.normal(0, 0.3, params.tensors["head.w"].shape)
    params.tensors["head.b"] = rng.normal(0, 0.3, params.tensors["head.b"].shape)
    f = rng.random(dims)
    m = rng.random(dims)
    target = rng.standard_normal((3,) + dims)

    def loss(p):
        u, _ = predict_array(p, f, m)
        return float(np.mean((u - target) ** 2))

    u, cache = predict_array(params, f, m)
    grads = backward_array(params, cache, 2.0 * (u - target) / u.size)
    flat = params.flat()
    gflat = grads.flat()
    idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)

    def loss_flat(v):
        return loss(type(params).from_flat(arch, v, np.float64))

    num = [central_difference(loss_flat, flat, int(i), h) for i in idx]
    return CheckResult(name, float(relative_errors(gflat[idx], num).max()), tol, len(idx))


def check_predictor_toy(rng, samples=50) -> CheckResult:
    return _param_check("predictor[single conv]", Architecture(levels=0, channels=(4,)), (8, 8, 8), samples, 1e-3, rng)


def check_predictor_full(rng, samples=100) -> CheckResult:
    return _param_check("predictor[default, 16^3]", Architecture(), (16, 16, 16), samples, 1e-2, rng)


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_warp_backward(rng),
        check_ncc_grad(rng),
        check_mse_grad(rng),
        check_smoothness_grad(rng),
        check_field_mse_grad(rng),
        check_energy_grad(rng, "ncc"),
        check_energy_grad(rng, "mse"),
        check_predictor_toy(rng),
        check_predictor_full(rng),
    ]
