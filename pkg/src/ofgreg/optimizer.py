"""Instance optimization of a displacement field by gradient descent on the energy."""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from ofgreg.energy import EnergyConfig, energy_array
from ofgreg.volume import DisplacementField, Grid, ImagePair, ScalarVolume
from ofgreg.warp import resample_array, resample_field


class Method(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass(frozen=True)
class OptimConfig:
    method: Method = Method.ADAM
    lr: float = 0.1
    steps: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    energy: EnergyConfig = dc_field(default_factory=EnergyConfig)
    downsample: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "OptimState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


@dataclass
class RefineTrace:
    energies: list[float]
    seconds: float = 0.0
    flagged: bool = False

    @property
    def drop(self) -> float:
        return self.energies[0] - self.energies[-1]


class DivergenceError(RuntimeError):
    """Raised when the energy becomes non-finite during refinement."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def adam_update(u: np.ndarray, g: np.ndarray, state: OptimState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step on arrays; returns the new array and a new state."""
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient passed to Adam")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    out = u - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, OptimState(m, v, t)


def adam_step(u: DisplacementField, grad: DisplacementField, state: OptimState, cfg: OptimConfig = OptimConfig()):
    if grad.data.shape != u.data.shape or state.m.shape != u.data.shape:
        raise ValueError("field, gradient and Adam state shapes differ")
    out, new_state = adam_update(
        u.data.astype(np.float64), grad.data.astype(np.float64), state,
        cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
    )
    return DisplacementField(u.grid, out.astype(u.data.dtype)), new_state


def refine_array(f: np.ndarray, m: np.ndarray, u0: np.ndarray, cfg: OptimConfig):
    """Run ``cfg.steps`` updates from ``u0``; returns (field, trace). Inputs are not modified."""
    start = time.perf_counter()
    u = np.array(u0, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("initial field has non-finite components")
    state = OptimState.zeros(u.shape)
    energies = []
    for _ in range(cfg.steps):
        e, g = energy_array(f, m, u, cfg.energy)
        energies.append(e)
        if not np.isfinite(e) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"energy diverged at step {len(energies) - 1}", RefineTrace(energies))
        if cfg.method is Method.ADAM:
            u, state = adam_update(u, g, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        else:
            u = u - cfg.lr * g
    e_final = energy_array(f, m, u, cfg.energy, with_grad=False)[0]
    energies.append(e_final)
    if not np.isfinite(e_final):
        raise DivergenceError("energy diverged after the last step", RefineTrace(energies))
    trace = RefineTrace(energies, time.perf_counter() - start, flagged=energies[-1] > energies[0])
    return u, trace


def half_dims(dims) -> tuple[int, int, int]:
    return tuple((d + 1) // 2 for d in dims)


def refine_downsampled_array(f, m, u0, cfg: OptimConfig):
    dims = u0.shape[1:]
    if any(d < 8 for d in dims):
        raise ValueError(f"downsampled refinement needs every dim >= 8, got {dims}")
    small = half_dims(dims)
    down = np.array([(s - 1) / (d - 1) for d, s in zip(dims, small)]).reshape(3, 1, 1, 1)
    f_s = resample_array(f, small)
    m_s = resample_array(m, small)
    u_s, trace = refine_array(f_s, m_s, resample_array(u0, small) * down, cfg)
    u = resample_array(u_s, dims) / down
    return u, trace


def _unpack(fixed, moving, field_init):
    if not (fixed.grid.dims == moving.grid.dims == field_init.grid.dims):
        raise ValueError("fixed, moving and initial field must share one grid")
    return fixed.data, moving.data, field_init.data


def refine(fixed: ScalarVolume, moving: ScalarVolume, field_init: DisplacementField,
           cfg: OptimConfig = OptimConfig()):
    """Refine ``field_init`` by ``cfg.steps`` descent steps on the energy.

    A fresh optimizer state is used on every call, and the returned field is
    a plain value: it is meant to be used as a detached training target.
    Honors ``cfg.downsample``.
    """
    f, m, u0 = _unpack(fixed, moving, field_init)
    if cfg.downsample:
        u, trace = refine_downsampled_array(f, m, u0, cfg)
    else:
        u, trace = refine_array(f, m, u0, cfg)
    return DisplacementField(field_init.grid, u.astype(field_init.data.dtype)), trace


def refine_downsampled(fixed: ScalarVolume, moving: ScalarVolume, field_init: DisplacementField,
                       cfg: OptimConfig = OptimConfig()):
    """Refine at half resolution (1/8 of the parameters), then upsample the result."""
    f, m, u0 = _unpack(fixed, moving, field_init)
    u, trace = refine_downsampled_array(f, m, u0, cfg)
    return DisplacementField(field_init.grid, u.astype(field_init.data.dtype)), trace


def refine_pair(pair: ImagePair, field_init: DisplacementField, cfg: OptimConfig = OptimConfig()):
    return refine(pair.fixed, pair.moving, field_init, cfg)
