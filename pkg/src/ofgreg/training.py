"""Training regimes: on-the-fly guidance and the baselines it is compared with.

Every regime is batch-size-1 Adam on the predictor parameters; they differ only
in which field gradient is pushed back through the network:

* ``ofg``            MSE to a pseudo-label refined from the current prediction
* ``unsup``          the optimizer energy evaluated at the prediction
* ``selftrain``      MSE to labels regenerated only at stage boundaries
* ``blend-*``        mixtures of the first two (by epoch, by loss weight, or at random)
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field as dc_field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ofgreg.energy import energy_array
from ofgreg.metrics import evaluate_array
from ofgreg.optimizer import DivergenceError, OptimConfig, refine_array, refine_downsampled_array
from ofgreg.predictor import (
    AdamState,
    Architecture,
    PredictorParams,
    adam_update_params,
    backward_array,
    init_params,
    predict_array,
    save_params,
)
from ofgreg.volume import ImagePair

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "mode", "loss", "dice", "ncc", "jac_pct", "refine_drop", "wall_ms")


class Mode(str, Enum):
    OFG = "ofg"
    UNSUPERVISED = "unsup"
    SELFTRAIN = "selftrain"
    OPTIMIZED_SELFTRAIN = "selftrain-opt"
    BLEND_FREQUENCY = "blend-freq"
    BLEND_LOSS = "blend-loss"
    BLEND_PROBABILISTIC = "blend-prob"


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.OFG
    epochs: int = 40
    lr: float = 1e-4
    weight_decay: float = 0.02
    optim: OptimConfig = dc_field(default_factory=OptimConfig)
    arch: Architecture = dc_field(default_factory=Architecture)
    every_n_epochs: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    prob: float = 0.5
    stage_len: int = 10
    label_opt_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("prob must lie in [0, 1]")
        if self.every_n_epochs < 1 or self.stage_len < 1:
            raise ValueError("every_n_epochs and stage_len must be >= 1")
        if self.label_opt_steps < 0:
            raise ValueError("label_opt_steps must be >= 0")


@dataclass
class Dataset:
    train: list[ImagePair]
    val: list[ImagePair]

    @classmethod
    def split(cls, pairs: Sequence[ImagePair], n_val: int) -> "Dataset":
        pairs = list(pairs)
        if n_val < 1 or n_val >= len(pairs):
            raise ValueError(f"cannot hold out {n_val} of {len(pairs)} pairs for validation")
        return cls(pairs[:-n_val], pairs[-n_val:])


@dataclass
class TrainState:
    params: PredictorParams
    adam: AdamState

    @classmethod
    def fresh(cls, params: PredictorParams) -> "TrainState":
        return cls(params, AdamState.for_params(params))


@dataclass
class StepStats:
    loss: float
    refined: bool = False
    refine_drop: float = 0.0
    flagged: bool = False
    refine_seconds: float = 0.0


@dataclass
class EpochLog:
    epoch: int
    mode: str
    loss: float
    dice: float
    ncc: float
    jac_pct: float
    refine_drop: float
    wall_ms: float

    def as_row(self) -> list[str]:
        return [str(self.epoch), self.mode, repr(self.loss), repr(self.dice), repr(self.ncc),
                repr(self.jac_pct), repr(self.refine_drop), f"{self.wall_ms:.3f}"]


@dataclass
class TrainResult:
    params: PredictorParams
    best_params: PredictorParams
    best_epoch: int
    logs: list[EpochLog]
    refine_calls: int = 0
    flagged: int = 0

    @property
    def flag_rate(self) -> float:
        return self.flagged / self.refine_calls if self.refine_calls else 0.0

    @property
    def final(self) -> EpochLog:
        return self.logs[-1]


# ---------------------------------------------------------------- single steps

def _refine(pair: ImagePair, u0: np.ndarray, ocfg: OptimConfig):
    run = refine_downsampled_array if ocfg.downsample else refine_array
    try:
        return run(pair.fixed.data, pair.moving.data, u0, ocfg)
    except DivergenceError as err:
        raise DivergenceError(f"refinement diverged on pair {pair.name!r}: {err}", err.trace) from None


def _apply(state: TrainState, cache, gu: np.ndarray, cfg: TrainConfig) -> TrainState:
    grads = backward_array(state.params, cache, gu)
    params, adam = adam_update_params(state.params, grads, state.adam, cfg.lr, cfg.weight_decay)
    return TrainState(params, adam)


def ofg_field_loss(u_pre: np.ndarray, u_opt: np.ndarray):
    """Supervision loss ``mean((u_pre - u_opt)^2)`` and its gradient; u_opt is a constant."""
    d = np.asarray(u_pre, dtype=np.float64) - u_opt
    return float(np.mean(d * d)), 2.0 * d / d.size


def ofg_step(state: TrainState, pair: ImagePair, cfg: TrainConfig):
    """Predict, refine the prediction into a pseudo-label, regress onto it."""
    u_pre, cache = predict_array(state.params, pair.fixed.data, pair.moving.data)
    u_opt, trace = _refine(pair, u_pre, cfg.optim)
    loss, gu = ofg_field_loss(u_pre, u_opt)
    stats = StepStats(loss, True, trace.drop, trace.flagged, trace.seconds)
    return _apply(state, cache, gu, cfg), stats


def unsup_step(state: TrainState, pair: ImagePair, cfg: TrainConfig):
    """Train directly on the optimizer energy at the prediction."""
    u_pre, cache = predict_array(state.params, pair.fixed.data, pair.moving.data)
    loss, gu = energy_array(pair.fixed.data, pair.moving.data, u_pre, cfg.optim.energy)
    return _apply(state, cache, gu, cfg), StepStats(loss)


def blend_loss_step(state: TrainState, pair: ImagePair, cfg: TrainConfig):
    u_pre, cache = predict_array(state.params, pair.fixed.data, pair.moving.data)
    loss, gu = 0.0, np.zeros(u_pre.shape)
    stats = StepStats(0.0)
    if cfg.alpha:
        u_opt, trace = _refine(pair, u_pre, cfg.optim)
        l_ofg, g_ofg = ofg_field_loss(u_pre, u_opt)
        loss, gu = cfg.alpha * l_ofg, cfg.alpha * g_ofg
        stats = StepStats(0.0, True, trace.drop, trace.flagged, trace.seconds)
    if cfg.beta:
        l_uns, g_uns = energy_array(pair.fixed.data, pair.moving.data, u_pre, cfg.optim.energy)
        loss, gu = loss + cfg.beta * l_uns, gu + cfg.beta * g_uns
    stats.loss = loss
    return _apply(state, cache, gu, cfg), stats


def supervised_step(state: TrainState, pair: ImagePair, label: np.ndarray, cfg: TrainConfig):
    """Regress onto a fixed, previously generated label field (self-training)."""
    u_pre, cache = predict_array(state.params, pair.fixed.data, pair.moving.data)
    loss, gu = ofg_field_loss(u_pre, label)
    return _apply(state, cache, gu, cfg), StepStats(loss)


def make_labels(params: PredictorParams, pairs: Sequence[ImagePair], refine_steps: int, ocfg: OptimConfig):
    """Pseudo-labels from the current model, optionally refined; held fixed by the caller."""
    labels = []
    for pair in pairs:
        u, _ = predict_array(params, pair.fixed.data, pair.moving.data)
        u = u.astype(np.float64)
        if refine_steps > 0:
            u, _ = _refine(pair, u, replace(ocfg, steps=refine_steps))
        labels.append(u)
    return labels


# ---------------------------------------------------------------- evaluation / logging

def validate(params: PredictorParams, pairs: Sequence[ImagePair], ocfg: OptimConfig):
    """Mean Dice, NCC and folding percentage of the model's predictions."""
    reports = []
    for pair in pairs:
        u, _ = predict_array(params, pair.fixed.data, pair.moving.data)
        reports.append(evaluate_array(pair, u, ocfg.energy, with_epe=False))
    return (
        float(np.mean([r.mean_dice for r in reports])),
        float(np.mean([r.mean_ncc for r in reports])),
        float(np.mean([r.pct_nondiffeo for r in reports])),
    )


def write_log_csv(path, logs: Sequence[EpochLog]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in logs:
            w.writerow(row.as_row())


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- main loop

def _streams(seed: int):
    shuffle_ss, coin_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(coin_ss)


def train(dataset: Dataset, cfg: TrainConfig, params: Optional[PredictorParams] = None,
          out_dir=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs in ``cfg.mode``; validate every epoch.

    With ``out_dir`` set, writes ``metrics.csv``, ``ckpt_last.ofgp`` and
    ``ckpt_best.ofgp`` (best validation Dice).
    """
    if not dataset.train or not dataset.val:
        raise ValueError("training needs non-empty train and validation sets")
    mode = cfg.mode
    state = TrainState.fresh(params.copy() if params is not None else init_params(cfg.arch, cfg.seed))
    shuffle_rng, coin_rng = _streams(cfg.seed)
    logs: list[EpochLog] = []
    best, best_epoch, best_dice = state.params, -1, -np.inf
    calls = flagged = 0
    labels = None
    label_steps = cfg.label_opt_steps
    if mode is Mode.OPTIMIZED_SELFTRAIN and label_steps == 0:
        label_steps = cfg.optim.steps

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(dataset.train))
        if mode in (Mode.SELFTRAIN, Mode.OPTIMIZED_SELFTRAIN) and epoch > 0 and epoch % cfg.stage_len == 0:
            labels = make_labels(state.params, dataset.train, label_steps, cfg.optim)
        losses, drops = [], []
        for idx in order:
            pair = dataset.train[idx]
            try:
                if mode is Mode.OFG:
                    state, st = ofg_step(state, pair, cfg)
                elif mode is Mode.UNSUPERVISED:
                    state, st = unsup_step(state, pair, cfg)
                elif mode is Mode.BLEND_FREQUENCY:
                    step = ofg_step if epoch % cfg.every_n_epochs == 0 else unsup_step
                    state, st = step(state, pair, cfg)
                elif mode is Mode.BLEND_LOSS:
                    state, st = blend_loss_step(state, pair, cfg)
                elif mode is Mode.BLEND_PROBABILISTIC:
                    step = ofg_step if coin_rng.random() < cfg.prob else unsup_step
                    state, st = step(state, pair, cfg)
                elif labels is None:
                    # first self-training stage is unsupervised
                    state, st = unsup_step(state, pair, cfg)
                else:
                    state, st = supervised_step(state, pair, labels[idx], cfg)
            except DivergenceError as err:
                raise DivergenceError(f"epoch {epoch}: {err}", err.trace) from None
            losses.append(st.loss)
            if st.refined:
                calls += 1
                flagged += int(st.flagged)
                drops.append(st.refine_drop)
        dice_v, ncc_v, jac_v = validate(state.params, dataset.val, cfg.optim)
        entry = EpochLog(epoch, mode.value, float(np.mean(losses)), dice_v, ncc_v, jac_v,
                         float(np.mean(drops)) if drops else 0.0,
                         1000.0 * (time.perf_counter() - start))
        logs.append(entry)
        log.info("epoch %d %s loss=%.5g dice=%.4f jac=%.3f%%", epoch, mode.value, entry.loss, dice_v, jac_v)
        if dice_v > best_dice:
            best, best_epoch, best_dice = state.params.copy(), epoch, dice_v

    result = TrainResult(state.params, best, best_epoch, logs, calls, flagged)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log_csv(out / "metrics.csv", logs)
        save_params(out / "ckpt_last.ofgp", result.params)
        save_params(out / "ckpt_best.ofgp", result.best_params)
    return result


def selftrain_run(dataset: Dataset, cfg: TrainConfig, params: Optional[PredictorParams] = None,
                  out_dir=None) -> TrainResult:
    """Stage-wise self-training; ``cfg.mode`` picks plain or optimized labels."""
    if cfg.mode not in (Mode.SELFTRAIN, Mode.OPTIMIZED_SELFTRAIN):
        cfg = replace(cfg, mode=Mode.SELFTRAIN)
    return train(dataset, cfg, params, out_dir)
