"""Registration quality: label overlap and folding of the deformation."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterable, Optional

import numpy as np

from ofgreg.energy import EnergyConfig, ncc_array
from ofgreg.volume import DisplacementField, ImagePair, LabelVolume, ScalarVolume
from ofgreg.warp import invert_field_array, nearest_array, trilinear_array

REPORT_COLUMNS = ("dice", "ncc", "jac_pct", "max_disp", "mean_disp", "epe")


@dataclass
class MetricsReport:
    per_label: dict[int, float]
    mean_dice: float
    pct_nondiffeo: float
    mean_ncc: float
    max_disp: float
    mean_disp: float
    epe: Optional[float] = None

    def row(self) -> dict:
        return {
            "dice": self.mean_dice,
            "ncc": self.mean_ncc,
            "jac_pct": self.pct_nondiffeo,
            "max_disp": self.max_disp,
            "mean_disp": self.mean_disp,
            "epe": "" if self.epe is None else self.epe,
        }

    def csv_row(self) -> str:
        return ",".join(f"{v:.8g}" if isinstance(v, float) else str(v) for v in self.row().values())


def dice_array(a: np.ndarray, b: np.ndarray, labels: Iterable[int]):
    labels = [int(l) for l in labels if int(l) != 0]
    if not labels:
        raise ValueError("dice needs at least one non-background label")
    per = {}
    for lab in labels:
        in_a = a == lab
        in_b = b == lab
        total = int(in_a.sum()) + int(in_b.sum())
        if total == 0:
            continue
        per[lab] = 2.0 * int(np.logical_and(in_a, in_b).sum()) / total
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return per, mean


def dice(a: LabelVolume, b: LabelVolume, labels: Optional[Iterable[int]] = None):
    """Per-label Dice and their mean; labels absent from both volumes are skipped."""
    if a.grid.dims != b.grid.dims:
        raise ValueError("label volumes live on different grids")
    if labels is None:
        labels = sorted(set(a.label_ids()) | set(b.label_ids()))
    return dice_array(a.data, b.data, labels)


def jacobian_det_array(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    # np.gradient: central differences inside, one-sided at the border
    jac = np.empty((3, 3) + u.shape[1:])
    for i in range(3):
        grads = np.gradient(u[i], axis=(0, 1, 2))
        for j in range(3):
            jac[i, j] = grads[j]
        jac[i, i] += 1.0
    return (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )


def jacobian_det(field: DisplacementField) -> ScalarVolume:
    """Determinant of I + du/dx at every voxel."""
    if any(d < 3 for d in field.grid.dims):
        raise ValueError("jacobian needs at least 3 voxels per axis")
    return ScalarVolume(field.grid, jacobian_det_array(field.data))


def pct_nondiffeo_array(u: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    det = jacobian_det_array(u)
    if mask is None:
        mask = np.ones(det.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty mask for non-diffeomorphic count")
    return 100.0 * int(np.count_nonzero(det[mask] <= 0.0)) / count


def foreground_mask(fixed: ScalarVolume, threshold: float = 0.01) -> np.ndarray:
    return np.asarray(fixed.data) > threshold


def pct_nondiffeo(field: DisplacementField, mask=None, fixed: Optional[ScalarVolume] = None,
                  threshold: float = 0.01) -> float:
    """Percent of masked voxels with det(J) <= 0.

    ``mask`` may be a boolean array or a LabelVolume (non-zero = inside). If
    omitted, the mask is ``fixed > threshold`` when ``fixed`` is given, else
    the whole grid.
    """
    if isinstance(mask, LabelVolume):
        if mask.grid.dims != field.grid.dims:
            raise ValueError("mask grid does not match field grid")
        mask = mask.data != 0
    elif mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != field.grid.dims:
            raise ValueError("mask shape does not match field grid")
    elif fixed is not None:
        mask = foreground_mask(fixed, threshold)
    return pct_nondiffeo_array(field.data, mask)


def evaluate_array(pair: ImagePair, u: np.ndarray, ncc_cfg: EnergyConfig = EnergyConfig(),
                   threshold: float = 0.01, with_epe: bool = True) -> MetricsReport:
    per, mean = {}, float("nan")
    if pair.fixed_labels is not None and pair.moving_labels is not None:
        warped_labels = nearest_array(pair.moving_labels.data, u)
        labels = sorted(set(pair.fixed_labels.label_ids()) | set(pair.moving_labels.label_ids()))
        per, mean = dice_array(pair.fixed_labels.data, warped_labels, labels)
    warped, _ = trilinear_array(pair.moving.data, u)
    ncc, _ = ncc_array(pair.fixed.data, warped, ncc_cfg.ncc_window, ncc_cfg.ncc_epsilon)
    jac = pct_nondiffeo_array(u, np.asarray(pair.fixed.data) > threshold)
    mag = np.sqrt(np.sum(np.asarray(u, dtype=np.float64) ** 2, axis=0))
    epe = None
    if with_epe and pair.truth_field is not None:
        # moving = fixed o truth, so the registration target is the inverse of truth
        d = np.asarray(u, dtype=np.float64) - invert_field_array(pair.truth_field.data)
        epe = float(np.sqrt(np.sum(d * d, axis=0)).mean())
    return MetricsReport(per, mean, jac, ncc, float(mag.max()), float(mag.mean()), epe)


def evaluate(pair: ImagePair, field: DisplacementField, ncc_cfg: EnergyConfig = EnergyConfig(),
             threshold: float = 0.01) -> MetricsReport:
    """Dice of warped moving labels vs fixed labels, folding %, NCC and field stats."""
    if field.grid.dims != pair.grid.dims:
        raise ValueError("field grid does not match the image pair")
    return evaluate_array(pair, field.data, ncc_cfg, threshold)
