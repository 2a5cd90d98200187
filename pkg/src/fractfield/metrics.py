"""Registration evaluation: Dice, HD95, folding fraction and Jacobian spread."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .volume import LabelMap
from .warp import DisplacementField, jacobian_determinant

__all__ = [
    "MetricReport",
    "dsc",
    "overall_and_avg_dsc",
    "boundary_points",
    "hd95",
    "hausdorff",
    "folding_fraction",
    "jacobian_std",
    "evaluate",
]

OVERALL_DSC_DEFINITION = "dice of the union of all foreground labels"
AVG_DSC_DEFINITION = "unweighted mean of per-label dice over foreground labels"


@dataclass
class MetricReport:
    per_label_dsc: dict[int, float]
    overall_dsc: float
    avg_dsc: float
    hd95_mm: dict[int, float]
    folding_pct: float
    jacobian_std: float
    notes: dict[str, str] = field(default_factory=lambda: {
        "overall_dsc": OVERALL_DSC_DEFINITION,
        "avg_dsc": AVG_DSC_DEFINITION,
    })


def _masks(X, Y, label):
    if X.dims != Y.dims:
        raise ValueError(f"dims mismatch: {X.dims} vs {Y.dims}")
    return X.labels == label, Y.labels == label


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def dsc(X: LabelMap, Y: LabelMap, label: int) -> float:
    """Dice coefficient of one label; 1.0 when both masks are empty."""
    a, b = _masks(X, Y, label)
    return _dice(a, b)


def _foreground(X: LabelMap, Y: LabelMap) -> list[int]:
    return sorted((X.label_set | Y.label_set) - {0})


def overall_and_avg_dsc(X: LabelMap, Y: LabelMap) -> tuple[float, float]:
    labels = _foreground(X, Y)
    if not labels:
        raise ValueError("no foreground labels: average dice is undefined")
    if X.dims != Y.dims:
        raise ValueError(f"dims mismatch: {X.dims} vs {Y.dims}")
    overall = _dice(X.labels > 0, Y.labels > 0)
    avg = float(np.mean([dsc(X, Y, lb) for lb in labels]))
    return overall, avg


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Indices of mask voxels with a 6-connected non-mask neighbour (grid edges count)."""
    inner = binary_erosion(mask, structure=generate_binary_structure(3, 1), border_value=0)
    return np.argwhere(mask & ~inner)


def _directed(X: LabelMap, Y: LabelMap, label: int, spacing):
    a, b = _masks(X, Y, label)
    if not a.any() or not b.any():
        raise ValueError(f"undefined distance: label {label} is empty in one of the maps")
    sp = np.asarray(spacing if spacing is not None else X.spacing, dtype=np.float64)
    pa = boundary_points(a) * sp
    pb = boundary_points(b) * sp
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return d_ab, d_ba


def hd95(X: LabelMap, Y: LabelMap, label: int, spacing=None) -> float:
    """95th percentile (linear interpolation) of both directed boundary distance sets, in mm."""
    d_ab, d_ba = _directed(X, Y, label, spacing)
    # sorting makes the result independent of argument order
    return float(np.percentile(np.sort(np.concatenate([d_ab, d_ba])), 95))


def hausdorff(X: LabelMap, Y: LabelMap, label: int, spacing=None) -> float:
    d_ab, d_ba = _directed(X, Y, label, spacing)
    return float(max(d_ab.max(), d_ba.max()))


def folding_fraction(f: DisplacementField) -> float:
    """Percentage of voxels with ``det(I + grad u) <= 0``."""
    det = jacobian_determinant(f).data
    return 100.0 * np.count_nonzero(det <= 0) / det.size


def jacobian_std(f: DisplacementField, include_boundary: bool = False) -> float:
    """Population standard deviation of the Jacobian determinant.

    By default the one-voxel boundary ring (where one-sided differences are
    used) is excluded; ``include_boundary=True`` uses the whole grid.
    """
    det = jacobian_determinant(f).data
    if not include_boundary:
        if any(n < 3 for n in det.shape):
            raise ValueError(f"no interior voxels for dims {det.shape}")
        det = det[1:-1, 1:-1, 1:-1]
    return float(np.std(det))


def evaluate(fixed: LabelMap, warped: LabelMap, f: DisplacementField | None = None,
             spacing=None) -> MetricReport:
    labels = _foreground(fixed, warped)
    per = {lb: dsc(fixed, warped, lb) for lb in labels}
    overall, avg = overall_and_avg_dsc(fixed, warped)
    hd = {}
    for lb in labels:
        try:
            hd[lb] = hd95(fixed, warped, lb, spacing)
        except ValueError:
            hd[lb] = float("nan")
    fold = folding_fraction(f) if f is not None else float("nan")
    jstd = jacobian_std(f) if f is not None else float("nan")
    return MetricReport(per, overall, avg, hd, fold, jstd)
