"""Binary Dice, 95th-percentile Hausdorff distance, and paired statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _check_same_shape(pred, truth):
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth {truth.shape}")


def dice_score(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> tuple[list[float], float]:
    """Per-foreground-class Dice and their mean.

    Both empty gives 1, exactly one empty gives 0.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_same_shape(pred, truth)
    scores = []
    for c in range(1, num_classes):
        p, t = pred == c, truth == c
        denom = int(p.sum()) + int(t.sum())
        scores.append(1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom)
    return scores, float(np.mean(scores))


def surface_voxels(region: np.ndarray) -> np.ndarray:
    """Voxels of ``region`` with a 6-neighbour outside it (volume edge counts as outside)."""
    eroded = ndimage.binary_erosion(region, structure=_SIX_CONNECTED, border_value=0)
    return np.argwhere(region & ~eroded)


def nearest_rank(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    return float(ordered[max(0, math.ceil(q / 100.0 * len(ordered)) - 1)])


def hd95(pred: np.ndarray, truth: np.ndarray, c: int, spacing=(1.0, 1.0, 1.0),
         percentile: float = 95.0) -> float:
    """Symmetric percentile surface distance in mm; NaN when either set is empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_same_shape(pred, truth)
    a, b = surface_voxels(pred == c), surface_voxels(truth == c)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    scale = np.asarray(spacing, dtype=np.float64)
    a, b = a * scale, b * scale
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return max(nearest_rank(d_ab, percentile), nearest_rank(d_ba, percentile))


@dataclass
class CaseResult:
    case_id: str
    dice: list[float]
    hd95: list[float]
    roi_voxels: list[int]
    mean_dice: float = field(init=False)
    mean_hd95: float = field(init=False)
    hd95_undefined: int = field(init=False)

    def __post_init__(self):
        self.mean_dice = float(np.mean(self.dice))
        defined = [h for h in self.hd95 if not math.isnan(h)]
        self.hd95_undefined = len(self.hd95) - len(defined)
        self.mean_hd95 = float(np.mean(defined)) if defined else math.nan


def evaluate_case(case_id: str, pred: np.ndarray, truth: np.ndarray, num_classes: int,
                  spacing=(1.0, 1.0, 1.0)) -> CaseResult:
    per_class, _ = dice_score(pred, truth, num_classes)
    return CaseResult(
        case_id=case_id,
        dice=per_class,
        hd95=[hd95(pred, truth, c, spacing) for c in range(1, num_classes)],
        roi_voxels=[int((truth == c).sum()) for c in range(1, num_classes)],
    )


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired Student's t-test on ``a - b``.

    All-zero differences give ``(0, 1)``; constant nonzero differences give
    ``(+-inf, 0)``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    if a.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    m = d.mean()
    if sd == 0:
        if m == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, m), 0.0
    t = m / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(p)


def spearman_r(x, y) -> float:
    """Pearson correlation of average ranks; NaN when either input is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"inputs differ in length: {len(x)} vs {len(y)}")
    if x.size < 3:
        raise ValueError("spearman_r needs at least three pairs")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    if rx.std() == 0 or ry.std() == 0:
        return math.nan
    return float(np.corrcoef(rx, ry)[0, 1])
