"""Overlap and surface-distance metrics on label volumes (unit voxel spacing)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_SIX = ndimage.generate_binary_structure(3, 1)


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice_jaccard(pred, gt, c: int) -> tuple[float, float]:
    """Dice and Jaccard for class ``c``; both are 1 when the class is absent from both."""
    pred, gt = _check(pred, gt)
    a, b = pred == c, gt == c
    inter = int(np.count_nonzero(a & b))
    sa, sb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if sa + sb == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sa + sb), inter / (sa + sb - inter)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbor in the background.

    Voxels outside the volume count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = ndimage.binary_erosion(padded, structure=_SIX, border_value=0)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from each src surface voxel to the nearest dst surface voxel
    edt = ndimage.distance_transform_edt(~dst)
    return edt[src]


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    k = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[k - 1])


def surface_distances(pred, gt, c: int) -> tuple[float, float]:
    """(HD95, ASD) between the class-``c`` surfaces; ``(inf, inf)`` if either is empty.

    Both are taken over the pooled multiset of directed distances in the two
    directions; the percentile uses the nearest-rank rule.
    """
    pred, gt = _check(pred, gt)
    sa, sb = boundary(pred == c), boundary(gt == c)
    if not sa.any() or not sb.any():
        return math.inf, math.inf
    # sorted so the mean does not depend on which mask came first
    d = np.sort(np.concatenate([_directed(sa, sb), _directed(sb, sa)]))
    return nearest_rank(d, 95), float(d.mean())


@dataclass
class MetricReport:
    classes: list[int]
    dice: dict[int, float]
    jaccard: dict[int, float]
    hd95: dict[int, float]
    asd: dict[int, float]
    n_empty_surface: dict[int, int] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[c] for c in self.classes]))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean([self.jaccard[c] for c in self.classes]))

    @property
    def mean_hd95(self) -> float:
        return _finite_mean([self.hd95[c] for c in self.classes])

    @property
    def mean_asd(self) -> float:
        return _finite_mean([self.asd[c] for c in self.classes])

    def as_row(self, prefix: str = "val") -> dict[str, float]:
        row = {}
        for c in self.classes:
            row[f"{prefix}_dice_c{c}"] = self.dice[c]
            row[f"{prefix}_jaccard_c{c}"] = self.jaccard[c]
            row[f"{prefix}_hd95_c{c}"] = self.hd95[c]
            row[f"{prefix}_asd_c{c}"] = self.asd[c]
        row[f"{prefix}_dice_mean"] = self.mean_dice
        return row


def _finite_mean(xs) -> float:
    xs = [x for x in xs if math.isfinite(x)]
    return float(np.mean(xs)) if xs else math.inf


def evaluate_case(pred, gt, classes) -> dict[int, tuple[float, float, float, float]]:
    out = {}
    for c in classes:
        d, j = dice_jaccard(pred, gt, c)
        hd, asd = surface_distances(pred, gt, c)
        out[c] = (d, j, hd, asd)
    return out


def aggregate(preds, gts, classes) -> MetricReport:
    """Per-class means over cases. Surface metrics average finite cases only;
    the number of cases with an empty surface is kept in ``n_empty_surface``."""
    classes = list(classes)
    if len(preds) == 0:
        raise ValueError("aggregate needs at least one case")
    per = [evaluate_case(p, g, classes) for p, g in zip(preds, gts)]
    dice = {c: float(np.mean([r[c][0] for r in per])) for c in classes}
    jac = {c: float(np.mean([r[c][1] for r in per])) for c in classes}
    hd = {c: _finite_mean([r[c][2] for r in per]) for c in classes}
    asd = {c: _finite_mean([r[c][3] for r in per]) for c in classes}
    empty = {c: sum(not math.isfinite(r[c][2]) for r in per) for c in classes}
    return MetricReport(classes, dice, jac, hd, asd, empty)
