"""Registration and classification evaluation measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _arr(m):
    return np.asarray(getattr(m, "data", m))


def mad(applied: np.ndarray, recovered: np.ndarray) -> float:
    """Mean Euclidean distance between two displacement fields (voxel units)."""
    a, b = np.asarray(applied, dtype=np.float64), np.asarray(recovered, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"field shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=-1))))


def _binary(m, name):
    a = _arr(m)
    if not np.all((a == 0) | (a == 1)):
        raise MetricError(f"{name} is not a binary mask")
    return a.astype(bool)


def dice(a, b) -> float:
    a, b = _binary(a, "a"), _binary(b, "b")
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices of mask voxels with at least one 6-neighbour outside the mask
    (voxels beyond the image border count as outside)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return np.argwhere(m & ~inner)


def _surface_points(mask, spacing):
    pts = surface_voxels(mask)
    if len(pts) == 0:
        raise MetricError("empty mask has no surface")
    return pts * np.asarray(spacing, dtype=np.float64)


def directed_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance (mm) from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    pa, pb = _surface_points(_binary(a, "a"), spacing), _surface_points(_binary(b, "b"), spacing)
    return cKDTree(pb).query(pa)[0]


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask surfaces, in mm."""
    if _arr(a).shape != _arr(b).shape:
        raise MetricError("mask shapes differ")
    dab = directed_surface_distances(a, b, spacing)
    dba = directed_surface_distances(b, a, spacing)
    return float(max(np.percentile(dab, 95), np.percentile(dba, 95)))


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(max(directed_surface_distances(a, b, spacing).max(),
                     directed_surface_distances(b, a, spacing).max()))


# ---------------------------------------------------------------------------
# classification


@dataclass
class ConfusionTable:
    classes: tuple
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    tn: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)

    @classmethod
    def from_labels(cls, predictions, truths, classes) -> "ConfusionTable":
        pred, true = np.asarray(predictions), np.asarray(truths)
        if pred.shape != true.shape:
            raise MetricError("predictions and truths differ in length")
        t = cls(tuple(classes))
        for c in classes:
            p, y = pred == c, true == c
            t.tp[c] = int(np.sum(p & y))
            t.fp[c] = int(np.sum(p & ~y))
            t.tn[c] = int(np.sum(~p & ~y))
            t.fn[c] = int(np.sum(~p & y))
        return t


def auc_rank(scores, positives) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(predictions, truths, classes, scores=None) -> dict:
    """One-vs-rest sensitivity/specificity per class plus macro averages.

    ``scores`` is an (n, len(classes)) array of per-class scores used for the
    one-vs-rest AUC; classes absent from ``truths`` get NaN and are listed
    under ``undefined``.
    """
    classes = tuple(classes)
    table = ConfusionTable.from_labels(predictions, truths, classes)
    truths = np.asarray(truths)
    per_class = {}
    undefined = []
    for ci, c in enumerate(classes):
        tp, fp, tn, fn = table.tp[c], table.fp[c], table.tn[c], table.fn[c]
        sen = tp / (tp + fn) if tp + fn else float("nan")
        spe = tn / (tn + fp) if tn + fp else float("nan")
        auc = float("nan")
        if scores is not None:
            auc = auc_rank(np.asarray(scores)[:, ci], truths == c)
        if tp + fn == 0:
            undefined.append(c)
        per_class[c] = {"sensitivity": sen, "specificity": spe, "auc": auc, "support": tp + fn}

    def macro(key):
        vals = [v[key] for v in per_class.values() if not np.isnan(v[key])]
        return float(np.mean(vals)) if vals else float("nan")

    return {"per_class": per_class, "macro_sensitivity": macro("sensitivity"),
            "macro_specificity": macro("specificity"), "macro_auc": macro("auc"),
            "undefined": undefined, "table": table}
