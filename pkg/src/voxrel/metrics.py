"""Evaluation metrics for classifiers and relevance maps.

Conventions: confusion rows are truth, columns are prediction; F1 is 0 when
precision and recall are both 0; ROC AUC is pairwise concordance with ties
counting one half; Pearson uses population (1/N) moments; Dice of two empty
masks is an error rather than a silent 0 or 1.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DimMismatchError, EmptyMaskError, ValidationError, ZeroVarianceError
from .volume import BinaryMask


def _values(map_like) -> np.ndarray:
    return map_like.values if hasattr(map_like, "values") else np.asarray(map_like)


def confusion_matrix(truth, predicted, n_classes: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.shape != predicted.shape:
        raise ValidationError("truth and prediction lengths differ")
    if truth.size == 0:
        raise ValidationError("empty label arrays")
    for arr, what in ((truth, "truth"), (predicted, "prediction")):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValidationError(f"{what} labels out of range for {n_classes} classes")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (truth, predicted), 1)
    return m


def classification_report(truth, predicted, class_names: list[str]) -> dict:
    """Per-class precision/recall/F1 plus accuracy, from one confusion matrix."""
    k = len(class_names)
    m = confusion_matrix(truth, predicted, k)
    classes = {}
    for i, name in enumerate(class_names):
        tp = int(m[i, i])
        fp = int(m[:, i].sum()) - tp
        fn = int(m[i, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        classes[name] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": int(m[i, :].sum()),
        }
    return {
        "class_names": list(class_names),
        "classes": classes,
        "confusion": m.tolist(),
        "accuracy": float(np.trace(m) / m.sum()),
    }


def roc_auc(scores, truth) -> float:
    """Probability a random positive outscores a random negative (ties: 1/2).

    Computed from average ranks, which is exactly the pairwise count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ValidationError("scores and truth must be equal-length vectors")
    n_pos = int((truth == 1).sum())
    n_neg = int((truth == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[truth == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_subsplits(scores, labels3) -> dict:
    """AUCs for NC-vs-rest plus the MCI/NC and AD/NC restrictions.

    labels3 holds the three-way labels (NC/MCI/AD). Splits whose classes are
    not both present come back as None and are listed under "absent".
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels3 = np.asarray(labels3)
    out: dict = {"all": None, "mci_vs_nc": None, "ad_vs_nc": None, "absent": []}
    splits = {
        "all": ("NC", "MCI", "AD"),
        "mci_vs_nc": ("NC", "MCI"),
        "ad_vs_nc": ("NC", "AD"),
    }
    for key, keep in splits.items():
        sel = np.isin(labels3, keep)
        truth = (labels3[sel] != "NC").astype(np.int64)
        if truth.size and truth.min() == 0 and truth.max() == 1:
            out[key] = roc_auc(scores[sel], truth)
        else:
            out["absent"].append(key)
    return out


def dice(x: BinaryMask, y: BinaryMask) -> float:
    """2|X∩Y| / (|X|+|Y|); undefined (error) when both masks are empty."""
    if x.dims != y.dims:
        raise DimMismatchError(f"mask dims differ: {x.dims} vs {y.dims}")
    total = x.count + y.count
    if total == 0:
        raise EmptyMaskError("dice of two empty masks is undefined")
    inter = int((x.bits & y.bits).sum())
    return 2.0 * inter / total


def pairwise_dice_matrix(masks: list[BinaryMask]) -> np.ndarray:
    n = len(masks)
    out = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dice(masks[i], masks[j])
    return out


def pearson(x, y) -> float:
    """Population-moment correlation; zero variance in either input is an error."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("pearson expects two equal-length vectors")
    if x.size < 2:
        raise ValidationError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.mean(xc**2))
    sy = np.sqrt(np.mean(yc**2))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("pearson undefined for constant input")
    return float(np.mean(xc * yc) / (sx * sy))


# ---------------------------------------------------------------------------
# region-level map statistics


def region_intensity_sum(vol, mask: BinaryMask) -> float:
    """In-region intensity total; the structure-volume stand-in."""
    values = _values(vol)
    if values.shape != mask.bits.shape:
        raise DimMismatchError("volume and mask dims differ")
    return float(values[mask.bits].sum(dtype=np.float64))


def region_relevance_stats(map_like, region: BinaryMask) -> dict:
    """Aggregate (signed sum) of map values inside the region, plus the share
    of the region covered by strictly positive map values."""
    values = _values(map_like)
    if values.shape != region.bits.shape:
        raise DimMismatchError("map and region dims differ")
    if region.count == 0:
        raise EmptyMaskError("empty region")
    aggregate = float(values[region.bits].sum(dtype=np.float64))
    positive = int(((values > 0) & region.bits).sum())
    return {"aggregate": aggregate, "volume_ratio": positive / region.count}


def positive_mass_fraction(map_like, region: BinaryMask) -> float:
    """Share of total positive relevance that falls inside the region."""
    values = _values(map_like)
    if values.shape != region.bits.shape:
        raise DimMismatchError("map and region dims differ")
    pos = np.maximum(values, 0.0)
    total = float(pos.sum(dtype=np.float64))
    if total == 0.0:
        raise ZeroVarianceError("map has no positive relevance")
    return float(pos[region.bits].sum(dtype=np.float64) / total)


def correlation_study(
    maps_by_model: dict[str, dict],
    volume_analog: dict[str, float],
    region: BinaryMask,
):
    """Correlate per-subject aggregate region relevance against the region
    volume analog, per model.

    Returns (results, scatter_rows): results maps model id to {"rho": float,
    "n": int} or {"error": str} when the correlation is undefined;
    scatter_rows are (model, subject, aggregate_relevance, volume_analog).
    """
    results: dict[str, dict] = {}
    rows: list[tuple] = []
    for model_id in sorted(maps_by_model):
        maps = maps_by_model[model_id]
        subjects = sorted(s for s in maps if s in volume_analog)
        xs, ys = [], []
        for sid in subjects:
            agg = region_relevance_stats(maps[sid], region)["aggregate"]
            xs.append(agg)
            ys.append(volume_analog[sid])
            rows.append((model_id, sid, agg, volume_analog[sid]))
        try:
            if len(xs) < 2:
                raise ValidationError(f"model {model_id}: not enough subjects for a correlation")
            results[model_id] = {"rho": pearson(xs, ys), "n": len(xs)}
        except (ZeroVarianceError, ValidationError) as e:
            results[model_id] = {"error": str(e), "n": len(xs)}
    return results, rows


def write_scatter_csv(rows: list[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "subject", "aggregate_relevance", "volume_analog"])
        for model_id, sid, agg, vol in rows:
            writer.writerow([model_id, sid, f"{agg:.10g}", f"{vol:.10g}"])
