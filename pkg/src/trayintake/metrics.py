"""Evaluation statistics: segmentation IoU/mIoU/pixel accuracy/region F-scores,
recognition accuracy per hyper category, and intake agreement (MAE, MRE,
Pearson correlation, Bland-Altman limits of agreement).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special
from scipy import ndimage

from .core import EIGHT_CONNECTED, HYPER_CATEGORIES, LabelMap, Taxonomy, ValidationError


class MetricError(ValueError):
    """Invalid metric input (dimension mismatch, empty data, ...)."""


# ---------------------------------------------------------------------------
# segmentation metrics


def _check_dims(pred: LabelMap, gt: LabelMap):
    if pred.shape != gt.shape:
        raise MetricError(f"dimension mismatch: {pred.shape} vs {gt.shape}")


def iou(pred: LabelMap, gt: LabelMap, category: int):
    """Intersection over union of one category's pixel sets.

    Returns None when the union is empty (category absent on both sides).
    """
    _check_dims(pred, gt)
    p = pred.values == category
    g = gt.values == category
    union = int((p | g).sum())
    if union == 0:
        return None
    return float((p & g).sum()) / union


@dataclass(frozen=True)
class SegmentationScore:
    per_category_iou: dict  # hyper index -> IoU (absent categories omitted)
    miou: float
    pixel_accuracy: float
    f_min: float
    f_sum: float


def pixel_accuracy(pred: LabelMap, gt: LabelMap, food_mask: np.ndarray | None = None) -> float:
    """Fraction of ground-truth food pixels whose predicted label matches."""
    _check_dims(pred, gt)
    mask = gt.values > 0 if food_mask is None else np.asarray(food_mask, bool)
    total = int(mask.sum())
    if total == 0:
        raise MetricError("empty food mask")
    return float((pred.values[mask] == gt.values[mask]).sum()) / total


def region_fscores(pred: LabelMap, gt: LabelMap, min_area: int = 1):
    """Per-ground-truth-region F1 between the region and same-label predicted
    pixels in predicted components overlapping it.

    Returns (f_min, f_sum): the worst region F1 and the pixel-area-weighted
    mean over regions.
    """
    _check_dims(pred, gt)
    from .core import item_extraction

    regions = item_extraction(gt, min_area=min_area)
    if not regions:
        raise MetricError("no ground-truth food regions")
    scores, areas = [], []
    for region in regions:
        gmask = region.mask(gt.shape)
        pmask_label = pred.values == region.hyper
        # predicted components of the same label that touch the region
        labeled, n = ndimage.label(pmask_label, structure=EIGHT_CONNECTED)
        touching = np.unique(labeled[gmask & pmask_label])
        touching = touching[touching > 0]
        pmask = np.isin(labeled, touching)
        tp = float((pmask & gmask).sum())
        if tp == 0:
            scores.append(0.0)
        else:
            precision = tp / pmask.sum()
            recall = tp / gmask.sum()
            scores.append(2 * precision * recall / (precision + recall))
        areas.append(float(gmask.sum()))
    scores = np.array(scores)
    areas = np.array(areas)
    f_min = float(scores.min())
    f_sum = float((scores * areas).sum() / areas.sum())
    return f_min, f_sum


def segmentation_score(pred: LabelMap, gt: LabelMap, min_area: int = 1) -> SegmentationScore:
    """All segmentation metrics in one pass; mIoU averages only the hyper
    categories present in the ground truth."""
    per_cat = {}
    present = []
    for cat in range(1, len(HYPER_CATEGORIES) + 1):
        if not (gt.values == cat).any():
            continue
        value = iou(pred, gt, cat)
        per_cat[cat] = value
        present.append(value)
    if not present:
        raise MetricError("ground truth contains no food pixels")
    f_min, f_sum = region_fscores(pred, gt, min_area=min_area)
    return SegmentationScore(
        per_category_iou=per_cat,
        miou=float(np.mean(present)),
        pixel_accuracy=pixel_accuracy(pred, gt),
        f_min=f_min,
        f_sum=f_sum,
    )


# ---------------------------------------------------------------------------
# recognition accuracy


def recognition_accuracy(predictions, truths, taxonomy: Taxonomy):
    """Per-hyper-category accuracy plus the unweighted mean over hyper
    categories present in the truth sequence.

    Returns (per_hyper: dict hyper index -> accuracy, mean accuracy).
    """
    predictions = list(predictions)
    truths = list(truths)
    if not truths or len(predictions) != len(truths):
        raise MetricError("prediction/truth sequences empty or misaligned")
    correct, total = {}, {}
    for pred, true in zip(predictions, truths):
        hyper = taxonomy.hyper_of(true)
        total[hyper] = total.get(hyper, 0) + 1
        correct[hyper] = correct.get(hyper, 0) + (pred == true)
    per_hyper = {h: correct[h] / total[h] for h in sorted(total)}
    mean = float(np.mean(list(per_hyper.values())))
    return per_hyper, mean


# ---------------------------------------------------------------------------
# agreement statistics


@dataclass(frozen=True)
class AgreementStats:
    mae: float
    mae_sd: float
    mre_percent: float
    mre_skipped: int  # ground-truth zeros excluded from MRE
    pearson_r: float
    p_value: float
    bias: float
    loa_low: float
    loa_high: float


def pearson(preds: np.ndarray, gts: np.ndarray):
    """Product-moment correlation with a two-sided t-test p-value."""
    n = len(preds)
    if n < 3:
        raise MetricError(f"need at least 3 points for a correlation, got {n}")
    dp = preds - preds.mean()
    dg = gts - gts.mean()
    denom = np.sqrt(float(dp @ dp) * float(dg @ dg))
    if denom == 0:
        raise MetricError("constant sequence: correlation undefined")
    r = float(dp @ dg) / denom
    r = min(1.0, max(-1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    # two-sided tail of Student's t with n-2 dof
    p = float(2.0 * special.stdtr(n - 2, -abs(t)))
    return r, p


def agreement(preds, gts) -> AgreementStats:
    """MAE(SD), MRE over nonzero truths, Pearson r and Bland-Altman limits.

    The limits of agreement are bias +/- 1.96 times the sample SD of the
    differences (ddof=1).
    """
    preds = np.asarray(preds, float)
    gts = np.asarray(gts, float)
    if preds.shape != gts.shape or preds.ndim != 1 or len(preds) == 0:
        raise MetricError(f"misaligned sequences: {preds.shape} vs {gts.shape}")
    diff = preds - gts
    abs_err = np.abs(diff)
    mae = float(abs_err.mean())
    mae_sd = float(abs_err.std(ddof=1)) if len(preds) > 1 else 0.0
    nonzero = gts != 0
    skipped = int((~nonzero).sum())
    if nonzero.any():
        mre = float((abs_err[nonzero] / np.abs(gts[nonzero])).mean() * 100.0)
    else:
        mre = float("nan")
    r, p = pearson(preds, gts)
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1)) if len(preds) > 1 else 0.0
    return AgreementStats(
        mae=mae,
        mae_sd=mae_sd,
        mre_percent=mre,
        mre_skipped=skipped,
        pearson_r=r,
        p_value=p,
        bias=bias,
        loa_low=bias - 1.96 * sd,
        loa_high=bias + 1.96 * sd,
    )


AGREEMENT_CSV_HEADER = [
    "nutrient",
    "mae",
    "mae_sd",
    "mre_percent",
    "mre_skipped",
    "pearson_r",
    "p_value",
    "bias",
    "loa_low",
    "loa_high",
]


def write_agreement_csv(stats_by_nutrient: dict, path):
    """Results table mirroring the intake-agreement report layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGREEMENT_CSV_HEADER)
        for nutrient, s in stats_by_nutrient.items():
            writer.writerow(
                [
                    nutrient,
                    s.mae,
                    s.mae_sd,
                    s.mre_percent,
                    s.mre_skipped,
                    s.pearson_r,
                    s.p_value,
                    s.bias,
                    s.loa_low,
                    s.loa_high,
                ]
            )


def write_bland_altman_data(preds, gts, path):
    """Per-point (gt, diff) pairs for external agreement plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    preds = np.asarray(preds, float)
    gts = np.asarray(gts, float)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gt", "diff"])
        for g, p in zip(gts, preds):
            writer.writerow([g, p - g])
