"""Image-level AUROC and region-level PRO evaluation.

AUROC uses the Mann-Whitney formulation with ties counted as half.  PRO
averages per-connected-region recall (4-connectivity) over a descending
threshold sweep and integrates it over the false-positive-rate range
[0, fpr_limit], normalized by the limit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

FOUR_CONNECTIVITY = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


def auroc(scores, labels) -> float:
    """Area under the ROC curve; requires both classes present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auroc: scores and labels must be aligned 1-d arrays")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc: both classes must be present")
    ranks = rankdata(scores, method="average")
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Connected components of a binary mask under 4-connectivity."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise ValueError("label_regions: mask must be binary 2-d")
    labeled, count = ndimage.label(mask, structure=FOUR_CONNECTIVITY)
    return labeled, int(count)


def pro_curve(score_maps, masks, thresholds):
    """Per-threshold (PRO, FPR) values over a set of images.

    ``thresholds`` is either an explicit array or a count; a count builds a
    descending linspace over the pooled score range so FPR grows along the
    sweep.  Region overlaps are averaged over every ground-truth region in
    the set; FPR pools negative pixels across images.
    """
    score_maps = [np.asarray(s, dtype=np.float64) for s in score_maps]
    masks = [np.asarray(m) for m in masks]
    if len(score_maps) != len(masks) or not score_maps:
        raise ValueError("pro: need aligned, non-empty score maps and masks")
    for s, m in zip(score_maps, masks):
        if s.shape != m.shape:
            raise ValueError(f"pro: score map {s.shape} does not match mask {m.shape}")

    regions = []  # (image index, boolean region mask)
    neg_total = 0
    for i, m in enumerate(masks):
        labeled, count = label_regions(m)
        for rid in range(1, count + 1):
            regions.append((i, labeled == rid))
        neg_total += int((m == 0).sum())
    if not regions:
        raise ValueError("pro: no anomalous regions in the ground truth set")

    if np.isscalar(thresholds):
        pooled = np.concatenate([s.ravel() for s in score_maps])
        thresholds = np.linspace(pooled.max(), pooled.min(), int(thresholds))
    else:
        thresholds = np.asarray(thresholds, dtype=np.float64)

    pro_values = np.zeros(len(thresholds))
    fpr_values = np.zeros(len(thresholds))
    for t_idx, t in enumerate(thresholds):
        preds = [s >= t for s in score_maps]
        overlaps = [preds[i][region].mean() for i, region in regions]
        pro_values[t_idx] = float(np.mean(overlaps))
        if neg_total:
            fp = sum(int(p[m == 0].sum()) for p, m in zip(preds, masks))
            fpr_values[t_idx] = fp / neg_total
    return thresholds, pro_values, fpr_values


def integrate_to_limit(fpr: np.ndarray, pro: np.ndarray, fpr_limit: float) -> float:
    """Trapezoid-integrate the (FPR, PRO) curve over [0, limit], normalized.

    The curve is extended flat to the limit when the sweep stops short.
    """
    if fpr_limit <= 0:
        raise ValueError("pro: fpr_limit must be > 0")
    order = np.lexsort((pro, fpr))
    f = np.asarray(fpr, dtype=np.float64)[order]
    p = np.asarray(pro, dtype=np.float64)[order]
    if f[0] > 0.0:
        f = np.concatenate([[0.0], f])
        p = np.concatenate([[p[0]], p])
    if f[-1] < fpr_limit:
        f = np.concatenate([f, [fpr_limit]])
        p = np.concatenate([p, [p[-1]]])
    else:
        # cut the curve exactly at the limit with linear interpolation
        inside = f <= fpr_limit
        k = int(inside.sum())
        if f[k - 1] < fpr_limit:
            p_at = np.interp(fpr_limit, f, p)
            f = np.concatenate([f[:k], [fpr_limit]])
            p = np.concatenate([p[:k], [p_at]])
        else:
            f, p = f[:k], p[:k]
    return float(np.trapezoid(p, f) / fpr_limit)


def pro(score_maps, masks, fpr_limit: float = 0.3, thresholds=200) -> float:
    """Integrated, normalized PRO score over [0, fpr_limit]."""
    _, pro_values, fpr_values = pro_curve(score_maps, masks, thresholds)
    return integrate_to_limit(fpr_values, pro_values, fpr_limit)


def pixel_auroc(score_maps, masks) -> float:
    """Auxiliary pixel-level AUROC over pooled patches (not a headline metric)."""
    scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in score_maps])
    labels = np.concatenate([np.asarray(m).astype(int).ravel() for m in masks])
    return auroc(scores, labels)


@dataclass
class EvalReport:
    image_auroc: float
    pro_score: float | None
    pixel_auroc: float | None
    per_class: dict = field(default_factory=dict)
    curve: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "image_auroc": self.image_auroc,
            "pro": self.pro_score,
            "pixel_auroc": self.pixel_auroc,
            "per_class": self.per_class,
            "curve": self.curve,
        }, indent=2)

    def summary_line(self) -> str:
        pro_txt = "n/a" if self.pro_score is None else f"{100 * self.pro_score:.1f}"
        return f"AUROC/PRO: {100 * self.image_auroc:.1f}/{pro_txt}"


def evaluate(class_ids, labels, image_scores, score_maps=None, masks=None,
             fpr_limit: float = 0.3, thresholds: int = 200) -> EvalReport:
    """Assemble the image-level and region-level report with class breakdown."""
    image_score = auroc(image_scores, labels)
    pro_score = None
    pix = None
    curve = {}
    if score_maps is not None and masks is not None:
        t, p, f = pro_curve(score_maps, masks, thresholds)
        pro_score = integrate_to_limit(f, p, fpr_limit)
        pix = pixel_auroc(score_maps, masks)
        curve = {"threshold": t.tolist(), "pro": p.tolist(), "fpr": f.tolist()}
    per_class: dict = {}
    for cls in sorted(set(class_ids)):
        sel = [i for i, c in enumerate(class_ids) if c == cls]
        cls_labels = [labels[i] for i in sel]
        entry: dict = {}
        if 0 < sum(cls_labels) < len(cls_labels):
            entry["image_auroc"] = auroc([image_scores[i] for i in sel], cls_labels)
            if score_maps is not None and masks is not None:
                cls_masks = [masks[i] for i in sel]
                if any(np.asarray(m).any() for m in cls_masks):
                    entry["pro"] = pro([score_maps[i] for i in sel], cls_masks,
                                       fpr_limit, thresholds)
        per_class[cls] = entry
    return EvalReport(image_score, pro_score, pix, per_class, curve)
