"""Evaluation metrics: voxel AUPRC, Dice, best-threshold Dice, Yen Dice.

AUPRC pools voxels from every subject into a single curve; Dice variants
average per subject. The best-threshold sweep always includes the supplied
per-subject automatic thresholds among its candidates, on top of a uniform
candidate grid in (0, 1) over the normalized scores.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ValidationError

__all__ = [
    "EvalReport",
    "normalize_scores",
    "auprc",
    "dice",
    "ceil_dice",
    "dice_yen",
]


@dataclass
class EvalReport:
    auprc: float
    ceil_dice: float
    ceil_threshold: float
    dice_yen: float
    per_subject: list = field(default_factory=list)
    fingerprint: str = ""
    settings: dict = field(default_factory=dict)
    pr_curve: list = field(default_factory=list)  # (threshold, precision, recall)


def normalize_scores(scores):
    """Min-max scale one array, or a list of arrays jointly, into [0, 1].

    Returns (normalized, (lo, hi)). Raises ``DegenerateInputError`` when the
    evaluated set is constant. Ranks are preserved exactly.
    """
    single = isinstance(scores, np.ndarray)
    arrays = [scores] if single else list(scores)
    if not arrays:
        raise ValidationError("nothing to normalize")
    lo = min(float(a.min()) for a in arrays)
    hi = max(float(a.max()) for a in arrays)
    if not lo < hi:
        raise DegenerateInputError("constant scores cannot be normalized")
    span = np.float32(hi - lo)
    out = [((a - np.float32(lo)) / span).astype(np.float32) for a in arrays]
    return (out[0] if single else out), (lo, hi)


def _pr_groups(scores, labels):
    """Precision/recall walk over descending unique score cuts, ties grouped."""
    scores = np.asarray(scores).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("AUPRC needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # group boundary = last index of each run of equal scores
    boundary = np.nonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])[0]
    tp = np.cumsum(l_sorted)[boundary]
    predicted = boundary + 1
    precision = tp / predicted
    recall = tp / n_pos
    return s_sorted[boundary], precision, recall, n_pos


def auprc(scores, labels) -> float:
    """Average precision: sum of precision * recall increments over score cuts.

    Equal scores enter as one group, so discrete maps get no intra-tie
    ordering luck. With zero negatives the curve is flat at precision 1.
    """
    _, precision, recall, _ = _pr_groups(scores, labels)
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum(precision * (recall - recall_prev)))


def pr_curve(scores, labels):
    """(threshold, precision, recall) triples for CSV export."""
    cuts, precision, recall, _ = _pr_groups(scores, labels)
    return list(zip(cuts.tolist(), precision.tolist(), recall.tolist()))


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap score 2|A n B| / (|A| + |B|); two empty masks count as 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(
            f"mask shapes differ: {pred.shape} vs {gt.shape}"
        )
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def ceil_dice(scores, gts, n_candidates: int = 200, extra_thresholds=()):
    """Best mean per-subject Dice over one dataset-global threshold.

    Sweeps ``n_candidates`` uniform cuts in (0, 1) over the normalized scores
    plus every supplied extra threshold (typically the per-subject automatic
    ones), and returns (best mean Dice, threshold). The lowest threshold wins
    ties.
    """
    scores = list(scores)
    gts = list(gts)
    if not scores or len(scores) != len(gts):
        raise ValidationError("need matching, non-empty score and mask lists")
    grid = np.linspace(0.0, 1.0, n_candidates + 2)[1:-1]
    candidates = np.unique(np.r_[grid, np.asarray(list(extra_thresholds), dtype=np.float64)])
    best = (-1.0, None)
    for thr in candidates:
        mean = float(
            np.mean([dice(a > thr, g) for a, g in zip(scores, gts)])
        )
        if mean > best[0]:
            best = (mean, float(thr))
    return best


def dice_yen(masks, gts) -> float:
    """Mean per-subject Dice of the fully unsupervised segmentation masks."""
    masks = list(masks)
    gts = list(gts)
    if not masks or len(masks) != len(gts):
        raise ValidationError("need matching, non-empty mask lists")
    return float(np.mean([dice(m, g) for m, g in zip(masks, gts)]))
