"""Class-agnostic mask AR/AP over a range of IoU thresholds.

Matching follows the usual COCO discipline: predictions are ranked by
score, truncated to a per-image budget, and greedily matched, each
prediction taking the best still-unmatched ground truth with IoU at or
above the threshold. Average recall is the matched fraction of ground
truths, averaged over the thresholds; the S/M/L variants restrict the
ground truths by pixel area. Average precision uses all-point
interpolated precision, single category.

Ground-truth buckets with no members are reported as absent (None)
rather than zero so synthetic datasets do not skew aggregate numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import PseudoLabel, bbox_intersection_area, mask_iou

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
SMALL_MAX_AREA = 32 * 32    # exclusive
MEDIUM_MAX_AREA = 96 * 96   # exclusive

BUCKET_SMALL = "small"
BUCKET_MEDIUM = "medium"
BUCKET_LARGE = "large"


@dataclass(frozen=True)
class EvalConfig:
    max_predictions: int = 1000
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS

    def __post_init__(self):
        t = tuple(float(x) for x in self.iou_thresholds)
        if not t or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("iou_thresholds must be strictly increasing")
        if t[0] < 0.5 or t[-1] > 0.95:
            raise ValueError("iou_thresholds must lie within [0.5, 0.95]")
        if self.max_predictions < 1:
            raise ValueError("max_predictions must be >= 1")
        object.__setattr__(self, "iou_thresholds", t)


@dataclass(frozen=True)
class EvalResult:
    ar: float | None
    ar_small: float | None
    ar_medium: float | None
    ar_large: float | None
    ap: float | None

    def to_dict(self) -> dict:
        return {"AR": self.ar, "AR_S": self.ar_small, "AR_M": self.ar_medium,
                "AR_L": self.ar_large, "AP": self.ap}


def area_bucket(area_px: int) -> str:
    if area_px < SMALL_MAX_AREA:
        return BUCKET_SMALL
    if area_px < MEDIUM_MAX_AREA:
        return BUCKET_MEDIUM
    return BUCKET_LARGE


def rank_scores(labels: list[PseudoLabel]) -> list[PseudoLabel]:
    """Assign scores by area-descending rank, normalized to (0, 1].

    Deterministic stand-in for score-free pipeline output: the largest
    mask gets 1.0, the k-th largest (K - k + 1) / K; ties keep input order.
    """
    k = len(labels)
    order = sorted(range(k), key=lambda i: (-labels[i].area_px, i))
    scored = list(labels)
    for rank, idx in enumerate(order):
        scored[idx] = PseudoLabel.from_mask(
            labels[idx].mask, labels[idx].source_stage,
            labels[idx].merge_threshold, score=(k - rank) / k)
    return scored


def _ensure_scored(labels: list[PseudoLabel]) -> list[PseudoLabel]:
    if labels and any(lab.score is None for lab in labels):
        return rank_scores(labels)
    return labels


def _iou_matrix(preds: list[PseudoLabel], gts: list[PseudoLabel]) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for pi, p in enumerate(preds):
        for gi, g in enumerate(gts):
            if bbox_intersection_area(p.bbox, g.bbox) == 0 and p.area_px and g.area_px:
                continue
            out[pi, gi] = mask_iou(p.mask, g.mask)
    return out


def match_image(preds: list[PseudoLabel], gts: list[PseudoLabel],
                iou_t: float, max_predictions: int = 1000,
                iou: np.ndarray | None = None) -> list[int]:
    """Greedy matching at one threshold.

    Returns, per prediction (in score order, truncated), the matched GT
    index or -1. Each prediction takes its best unmatched GT with
    IoU >= iou_t; ties go to the lower GT index.
    """
    preds = _ensure_scored(preds)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    order = order[:max_predictions]
    if iou is None:
        iou = _iou_matrix(preds, gts)

    taken = [False] * len(gts)
    matches = []
    for pi in order:
        best_gi, best_v = -1, -1.0
        for gi in range(len(gts)):
            if taken[gi]:
                continue
            v = iou[pi, gi]
            if v >= iou_t and v > best_v:
                best_gi, best_v = gi, v
        if best_gi >= 0:
            taken[best_gi] = True
        matches.append(best_gi)
    return matches


def _interpolated_ap(tp_flags: np.ndarray, total_gt: int) -> float:
    if total_gt == 0:
        return 0.0
    if tp_flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, tp_flags.size + 1)
    precision = tp_cum / ranks
    recall = tp_cum / total_gt
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for k in range(tp_flags.size):
        if tp_flags[k]:
            ap += (recall[k] - prev_r) * envelope[k]
            prev_r = recall[k]
    return float(ap)


def average_recall(preds_by_image: dict[str, list[PseudoLabel]],
                   gts_by_image: dict[str, list[PseudoLabel]],
                   cfg: EvalConfig = EvalConfig()) -> EvalResult:
    """Dataset AR/AP; see module docstring for the protocol."""
    unknown = sorted(set(preds_by_image) - set(gts_by_image))
    if unknown:
        raise ValueError(f"predictions for unknown image ids: {unknown}")

    thresholds = cfg.iou_thresholds
    buckets = (BUCKET_SMALL, BUCKET_MEDIUM, BUCKET_LARGE)
    gt_total = 0
    gt_per_bucket = dict.fromkeys(buckets, 0)
    matched_total = np.zeros(len(thresholds))
    matched_bucket = {b: np.zeros(len(thresholds)) for b in buckets}
    # (score, image, pred index) -> tp flag per threshold, for AP
    ap_entries: list[tuple[float, str, int, np.ndarray]] = []

    for image_id in sorted(gts_by_image):
        gts = gts_by_image[image_id]
        preds = _ensure_scored(preds_by_image.get(image_id, []))
        gt_total += len(gts)
        for g in gts:
            gt_per_bucket[area_bucket(g.area_px)] += 1
        if not preds:
            continue
        order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
        order = order[:cfg.max_predictions]
        iou = _iou_matrix(preds, gts)
        tp = {pi: np.zeros(len(thresholds), dtype=bool) for pi in order}
        for ti, t in enumerate(thresholds):
            matches = match_image(preds, gts, t, cfg.max_predictions, iou=iou)
            for pi, gi in zip(order, matches):
                if gi >= 0:
                    matched_total[ti] += 1
                    matched_bucket[area_bucket(gts[gi].area_px)][ti] += 1
                    tp[pi][ti] = True
        for pi in order:
            ap_entries.append((preds[pi].score, image_id, pi, tp[pi]))

    def _mean_recall(matched: np.ndarray, total: int) -> float | None:
        if total == 0:
            return None
        return float(np.mean(matched / total))

    ap = None
    if gt_total > 0:
        ap_entries.sort(key=lambda e: (-e[0], e[1], e[2]))
        flags = np.array([e[3] for e in ap_entries], dtype=bool)
        if flags.size:
            ap = float(np.mean([_interpolated_ap(flags[:, ti], gt_total)
                                for ti in range(len(thresholds))]))
        else:
            ap = 0.0

    return EvalResult(
        ar=_mean_recall(matched_total, gt_total),
        ar_small=_mean_recall(matched_bucket[BUCKET_SMALL],
                              gt_per_bucket[BUCKET_SMALL]),
        ar_medium=_mean_recall(matched_bucket[BUCKET_MEDIUM],
                               gt_per_bucket[BUCKET_MEDIUM]),
        ar_large=_mean_recall(matched_bucket[BUCKET_LARGE],
                              gt_per_bucket[BUCKET_LARGE]),
        ap=ap,
    )
