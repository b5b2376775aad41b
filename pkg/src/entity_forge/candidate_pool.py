"""Pool the per-threshold snapshots and deduplicate by greedy mask NMS."""

from __future__ import annotations

from dataclasses import dataclass

from .tensorio import (
    ImageRecord,
    PseudoLabel,
    bbox_intersection_area,
    mask_iou,
)
from .region_cluster import SnapshotSet, regions_to_masks

ORDER_AREA_DESC = "area_desc"
ORDER_THRESHOLD_THEN_AREA = "threshold_then_area"


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.9
    ordering: str = ORDER_AREA_DESC

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.ordering not in (ORDER_AREA_DESC, ORDER_THRESHOLD_THEN_AREA):
            raise ValueError(f"unknown ordering {self.ordering!r}")


def mix_snapshots(snapshots: SnapshotSet, record: ImageRecord) -> list[PseudoLabel]:
    """Concatenate all snapshots into one (possibly overlapping) pool."""
    pool: list[PseudoLabel] = []
    for snap in snapshots.snapshots:
        pool.extend(regions_to_masks(snap, snapshots, record))
    return pool


def _sort_pool(pool: list[PseudoLabel], cfg: NmsConfig) -> list[PseudoLabel]:
    idx = range(len(pool))
    if cfg.ordering == ORDER_AREA_DESC:
        order = sorted(idx, key=lambda i: (-pool[i].area_px, i))
    else:
        order = sorted(idx, key=lambda i: (-pool[i].merge_threshold, -pool[i].area_px, i))
    return [pool[i] for i in order]


def mask_nms(pool: list[PseudoLabel], cfg: NmsConfig = NmsConfig()) -> list[PseudoLabel]:
    """Keep a mask iff its IoU with every already-kept mask is below the
    threshold, scanning in the configured order. Stable and deterministic."""
    if not pool:
        return []
    dims = (pool[0].mask.height_px, pool[0].mask.width_px)
    if any((m.mask.height_px, m.mask.width_px) != dims for m in pool):
        raise ValueError("all masks in a pool must share dimensions")

    kept: list[PseudoLabel] = []
    for cand in _sort_pool(pool, cfg):
        duplicate = False
        for ref in kept:
            if cand.area_px == 0 or ref.area_px == 0:
                if cand.area_px == ref.area_px:  # both empty: IoU is 1.0
                    duplicate = True
                    break
                continue
            # bbox overlap bounds the true intersection from above, and
            # x / (a + b - x) is increasing in x, so this bounds the IoU
            ub = bbox_intersection_area(cand.bbox, ref.bbox)
            if ub == 0 or ub / (cand.area_px + ref.area_px - ub) < cfg.iou_threshold:
                continue
            if mask_iou(cand.mask, ref.mask) >= cfg.iou_threshold:
                duplicate = True
                break
        if not duplicate:
            kept.append(cand)
    return kept
