"""Zoom into small candidates, re-cluster the local window, keep interior
subregions and map them back to working-image coordinates.

Small candidates are regions below a fraction of the image area. Around
each we take a square window (twice the larger bbox side, clamped to
[64 px, working size] and shifted to stay in bounds), obtain a 32x32
local feature grid for it, and re-run the global clustering procedure.
Subregions that touch the window's outer ring are incomplete within the
crop and are discarded.

Local features come from one of two sources: ``proxy`` bilinearly
resamples the image's own global grid (self-contained, the default),
``exporter`` reads a crop-response SFG1 file produced by a second
backbone pass over the actual crop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import (
    STAGE_LOCAL,
    FeatureGrid,
    ImageRecord,
    PseudoLabel,
    encode_rle,
    read_feature_grid,
)
from .region_cluster import ThresholdSchedule, agglomerate, build_graph
from .candidate_pool import NmsConfig, mask_nms

FEATURE_MODE_PROXY = "proxy"
FEATURE_MODE_EXPORTER = "exporter"

MIN_WINDOW_SIDE_PX = 64
LOCAL_GRID_SIDE = 32  # local crop resized to 256 px at stride 8


class PendingCropError(RuntimeError):
    """Exporter-mode features requested before the crop response exists."""

    def __init__(self, request: dict):
        super().__init__(f"missing crop response for {request['request_id']}")
        self.request = request


@dataclass(frozen=True)
class SmallSelector:
    """Area fraction below which a candidate is re-examined locally."""

    small_fraction: float = 1.0 / 1024.0

    def __post_init__(self):
        if not 0.0 < self.small_fraction < 1.0:
            raise ValueError("small_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class LocalWindow:
    origin_px: tuple[int, int]
    side_px: int
    target_grid_side: int
    source_label_index: int

    def __post_init__(self):
        if self.side_px < MIN_WINDOW_SIDE_PX:
            raise ValueError(f"window side {self.side_px} below minimum")


def select_small(pool: list[PseudoLabel], selector: SmallSelector,
                 record: ImageRecord) -> tuple[list[PseudoLabel], list[PseudoLabel]]:
    """Partition the pool: strictly-smaller-than-fraction vs the rest."""
    limit = selector.small_fraction * record.working_size_px ** 2
    small = [m for m in pool if m.area_px < limit]
    large = [m for m in pool if m.area_px >= limit]
    return small, large


def make_window(label: PseudoLabel, record: ImageRecord,
                source_label_index: int = 0,
                target_grid_side: int = LOCAL_GRID_SIDE) -> LocalWindow:
    """Square crop window centered on the label, shifted to stay in bounds."""
    size = record.working_size_px
    x, y, w, h = label.bbox
    side = max(2 * max(w, h), MIN_WINDOW_SIDE_PX)
    side = min(side, size)
    ox = (2 * x + w - side) // 2
    oy = (2 * y + h - side) // 2
    ox = min(max(ox, 0), size - side)
    oy = min(max(oy, 0), size - side)
    return LocalWindow(origin_px=(ox, oy), side_px=side,
                       target_grid_side=target_grid_side,
                       source_label_index=source_label_index)


def crop_request_id(image_id: str, window: LocalWindow) -> str:
    x, y = window.origin_px
    return f"{image_id}_x{x}_y{y}_s{window.side_px}"


def crop_request(image_id: str, window: LocalWindow) -> dict:
    x, y = window.origin_px
    return {
        "image_id": image_id,
        "window": {"x": x, "y": y, "side": window.side_px},
        "request_id": crop_request_id(image_id, window),
    }


def write_crop_requests(path: str | Path, requests: list[dict]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in requests]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _proxy_features(window: LocalWindow, grid: FeatureGrid) -> FeatureGrid:
    """Bilinearly resample the global grid at the window's local patch centers."""
    t = window.target_grid_side
    stride = grid.patch_stride_px
    x0, y0 = window.origin_px
    side = window.side_px

    # local patch centers in working pixels, then in global patch coords
    centers = (np.arange(t, dtype=np.float64) + 0.5) * side / t
    u = np.clip((x0 + centers) / stride - 0.5, 0.0, grid.width_patches - 1.0)
    v = np.clip((y0 + centers) / stride - 0.5, 0.0, grid.height_patches - 1.0)

    ju0 = np.floor(u).astype(np.int64)
    iv0 = np.floor(v).astype(np.int64)
    ju1 = np.minimum(ju0 + 1, grid.width_patches - 1)
    iv1 = np.minimum(iv0 + 1, grid.height_patches - 1)
    fu = (u - ju0)[None, :, None]
    fv = (v - iv0)[:, None, None]

    data = grid.data.astype(np.float64)
    top = data[iv0][:, ju0] * (1 - fu) + data[iv0][:, ju1] * fu
    bot = data[iv1][:, ju0] * (1 - fu) + data[iv1][:, ju1] * fu
    local = top * (1 - fv) + bot * fv
    return FeatureGrid(t, t, grid.channels, local.astype(np.float32),
                       patch_stride_px=grid.patch_stride_px)


def local_features(window: LocalWindow, grid: FeatureGrid, mode: str,
                   image_id: str = "", response_dir: str | Path | None = None,
                   ) -> FeatureGrid:
    """32x32xC features for one window, from the proxy or an exporter file."""
    if mode == FEATURE_MODE_PROXY:
        return _proxy_features(window, grid)
    if mode == FEATURE_MODE_EXPORTER:
        if response_dir is None:
            raise ValueError("exporter mode needs a response directory")
        request = crop_request(image_id, window)
        path = Path(response_dir) / f"{request['request_id']}.sfg"
        if not path.exists():
            raise PendingCropError(request)
        local = read_feature_grid(path)
        t = window.target_grid_side
        if (local.height_patches, local.width_patches) != (t, t):
            raise ValueError(
                f"{path}: crop response is {local.height_patches}x"
                f"{local.width_patches}, expected {t}x{t}")
        return local
    raise ValueError(f"unknown feature mode {mode!r}")


def _touches_ring(patches: np.ndarray, side: int) -> bool:
    rows = patches // side
    cols = patches % side
    return bool((rows == 0).any() or (rows == side - 1).any()
                or (cols == 0).any() or (cols == side - 1).any())


def _map_region_to_working(patches: np.ndarray, window: LocalWindow,
                           record: ImageRecord) -> np.ndarray:
    """Paint a local patch region onto the working canvas.

    Local patch cell (i, j) of a t x t grid maps to the half-open pixel
    rectangle [floor(j*side/t), floor((j+1)*side/t)) within the window, so
    cells tile the window exactly even when side is not a multiple of t.
    """
    t = window.target_grid_side
    side = window.side_px
    x0, y0 = window.origin_px
    bounds = (np.arange(t + 1, dtype=np.int64) * side) // t
    repeats = np.diff(bounds)

    local = np.zeros(t * t, dtype=bool)
    local[patches] = True
    block = np.repeat(np.repeat(local.reshape(t, t), repeats, axis=0),
                      repeats, axis=1)
    canvas = np.zeros((record.working_size_px, record.working_size_px), dtype=bool)
    canvas[y0:y0 + side, x0:x0 + side] = block
    return canvas


def recluster_window(window: LocalWindow, grid: FeatureGrid,
                     schedule: ThresholdSchedule, record: ImageRecord,
                     nms: NmsConfig = NmsConfig()) -> list[PseudoLabel]:
    """Re-run clustering + NMS on a local grid; keep interior subregions,
    mapped back into working-image coordinates."""
    t = window.target_grid_side
    if (grid.height_patches, grid.width_patches) != (t, t):
        raise ValueError("local grid does not match the window's target side")

    snapshots = agglomerate(build_graph(grid), schedule)
    # pool and deduplicate at patch resolution: IoU is invariant under the
    # uniform patch->pixel expansion, so NMS decisions match pixel space
    pool: list[tuple[PseudoLabel, np.ndarray]] = []
    for snap in snapshots.snapshots:
        for patches in snap.regions:
            cell = np.zeros(t * t, dtype=bool)
            cell[patches] = True
            lab = PseudoLabel.from_mask(encode_rle(cell.reshape(t, t)),
                                        STAGE_LOCAL, snap.threshold)
            pool.append((lab, patches))
    by_key = {(lab.mask.runs, lab.merge_threshold): patches
              for lab, patches in pool}
    kept = mask_nms([lab for lab, _ in pool], nms)

    survivors: list[PseudoLabel] = []
    for lab in kept:
        patches = by_key[(lab.mask.runs, lab.merge_threshold)]
        if _touches_ring(patches, t):
            continue
        canvas = _map_region_to_working(patches, window, record)
        survivors.append(PseudoLabel.from_mask(
            encode_rle(canvas), STAGE_LOCAL, lab.merge_threshold))
    return survivors


def assemble_initial_labels(large: list[PseudoLabel],
                            local_survivors: list[PseudoLabel],
                            cfg: NmsConfig = NmsConfig()) -> list[PseudoLabel]:
    """Union of the large candidates and local survivors, deduplicated once."""
    return mask_nms(list(large) + list(local_survivors), cfg)
