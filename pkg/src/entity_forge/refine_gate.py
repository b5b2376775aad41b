"""Boundary refinement with a keep/drop gate on pre/post IoU.

The builtin refiner is deliberately simple morphology (3x3 closing, then
3x3 opening, then hole filling); an external neural refiner can be hooked
in through a request/response file exchange instead. Labels whose mask
changes too much under refinement are treated as noisy and dropped.

Border convention for the morphology: dilation treats pixels outside the
image as off, erosion treats them as on, so a mask flush against the
image edge is not eaten from that side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensorio import (
    STAGE_REFINED,
    PseudoLabel,
    RleMask,
    decode_rle,
    encode_rle,
    mask_bbox,
    mask_iou,
)

REFINER_BUILTIN = "builtin_morph"
REFINER_EXTERNAL = "external"


class PendingRefineError(RuntimeError):
    """External refinement requested before the response file exists."""

    def __init__(self, request: dict):
        super().__init__(f"missing refine response for {request['image_id']}"
                         f"#{request['label_index']}")
        self.request = request


@dataclass(frozen=True)
class RefineConfig:
    refiner: str = REFINER_BUILTIN
    iou_keep_threshold: float = 0.5
    external_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.iou_keep_threshold <= 1.0:
            raise ValueError("iou_keep_threshold must lie in (0, 1]")
        if self.refiner not in (REFINER_BUILTIN, REFINER_EXTERNAL):
            raise ValueError(f"unknown refiner {self.refiner!r}")
        if self.refiner == REFINER_EXTERNAL and self.external_dir is None:
            raise ValueError("external refiner needs external_dir")


def _dilate3(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=False)
    out = np.zeros_like(mask)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out |= padded[dr:dr + mask.shape[0], dc:dc + mask.shape[1]]
    return out


def _erode3(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=True)
    out = np.ones_like(mask)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out &= padded[dr:dr + mask.shape[0], dc:dc + mask.shape[1]]
    return out


def _fill_holes(mask: np.ndarray) -> np.ndarray:
    # a hole is a background component with no path (4-connected) to the border
    return ndimage.binary_fill_holes(mask)


def builtin_refine(dense: np.ndarray) -> np.ndarray:
    closed = _erode3(_dilate3(dense))
    opened = _dilate3(_erode3(closed))
    return _fill_holes(opened)


def refine_request_id(image_id: str, label_index: int) -> str:
    return f"{image_id}__{label_index:04d}"


def write_refine_requests(path: str | Path, image_id: str, count: int) -> None:
    lines = [json.dumps({"image_id": image_id, "label_index": i})
             for i in range(count)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _external_refine(mask: RleMask, cfg: RefineConfig, image_id: str,
                     label_index: int) -> RleMask:
    request = {"image_id": image_id, "label_index": label_index,
               "request_id": refine_request_id(image_id, label_index)}
    path = Path(cfg.external_dir) / f"{request['request_id']}.json"
    if not path.exists():
        raise PendingRefineError(request)
    obj = json.loads(path.read_text())
    out = RleMask(int(obj["h"]), int(obj["w"]), tuple(obj["runs"]))
    if (out.height_px, out.width_px) != (mask.height_px, mask.width_px):
        raise ValueError(f"{path}: refined mask dimensions changed")
    return out


def refine_mask(mask: RleMask, cfg: RefineConfig = RefineConfig(),
                image_id: str = "", label_index: int = 0) -> RleMask:
    """Refined version of one mask via the configured refiner."""
    if mask.area == 0:
        raise ValueError("refine_mask requires a nonempty mask")
    if cfg.refiner == REFINER_BUILTIN:
        # the 3x3 ops and hole filling are local to the support: running
        # them on the bbox padded by 2 background pixels is exact (the pad
        # ring keeps closing inside the crop, and any pocket reaching past
        # the bbox meets all-connected background either way)
        dense = decode_rle(mask)
        x, y, w, h = mask_bbox(mask)
        y0, y1 = max(0, y - 2), min(mask.height_px, y + h + 2)
        x0, x1 = max(0, x - 2), min(mask.width_px, x + w + 2)
        refined = np.zeros_like(dense)
        refined[y0:y1, x0:x1] = builtin_refine(dense[y0:y1, x0:x1])
        return encode_rle(refined)
    return _external_refine(mask, cfg, image_id, label_index)


def gate(labels: list[PseudoLabel], cfg: RefineConfig = RefineConfig(),
         image_id: str = "") -> list[PseudoLabel]:
    """Refine every label; keep it (with the refined mask) iff the IoU
    between the original and refined mask reaches the keep threshold."""
    kept: list[PseudoLabel] = []
    for idx, lab in enumerate(labels):
        refined = refine_mask(lab.mask, cfg, image_id=image_id, label_index=idx)
        if mask_iou(lab.mask, refined) >= cfg.iou_keep_threshold:
            kept.append(lab.with_mask(refined, source_stage=STAGE_REFINED))
    return kept
