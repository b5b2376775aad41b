"""File formats and mask arithmetic shared by every pipeline stage.

Three things live here:

* the SFG1 binary feature-grid format (magic ``SFG1`` | u32 h | u32 w |
  u32 c | u32 patch_stride_px | h*w*c little-endian f32, patch-row-major,
  channel-fastest),
* run-length encoded binary masks with run-based intersection / union,
* the JSON schemas for dataset manifests and per-image pseudo-label files.

Everything is immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

SFG_MAGIC = b"SFG1"

STAGE_GLOBAL = "global"
STAGE_LOCAL = "local"
STAGE_REFINED = "refined"
_STAGES = (STAGE_GLOBAL, STAGE_LOCAL, STAGE_REFINED)


class FormatError(ValueError):
    """Base class for malformed on-disk data."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


class ZeroDimensionError(FormatError):
    pass


class CorruptMaskError(FormatError):
    pass


@dataclass(frozen=True)
class FeatureGrid:
    """Per-patch feature vectors for one image, shape (h, w, c) float32."""

    height_patches: int
    width_patches: int
    channels: int
    data: np.ndarray
    patch_stride_px: int = 8

    def __post_init__(self):
        h, w, c = self.height_patches, self.width_patches, self.channels
        if min(h, w, c) < 1 or self.patch_stride_px < 1:
            raise ZeroDimensionError(f"zero dimension in grid header ({h}, {w}, {c})")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(h, w, c)
        if not np.isfinite(data).all():
            raise NonFiniteValueError("feature grid contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class RleMask:
    """Binary mask stored as alternating off/on run lengths, off-run first.

    Canonical form: only the leading off-run may be zero, so every dense
    mask has exactly one encoding.
    """

    height_px: int
    width_px: int
    runs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(int(r) for r in self.runs))
        if min(self.height_px, self.width_px) < 1:
            raise ZeroDimensionError("mask dimensions must be >= 1")
        if any(r < 0 for r in self.runs):
            raise CorruptMaskError("negative run length")
        if sum(self.runs) != self.height_px * self.width_px:
            raise CorruptMaskError(
                f"run sum {sum(self.runs)} != {self.height_px * self.width_px} pixels"
            )

    @property
    def area(self) -> int:
        return sum(self.runs[1::2])


@dataclass(frozen=True)
class ImageRecord:
    """One manifest entry: where the features live and the image geometry."""

    image_id: str
    feature_path: str
    original_height_px: int
    original_width_px: int
    working_size_px: int = 1024


@dataclass(frozen=True)
class PseudoLabel:
    """A candidate mask plus provenance, the unit flowing through all stages."""

    mask: RleMask
    area_px: int
    bbox: tuple[int, int, int, int]
    source_stage: str
    merge_threshold: float
    score: float | None = None

    def __post_init__(self):
        if self.source_stage not in _STAGES:
            raise ValueError(f"unknown stage {self.source_stage!r}")
        if self.area_px != self.mask.area:
            raise ValueError("area_px does not match mask")
        if tuple(self.bbox) != mask_bbox(self.mask):
            raise ValueError("bbox is not the tight bounding box of the mask")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError("score out of [0, 1]")

    @classmethod
    def from_mask(cls, mask: RleMask, source_stage: str, merge_threshold: float,
                  score: float | None = None) -> "PseudoLabel":
        return cls(mask=mask, area_px=mask.area, bbox=mask_bbox(mask),
                   source_stage=source_stage, merge_threshold=merge_threshold,
                   score=score)

    def with_mask(self, mask: RleMask, source_stage: str | None = None) -> "PseudoLabel":
        return replace(self, mask=mask, area_px=mask.area, bbox=mask_bbox(mask),
                       source_stage=source_stage or self.source_stage)


PseudoLabelSet = list  # list[PseudoLabel]; per-image, order is meaningful


# ---------------------------------------------------------------------------
# SFG1 codec
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")


def write_feature_grid(path: str | Path, grid: FeatureGrid) -> None:
    payload = _HEADER.pack(SFG_MAGIC, grid.height_patches, grid.width_patches,
                           grid.channels, grid.patch_stride_px)
    payload += grid.data.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(payload)


def read_feature_grid(path: str | Path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != SFG_MAGIC:
        raise BadMagicError(f"{path}: not an SFG1 file")
    _, h, w, c, stride = _HEADER.unpack_from(raw)
    if min(h, w, c) < 1 or stride < 1:
        raise ZeroDimensionError(f"{path}: zero dimension in header ({h}, {w}, {c})")
    expected = _HEADER.size + 4 * h * w * c
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    if not np.isfinite(data).all():
        raise NonFiniteValueError(f"{path}: non-finite feature value")
    return FeatureGrid(h, w, c, data, patch_stride_px=stride)


# ---------------------------------------------------------------------------
# RLE codec and run-based mask arithmetic
# ---------------------------------------------------------------------------

def encode_rle(dense_mask: np.ndarray) -> RleMask:
    """Encode a 2-D bit grid into canonical off-first run lengths."""
    dense = np.asarray(dense_mask, dtype=bool)
    if dense.ndim != 2 or min(dense.shape) < 1:
        raise ZeroDimensionError("dense mask must be 2-D with dims >= 1")
    flat = dense.ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return RleMask(dense.shape[0], dense.shape[1], tuple(int(r) for r in runs))


def decode_rle(mask: RleMask) -> np.ndarray:
    """Decode to a dense bool grid; run-sum mismatch raises CorruptMaskError."""
    runs = np.asarray(mask.runs, dtype=np.int64)
    values = (np.arange(runs.size) % 2).astype(bool)
    flat = np.repeat(values, runs)
    return flat.reshape(mask.height_px, mask.width_px)


def _on_intervals(mask: RleMask) -> list[tuple[int, int]]:
    out = []
    pos = 0
    for k, r in enumerate(mask.runs):
        if k & 1 and r:
            out.append((pos, pos + r))
        pos += r
    return out


def intersection_area(a: RleMask, b: RleMask) -> int:
    """On-pixel overlap computed directly on runs (no dense decode)."""
    ia, ib = _on_intervals(a), _on_intervals(b)
    total = 0
    i = j = 0
    while i < len(ia) and j < len(ib):
        s0, e0 = ia[i]
        s1, e1 = ib[j]
        lo = s0 if s0 > s1 else s1
        hi = e0 if e0 < e1 else e1
        if hi > lo:
            total += hi - lo
        if e0 <= e1:
            i += 1
        else:
            j += 1
    return total


def mask_iou(a: RleMask, b: RleMask) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty."""
    if (a.height_px, a.width_px) != (b.height_px, b.width_px):
        raise ValueError("mask dimension mismatch")
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 1.0
    return inter / union


def coverage_fraction(inner: RleMask, outer: RleMask) -> float:
    """Fraction of inner's on-pixels that also lie in outer."""
    if (inner.height_px, inner.width_px) != (outer.height_px, outer.width_px):
        raise ValueError("mask dimension mismatch")
    area = inner.area
    if area == 0:
        raise ValueError("coverage of an empty mask is undefined")
    return intersection_area(inner, outer) / area


def mask_bbox(mask: RleMask) -> tuple[int, int, int, int]:
    """Tight (x, y, w, h) bounding box; (0, 0, 0, 0) for an empty mask."""
    w = mask.width_px
    x0, y0, x1, y1 = w, mask.height_px, -1, -1
    for s, e in _on_intervals(mask):
        r0, c0 = divmod(s, w)
        r1, c1 = divmod(e - 1, w)
        y0 = min(y0, r0)
        y1 = max(y1, r1)
        if r1 > r0:
            x0, x1 = 0, w - 1
        else:
            x0 = min(x0, c0)
            x1 = max(x1, c1)
    if x1 < 0:
        return (0, 0, 0, 0)
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def bbox_intersection_area(a: tuple[int, int, int, int],
                           b: tuple[int, int, int, int]) -> int:
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0
    return iw * ih


# ---------------------------------------------------------------------------
# Manifest and pseudo-label JSON
# ---------------------------------------------------------------------------

def read_manifest(path: str | Path) -> list[ImageRecord]:
    records = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            records.append(ImageRecord(
                image_id=str(obj["image_id"]),
                feature_path=str(obj["feature_path"]),
                original_height_px=int(obj["original_height_px"]),
                original_width_px=int(obj["original_width_px"]),
                working_size_px=int(obj["working_size_px"]),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
    return records


def write_manifest(path: str | Path, records: list[ImageRecord]) -> None:
    lines = []
    for r in records:
        lines.append(json.dumps({
            "image_id": r.image_id,
            "feature_path": r.feature_path,
            "original_height_px": r.original_height_px,
            "original_width_px": r.original_width_px,
            "working_size_px": r.working_size_px,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def labels_to_json(image_id: str, labels: list[PseudoLabel],
                   parents: list[int | None] | None = None) -> str:
    """Serialize one image's labels (plus optional hierarchy) deterministically."""
    entries = []
    for idx, lab in enumerate(labels):
        entry = {
            "mask": {"h": lab.mask.height_px, "w": lab.mask.width_px,
                     "runs": list(lab.mask.runs)},
            "area": lab.area_px,
            "bbox": list(lab.bbox),
            "stage": lab.source_stage,
            "threshold": lab.merge_threshold,
        }
        if lab.score is not None:
            entry["score"] = lab.score
        if parents is not None and parents[idx] is not None:
            entry["parent_index"] = parents[idx]
        entries.append(entry)
    return json.dumps({"image_id": image_id, "labels": entries},
                      sort_keys=True, separators=(",", ":"))


def labels_from_json(text: str) -> tuple[str, list[PseudoLabel], list[int | None]]:
    obj = json.loads(text)
    labels, parents = [], []
    for entry in obj["labels"]:
        m = entry["mask"]
        mask = RleMask(int(m["h"]), int(m["w"]), tuple(m["runs"]))
        labels.append(PseudoLabel(
            mask=mask,
            area_px=int(entry["area"]),
            bbox=tuple(entry["bbox"]),
            source_stage=entry["stage"],
            merge_threshold=float(entry["threshold"]),
            score=float(entry["score"]) if "score" in entry else None,
        ))
        parents.append(entry.get("parent_index"))
    return str(obj["image_id"]), labels, parents
