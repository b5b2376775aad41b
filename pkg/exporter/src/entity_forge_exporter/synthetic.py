"""Synthetic test data: feature grids with known ground-truth regions.

Regions are axis-aligned rectangles from recursive guillotine splits,
optionally with one adjacent pair merged into an L-shape, so every region
is connected and patch-aligned and recovery assertions can be exact.
Region features are unit vectors sharing a common component: every pair
has cosine similarity exactly 1 - gap. Ground truth is emitted in the
pipeline's per-image label JSON schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sfg import write_sfg

# keep max/min region area under this so exact regions survive a 0.9-IoU
# NMS against any union of regions
MAX_AREA_RATIO = 9.0


@dataclass(frozen=True)
class SyntheticSpec:
    height_patches: int = 64
    width_patches: int = 64
    regions: int = 5
    seed: int = 0
    gap: float = 1.0
    patch_stride_px: int = 8
    min_region_side: int = 8
    l_shape: bool = False

    def __post_init__(self):
        if self.regions < 1:
            raise ValueError("need at least one region")
        if not 0.0 < self.gap <= 1.0:
            raise ValueError("gap must lie in (0, 1]")
        if min(self.height_patches, self.width_patches) < 1:
            raise ValueError("grid dims must be >= 1")


def _guillotine(rng, height, width, k, min_side):
    cells = [(0, 0, width, height)]
    while len(cells) < k:
        order = sorted(range(len(cells)), key=lambda i: -cells[i][2] * cells[i][3])
        for idx in order:
            x, y, w, h = cells[idx]
            vertical = w >= h
            span = w if vertical else h
            if span < 2 * min_side:
                continue
            cut = int(rng.integers(min_side, span - min_side + 1))
            cut = int(np.clip(cut, round(0.4 * span), round(0.6 * span)))
            cut = max(min_side, min(span - min_side, cut))
            if vertical:
                cells[idx:idx + 1] = [(x, y, cut, h), (x + cut, y, w - cut, h)]
            else:
                cells[idx:idx + 1] = [(x, y, w, cut), (x, y + cut, w, h - cut)]
            break
        else:
            raise ValueError(
                f"cannot place {k} regions with min side {min_side} "
                f"on a {height}x{width} grid")
    return cells


def _merge_one_pair(rng, grid, cells):
    areas = [w * h for (_, _, w, h) in cells]
    candidates = []
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            xa, ya, wa, ha = cells[a]
            xb, yb, wb, hb = cells[b]
            share_v = (xa + wa == xb or xb + wb == xa) and \
                min(ya + ha, yb + hb) > max(ya, yb)
            share_h = (ya + ha == yb or yb + hb == ya) and \
                min(xa + wa, xb + wb) > max(xa, xb)
            if not (share_v or share_h):
                continue
            rest = [areas[i] for i in range(len(cells)) if i not in (a, b)]
            if not rest or (areas[a] + areas[b]) / min(rest) < MAX_AREA_RATIO:
                candidates.append((a, b))
    if candidates:
        a, b = candidates[int(rng.integers(0, len(candidates)))]
        grid[grid == b] = a
    return grid


def _region_features(rng, k, gap):
    c = k + 1
    basis, _ = np.linalg.qr(rng.standard_normal((c, c)))
    return (np.sqrt(1.0 - gap) * basis[:, :1]
            + np.sqrt(gap) * basis[:, 1:k + 1]).T


def gen_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Returns (features (h, w, c) float32, label grid (h, w), gt entries).

    The gt entries follow the pipeline's label JSON schema (RLE masks at
    working resolution). Inter-region cosine similarities are verified
    numerically against the declared gap before returning.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.regions
    want = k + 1 if spec.l_shape and k > 1 else k
    for _ in range(60):
        cells = _guillotine(rng, spec.height_patches, spec.width_patches,
                            want, spec.min_region_side)
        grid = np.full((spec.height_patches, spec.width_patches), -1,
                       dtype=np.int64)
        for rid, (x, y, w, h) in enumerate(cells):
            grid[y:y + h, x:x + w] = rid
        if want > k:
            grid = _merge_one_pair(rng, grid, cells)
        ids = sorted(set(grid.ravel().tolist()))
        grid = np.vectorize({old: new for new, old in enumerate(ids)}.get)(grid)
        areas = np.bincount(grid.ravel(), minlength=len(ids))
        if len(ids) == k and areas.max() / areas.min() < MAX_AREA_RATIO:
            break
    else:
        raise ValueError("no feasible layout found for the spec")

    feats = _region_features(rng, k, spec.gap)
    sims = feats @ feats.T
    off_diag = sims[~np.eye(k, dtype=bool)]
    if k > 1 and not np.all(off_diag <= 1.0 - spec.gap + 1e-9):
        raise AssertionError("generated features violate the declared gap")

    data = feats[grid].astype(np.float32)
    gt = [_gt_entry(grid, rid, spec.patch_stride_px) for rid in range(k)]
    return data, grid, gt


def _gt_entry(label_grid: np.ndarray, rid: int, stride: int) -> dict:
    dense = np.repeat(np.repeat(label_grid == rid, stride, 0), stride, 1)
    flat = dense.ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    rows, cols = np.nonzero(dense)
    return {
        "mask": {"h": dense.shape[0], "w": dense.shape[1], "runs": runs},
        "area": int(dense.sum()),
        "bbox": [int(cols.min()), int(rows.min()),
                 int(cols.max() - cols.min() + 1),
                 int(rows.max() - rows.min() + 1)],
        "stage": "refined",
        "threshold": 0.5,
    }


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path,
                    image_id: str) -> dict:
    """SFG1 + ground-truth JSON + manifest record for one synthetic image."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    data, _, gt = gen_synthetic(spec)
    sfg_path = out / "features" / f"{image_id}.sfg"
    write_sfg(sfg_path, data, patch_stride_px=spec.patch_stride_px)
    (out / "gt" / f"{image_id}.json").write_text(
        json.dumps({"image_id": image_id, "labels": gt},
                   sort_keys=True, separators=(",", ":")))
    size = spec.height_patches * spec.patch_stride_px
    return {
        "image_id": image_id,
        "feature_path": str(sfg_path),
        "original_height_px": size,
        "original_width_px": size,
        "working_size_px": size,
    }


def write_synthetic_batch(specs: dict[str, SyntheticSpec],
                          out_dir: str | Path) -> Path:
    records = [write_synthetic(spec, out_dir, image_id)
               for image_id, spec in specs.items()]
    manifest = Path(out_dir) / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n"
                                for r in records))
    return manifest
