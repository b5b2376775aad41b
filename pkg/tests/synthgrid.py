"""Synthetic feature grids with known ground-truth regions.

Regions are produced by recursive guillotine splits (axis-aligned
rectangles), optionally with one pair of adjacent cells merged into an
L-shape. Region features are unit vectors built so that every pair has
cosine similarity exactly 1 - gap (a shared component plus orthonormal
private components), and intra-region similarity 1. Layouts keep the
max/min region area ratio under 9 so no exact region can be suppressed
by any union of regions in a 0.9-IoU NMS.
"""

import numpy as np

from entity_forge.tensorio import (
    FeatureGrid,
    ImageRecord,
    PseudoLabel,
    encode_rle,
    labels_to_json,
    write_feature_grid,
    write_manifest,
)

MAX_AREA_RATIO = 9.0


def guillotine_cells(rng, side, k, min_side):
    """Split a side x side grid into k rectangles (x, y, w, h)."""
    cells = [(0, 0, side, side)]
    while len(cells) < k:
        # split the largest cell that can still be split
        order = sorted(range(len(cells)), key=lambda i: -cells[i][2] * cells[i][3])
        for idx in order:
            x, y, w, h = cells[idx]
            vertical = w >= h
            span = w if vertical else h
            if span < 2 * min_side:
                continue
            lo, hi = min_side, span - min_side
            cut = int(rng.integers(lo, hi + 1))
            # keep splits balanced to bound the area ratio
            cut = int(np.clip(cut, round(0.4 * span), round(0.6 * span)))
            cut = max(lo, min(hi, cut))
            if vertical:
                new = [(x, y, cut, h), (x + cut, y, w - cut, h)]
            else:
                new = [(x, y, w, cut), (x, y + cut, w, h - cut)]
            cells[idx:idx + 1] = new
            break
        else:
            raise ValueError(f"cannot split {side}x{side} into {k} cells "
                             f"with min side {min_side}")
    return cells


def cells_to_label_grid(cells, side, merge_l=False, rng=None):
    """Rasterize cells to a per-patch region-id grid, optionally merging
    one adjacent pair into an L-shaped region."""
    grid = np.full((side, side), -1, dtype=np.int64)
    for rid, (x, y, w, h) in enumerate(cells):
        grid[y:y + h, x:x + w] = rid
    if merge_l and len(cells) > 1 and rng is not None:
        areas = [w * h for (_, _, w, h) in cells]
        pairs = []
        for a in range(len(cells)):
            for b in range(a + 1, len(cells)):
                xa, ya, wa, ha = cells[a]
                xb, yb, wb, hb = cells[b]
                touch_x = xa + wa == xb or xb + wb == xa
                touch_y = ya + ha == yb or yb + hb == ya
                overlap_y = min(ya + ha, yb + hb) > max(ya, yb)
                overlap_x = min(xa + wa, xb + wb) > max(xa, xb)
                if (touch_x and overlap_y) or (touch_y and overlap_x):
                    merged = areas[a] + areas[b]
                    rest = [areas[i] for i in range(len(cells)) if i not in (a, b)]
                    if not rest or merged / min(rest) < MAX_AREA_RATIO:
                        pairs.append((a, b))
        if pairs:
            a, b = pairs[int(rng.integers(0, len(pairs)))]
            grid[grid == b] = a
    # compact ids to 0..k-1
    ids = sorted(set(grid.ravel().tolist()))
    remap = {old: new for new, old in enumerate(ids)}
    return np.vectorize(remap.get)(grid), len(ids)


def region_features(rng, k, gap):
    """k unit vectors with pairwise cosine exactly 1 - gap (up to fp)."""
    c = k + 1
    basis, _ = np.linalg.qr(rng.standard_normal((c, c)))
    shared = basis[:, 0]
    private = basis[:, 1:k + 1]
    return (np.sqrt(1.0 - gap) * shared[:, None]
            + np.sqrt(gap) * private).T  # k x c


def make_synthetic(rng, side=64, k=5, gap=1.0, stride=8, min_side=8,
                   merge_l=False):
    """Returns (FeatureGrid, label_grid, gt_labels at working resolution)."""
    for _ in range(40):
        cells = guillotine_cells(rng, side, k if not merge_l else k + 1,
                                 min_side)
        label_grid, count = cells_to_label_grid(cells, side, merge_l, rng)
        areas = np.bincount(label_grid.ravel(), minlength=count)
        if count == k and areas.max() / areas.min() < MAX_AREA_RATIO:
            break
    else:
        raise ValueError("no feasible layout found")

    feats = region_features(rng, k, gap)
    data = feats[label_grid].astype(np.float32)
    grid = FeatureGrid(side, side, feats.shape[1], data, patch_stride_px=stride)

    gt = []
    for rid in range(k):
        dense = np.repeat(np.repeat(label_grid == rid, stride, 0), stride, 1)
        gt.append(PseudoLabel.from_mask(encode_rle(dense), "refined", 0.5))
    return grid, label_grid, gt


def write_synthetic_dataset(rng, root, image_ids, image_specs=None, **kwargs):
    """SFG1 files + manifest + ground-truth label JSONs for a batch.

    image_specs optionally maps image_id -> make_synthetic kwargs; kwargs
    apply to every image otherwise.
    """
    feat_dir = root / "features"
    gt_dir = root / "gt"
    feat_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    records = []
    gts = {}
    for image_id in image_ids:
        spec = image_specs[image_id] if image_specs else kwargs
        grid, _, gt = make_synthetic(rng, **spec)
        path = feat_dir / f"{image_id}.sfg"
        write_feature_grid(path, grid)
        size = grid.height_patches * grid.patch_stride_px
        records.append(ImageRecord(image_id, str(path), size, size,
                                   working_size_px=size))
        (gt_dir / f"{image_id}.json").write_text(
            labels_to_json(image_id, gt, [None] * len(gt)))
        gts[image_id] = gt
    manifest = root / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest, gt_dir, gts
