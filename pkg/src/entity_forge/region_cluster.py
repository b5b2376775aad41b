"""Bottom-up agglomerative clustering of patches into regions.

Seed regions are single patches. Each iteration merges the adjacent pair
with the highest cosine feature similarity; a merged region's feature is
the sum of its members' feature vectors (cosine of sums equals cosine of
the area-weighted means, so sums are kept directly). Whenever the best
remaining similarity drops below the next unfired threshold of the
schedule, the current partition is snapshotted. Merging stops once the
last threshold has fired.

Determinism: equal similarities are broken by the lexicographically
smallest (min_id, max_id) pair, and every merged region receives a fresh
monotonically increasing id, so a run is reproducible merge for merge.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .tensorio import (
    STAGE_GLOBAL,
    FeatureGrid,
    ImageRecord,
    PseudoLabel,
    encode_rle,
)

DEFAULT_THRESHOLDS = (0.6, 0.5, 0.4, 0.3, 0.2, 0.1)


@dataclass(frozen=True)
class ThresholdSchedule:
    """Strictly decreasing merge-stop thresholds in (0, 1)."""

    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if not t:
            raise ValueError("schedule must be nonempty")
        if any(not 0.0 < x < 1.0 for x in t):
            raise ValueError("thresholds must lie in (0, 1)")
        if any(a <= b for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly decreasing")
        object.__setattr__(self, "thresholds", t)


@dataclass
class Region:
    """One alive cluster: area in patches plus summed feature vector."""

    id: int
    area_patches: int
    feature_sum: np.ndarray
    norm: float  # cached ||feature_sum||


@dataclass
class RegionGraph:
    """Mutable clustering state for one image; single-writer."""

    height_patches: int
    width_patches: int
    patch_stride_px: int
    uf_parent: list[int]
    uf_size: list[int]
    regions: dict[int, Region]  # alive regions only
    adjacency: dict[int, set[int]]
    heap: list[tuple[float, int, int]]  # (-similarity, min_id, max_id)
    root_region: dict[int, int]  # union-find root patch -> region id
    region_root: dict[int, int]  # region id -> union-find root patch
    next_id: int
    merge_log: list[tuple[int, int, int]] = field(default_factory=list)

    def find(self, p: int) -> int:
        parent = self.uf_parent
        while parent[p] != p:
            parent[p] = parent[parent[p]]
            p = parent[p]
        return p


@dataclass(frozen=True)
class Snapshot:
    """The partition recorded at one threshold: patch indices per region."""

    threshold: float
    regions: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class SnapshotSet:
    height_patches: int
    width_patches: int
    patch_stride_px: int
    snapshots: tuple[Snapshot, ...]


def cosine_similarity(f: np.ndarray, g: np.ndarray) -> float:
    """(f.g) / (|f||g|), or 0.0 if either vector has zero norm."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {g.shape}")
    nf = float(np.linalg.norm(f))
    ng = float(np.linalg.norm(g))
    if nf == 0.0 or ng == 0.0:
        return 0.0
    return float(np.dot(f, g)) / (nf * ng)


def _pair_similarity(a: Region, b: Region) -> float:
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    return float(np.dot(a.feature_sum, b.feature_sum)) / (a.norm * b.norm)


def build_graph(grid: FeatureGrid) -> RegionGraph:
    """One region per patch, 4-connectivity edges, heap primed with all pairs."""
    h, w = grid.height_patches, grid.width_patches
    n = h * w
    feats = grid.data.reshape(n, grid.channels).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)

    regions = {i: Region(i, 1, feats[i], float(norms[i])) for i in range(n)}
    adjacency: dict[int, set[int]] = {i: set() for i in range(n)}
    heap: list[tuple[float, int, int]] = []
    for r in range(h):
        base = r * w
        for c in range(w):
            i = base + c
            if c + 1 < w:
                adjacency[i].add(i + 1)
                adjacency[i + 1].add(i)
                heap.append((-_pair_similarity(regions[i], regions[i + 1]), i, i + 1))
            if r + 1 < h:
                adjacency[i].add(i + w)
                adjacency[i + w].add(i)
                heap.append((-_pair_similarity(regions[i], regions[i + w]), i, i + w))
    heapq.heapify(heap)
    return RegionGraph(
        height_patches=h, width_patches=w, patch_stride_px=grid.patch_stride_px,
        uf_parent=list(range(n)), uf_size=[1] * n,
        regions=regions, adjacency=adjacency, heap=heap,
        root_region={i: i for i in range(n)},
        region_root={i: i for i in range(n)},
        next_id=n,
    )


def _take_snapshot(graph: RegionGraph, threshold: float) -> Snapshot:
    n = graph.height_patches * graph.width_patches
    members: dict[int, list[int]] = {}
    for p in range(n):
        rid = graph.root_region[graph.find(p)]
        members.setdefault(rid, []).append(p)
    parts = tuple(np.asarray(members[rid], dtype=np.int64)
                  for rid in sorted(members))
    return Snapshot(threshold=threshold, regions=parts)


def _merge(graph: RegionGraph, a: int, b: int) -> int:
    """Merge alive regions a < b into a fresh region; returns its id."""
    ra, rb = graph.regions.pop(a), graph.regions.pop(b)
    k = graph.next_id
    graph.next_id += 1
    fsum = ra.feature_sum + rb.feature_sum
    graph.regions[k] = Region(k, ra.area_patches + rb.area_patches,
                              fsum, float(np.linalg.norm(fsum)))

    # union the patch sets, then point the surviving root at region k
    pa, pb = graph.region_root[a], graph.region_root[b]
    if graph.uf_size[pa] < graph.uf_size[pb]:
        pa, pb = pb, pa
    graph.uf_parent[pb] = pa
    graph.uf_size[pa] += graph.uf_size[pb]
    del graph.root_region[pb]
    graph.root_region[pa] = k
    del graph.region_root[a]
    del graph.region_root[b]
    graph.region_root[k] = pa

    neighbors = (graph.adjacency.pop(a) | graph.adjacency.pop(b)) - {a, b}
    graph.adjacency[k] = neighbors
    merged = graph.regions[k]
    for n_id in neighbors:
        adj = graph.adjacency[n_id]
        adj.discard(a)
        adj.discard(b)
        adj.add(k)
        heapq.heappush(graph.heap,
                       (-_pair_similarity(merged, graph.regions[n_id]), n_id, k))
    graph.merge_log.append((a, b, k))
    return k


def _best_pair(graph: RegionGraph) -> tuple[float, int, int] | None:
    """Top of the heap after discarding entries whose regions were merged away."""
    heap = graph.heap
    alive = graph.regions
    while heap:
        neg_sim, a, b = heap[0]
        if a in alive and b in alive:
            return (-neg_sim, a, b)
        heapq.heappop(heap)
    return None


def agglomerate(graph: RegionGraph, schedule: ThresholdSchedule) -> SnapshotSet:
    """Merge best pairs, snapshotting whenever the best similarity falls
    below the next scheduled threshold; stops after the last threshold."""
    thresholds = schedule.thresholds
    snapshots: list[Snapshot] = []
    fired = 0
    while True:
        top = _best_pair(graph)
        best = top[0] if top is not None else float("-inf")
        while fired < len(thresholds) and best < thresholds[fired]:
            snapshots.append(_take_snapshot(graph, thresholds[fired]))
            fired += 1
        if fired == len(thresholds):
            break
        _merge(graph, top[1], top[2])
    return SnapshotSet(graph.height_patches, graph.width_patches,
                       graph.patch_stride_px, tuple(snapshots))


def regions_to_masks(snapshot: Snapshot, snapshot_set: SnapshotSet,
                     record: ImageRecord) -> list[PseudoLabel]:
    """Expand one snapshot's patch partition into working-resolution labels."""
    h, w = snapshot_set.height_patches, snapshot_set.width_patches
    stride = snapshot_set.patch_stride_px
    size = record.working_size_px
    if size != h * stride or size != w * stride:
        raise ValueError(
            f"working size {size} does not match {h}x{w} patches at stride {stride}")

    label_grid = np.full(h * w, -1, dtype=np.int64)
    for idx, patches in enumerate(snapshot.regions):
        label_grid[patches] = idx
    pixel_grid = np.repeat(np.repeat(label_grid.reshape(h, w), stride, axis=0),
                           stride, axis=1)
    out = []
    for idx in range(len(snapshot.regions)):
        mask = encode_rle(pixel_grid == idx)
        out.append(PseudoLabel.from_mask(mask, STAGE_GLOBAL, snapshot.threshold))
    return out
