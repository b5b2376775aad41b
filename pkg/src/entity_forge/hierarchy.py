"""Hierarchy analysis over pseudo-labels.

Forward direction: pairwise pixel-coverage tests turn a flat label set
into a forest whose roots are whole entities and whose descendants are
parts. Label j is an ancestor of label i when at least the coverage
fraction of i's pixels lie inside j while j is not likewise covered by i;
the smallest ancestor by area is the direct parent.

Inverse direction: given a predicted ancestor matrix (row j, column i
scoring "j is an ancestor of i"), binarize, repair any cycles by deleting
the least-confident offending edges, and read the forest back off the
resulting DAG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import (
    PseudoLabel,
    RleMask,
    bbox_intersection_area,
    coverage_fraction,
)


@dataclass(frozen=True)
class CoverageConfig:
    cover_fraction: float = 0.9

    def __post_init__(self):
        if not 0.5 < self.cover_fraction <= 1.0:
            raise ValueError("cover_fraction must lie in (0.5, 1]")


@dataclass(frozen=True)
class HierarchyForest:
    """Parent links plus the per-label ancestor sets they were derived from."""

    parent: tuple[int | None, ...]
    ancestor_sets: tuple[frozenset[int], ...]

    def __post_init__(self):
        for i, p in enumerate(self.parent):
            if p is not None and p not in self.ancestor_sets[i]:
                raise ValueError(f"parent of {i} not in its ancestor set")
        # parent links must be acyclic
        for start in range(len(self.parent)):
            seen = set()
            node = start
            while self.parent[node] is not None:
                node = self.parent[node]
                if node in seen or node == start:
                    raise ValueError("cycle in parent links")
                seen.add(node)

    @property
    def roots(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.parent) if p is None)


def coverage(inner: RleMask, outer: RleMask) -> float:
    """Fraction of inner's pixels that are also outer's: |i & j| / |i|."""
    return coverage_fraction(inner, outer)


def build_forest(labels: list[PseudoLabel],
                 cfg: CoverageConfig = CoverageConfig()) -> HierarchyForest:
    n = len(labels)
    cf = cfg.cover_fraction
    ancestors: list[set[int]] = [set() for _ in range(n)]

    for i in range(n):
        area_i = labels[i].area_px
        if area_i == 0:
            continue
        for j in range(n):
            if i == j or labels[j].area_px == 0:
                continue
            # the bbox overlap caps |i & j|, so it caps both coverages
            ub = bbox_intersection_area(labels[i].bbox, labels[j].bbox)
            if ub < cf * area_i:
                continue
            if (coverage(labels[i].mask, labels[j].mask) >= cf
                    and coverage(labels[j].mask, labels[i].mask) < cf):
                ancestors[i].add(j)

    parent: list[int | None] = []
    for i in range(n):
        if ancestors[i]:
            parent.append(min(ancestors[i],
                              key=lambda j: (labels[j].area_px, j)))
        else:
            parent.append(None)
    return HierarchyForest(tuple(parent),
                           tuple(frozenset(a) for a in ancestors))


def forest_to_matrix(forest: HierarchyForest) -> np.ndarray:
    """Exact ancestor indicator where entry (j, i) marks j above i."""
    n = len(forest.parent)
    mat = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        node = forest.parent[i]
        while node is not None:
            mat[node, i] = 1.0
            node = forest.parent[node]
    return mat


def _cyclic_edges(edges: set[tuple[int, int]], n: int) -> list[tuple[int, int]]:
    """Edges inside strongly connected components of size > 1 (Tarjan)."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for j, i in edges:
        adj[j].append(i)
    index = [0] * n
    low = [0] * n
    state = [0] * n  # 0 unvisited, 1 on stack, 2 done
    comp = [-1] * n
    counter = [1]
    stack: list[int] = []
    ncomp = [0]

    def strongconnect(v0: int) -> None:
        work = [(v0, 0)]
        while work:
            v, pi = work.pop()
            if pi == 0:
                index[v] = low[v] = counter[0]
                counter[0] += 1
                stack.append(v)
                state[v] = 1
            recurse = False
            for k in range(pi, len(adj[v])):
                u = adj[v][k]
                if state[u] == 0:
                    work.append((v, k + 1))
                    work.append((u, 0))
                    recurse = True
                    break
                if state[u] == 1:
                    low[v] = min(low[v], index[u])
            if recurse:
                continue
            if low[v] == index[v]:
                while True:
                    u = stack.pop()
                    state[u] = 2
                    comp[u] = ncomp[0]
                    if u == v:
                        break
                ncomp[0] += 1
            if work:
                parent_v = work[-1][0]
                low[parent_v] = min(low[parent_v], low[v])

    for v in range(n):
        if state[v] == 0:
            strongconnect(v)
    sizes = np.bincount([c for c in comp], minlength=ncomp[0])
    return [(j, i) for j, i in edges
            if comp[j] == comp[i] and sizes[comp[j]] > 1]


def forest_from_matrix(pred: np.ndarray,
                       binarize_threshold: float = 0.5) -> HierarchyForest:
    """Reconstruct a forest from a predicted ancestor matrix.

    Binarizes strictly above the threshold (diagonal ignored), deletes the
    lowest-scoring in-cycle edge until the relation digraph is acyclic,
    then takes each node's parent to be its deepest claimed ancestor: the
    one with the largest own ancestor set, ties broken by higher score
    then lower index.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] != pred.shape[1]:
        raise ValueError("ancestor matrix must be square")
    n = pred.shape[0]

    edges = {(j, i) for j in range(n) for i in range(n)
             if j != i and pred[j, i] > binarize_threshold}
    while True:
        offenders = _cyclic_edges(edges, n)
        if not offenders:
            break
        edges.discard(min(offenders, key=lambda e: (pred[e[0], e[1]], e)))

    ancestors: list[set[int]] = [set() for _ in range(n)]
    for j, i in edges:
        ancestors[i].add(j)

    parent: list[int | None] = []
    for i in range(n):
        if ancestors[i]:
            parent.append(min(ancestors[i],
                              key=lambda j: (-len(ancestors[j]), -pred[j, i], j)))
        else:
            parent.append(None)
    return HierarchyForest(tuple(parent),
                           tuple(frozenset(a) for a in ancestors))
