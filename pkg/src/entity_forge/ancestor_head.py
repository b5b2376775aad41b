"""Ancestor-relation prediction head: forward, BCE loss, analytic gradients.

The head scores "row j is an ancestor of column i" for every ordered pair
of queries by passing the query features through two different linear
maps (the relation is asymmetric, so the two sides must not share
weights) and taking a scaled product:

    scores = sigmoid((Q Wa)(Q Wd)^T / sqrt(C))

with Wa the ancestor-side projection and Wd the descendant-side one.
Training supervision is a mean binary cross-entropy against a binary
target matrix; the diagonal is trained toward zero (nothing is its own
ancestor) and ignored at reconstruction time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-12  # clamp before logs; keeps 0/1 targets finite


@dataclass(frozen=True)
class AncestorHead:
    """Two C x C projections, ancestor side and descendant side."""

    ancestor_proj: np.ndarray
    descendant_proj: np.ndarray

    def __post_init__(self):
        wa = np.asarray(self.ancestor_proj, dtype=np.float64)
        wd = np.asarray(self.descendant_proj, dtype=np.float64)
        if wa.ndim != 2 or wa.shape[0] != wa.shape[1] or wa.shape != wd.shape:
            raise ValueError("projections must be square and equally sized")
        if not (np.isfinite(wa).all() and np.isfinite(wd).all()):
            raise ValueError("non-finite projection weights")
        object.__setattr__(self, "ancestor_proj", wa)
        object.__setattr__(self, "descendant_proj", wd)

    @property
    def channels(self) -> int:
        return self.ancestor_proj.shape[0]

    @classmethod
    def zeros(cls, channels: int) -> "AncestorHead":
        z = np.zeros((channels, channels))
        return cls(z, z.copy())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(head: AncestorHead, queries: np.ndarray) -> np.ndarray:
    """N x N ancestor probabilities for N query feature rows."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != head.channels:
        raise ValueError(f"queries must be N x {head.channels}")
    a = q @ head.ancestor_proj
    d = q @ head.descendant_proj
    return _sigmoid(a @ d.T / np.sqrt(head.channels))


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all N^2 entries of the binary cross-entropy."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p)))


def backward(head: AncestorHead, queries: np.ndarray, target: np.ndarray,
             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of bce_loss(forward(head, queries), target).

    Returns (d_ancestor_proj, d_descendant_proj, d_queries). The sigmoid
    and BCE derivatives cancel to (pred - target) / N^2 at the logits.
    """
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    n = q.shape[0]
    if t.shape != (n, n):
        raise ValueError("target must be N x N")
    scale = 1.0 / np.sqrt(head.channels)
    a = q @ head.ancestor_proj
    d = q @ head.descendant_proj
    pred = _sigmoid(a @ d.T * scale)

    g = (pred - t) / (n * n)  # dLoss/dLogits
    da = g @ d * scale
    dd = g.T @ a * scale
    d_wa = q.T @ da
    d_wd = q.T @ dd
    d_q = da @ head.ancestor_proj.T + dd @ head.descendant_proj.T
    return d_wa, d_wd, d_q
