"""Teacher-student bookkeeping: EMA parameter updates, the area-dependent
score threshold, teacher pseudo-label filtering, and loss composition.

Only the non-neural machinery lives here; the models themselves are
opaque parameter vectors and opaque scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorio import PseudoLabel


@dataclass(frozen=True)
class EmaConfig:
    momentum: float = 0.9995

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")


@dataclass(frozen=True)
class DynamicThresholdParams:
    """Score cutoffs for the smallest and largest masks, plus the sharpness
    exponent that interpolates between them by mask area ratio."""

    theta_small: float = 0.3
    theta_large: float = 0.7
    gamma: float = 200.0

    def __post_init__(self):
        if not 0.0 < self.theta_small < self.theta_large < 1.0:
            raise ValueError("need 0 < theta_small < theta_large < 1")
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")


@dataclass(frozen=True)
class LossReport:
    loss_initial: float
    loss_teacher: float
    total: float

    def __post_init__(self):
        if self.total != self.loss_initial + self.loss_teacher:
            raise ValueError("total must be the equal-weight sum")


def ema_update(teacher: np.ndarray, student: np.ndarray,
               cfg: EmaConfig = EmaConfig()) -> np.ndarray:
    """Elementwise m * teacher + (1 - m) * student."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError("teacher/student length mismatch")
    m = cfg.momentum
    return m * teacher + (1.0 - m) * student


def dynamic_threshold(area_ratio: float,
                      params: DynamicThresholdParams = DynamicThresholdParams(),
                      ) -> float:
    """Score cutoff for a mask occupying the given fraction of the image.

    Rises from theta_small toward theta_large as (1 - (1-a)^gamma); the
    closed interval [0, 1] is accepted so that empty and full-image
    predictions evaluate at the exact limits.
    """
    if not 0.0 <= area_ratio <= 1.0:
        raise ValueError(f"area ratio {area_ratio} outside [0, 1]")
    rise = 1.0 - (1.0 - area_ratio) ** params.gamma
    return rise * (params.theta_large - params.theta_small) + params.theta_small


def filter_teacher_labels(predictions: list[PseudoLabel], image_area_px: int,
                          params: DynamicThresholdParams = DynamicThresholdParams(),
                          ) -> list[PseudoLabel]:
    """Keep predictions whose score strictly exceeds their area's cutoff."""
    kept = []
    for lab in predictions:
        if lab.score is None:
            raise ValueError("teacher prediction without a score")
        if lab.score > dynamic_threshold(lab.area_px / image_area_px, params):
            kept.append(lab)
    return kept


def compose_losses(loss_initial: float, loss_teacher: float) -> LossReport:
    """Equal-weight total of the two supervision terms."""
    if loss_initial < 0.0 or loss_teacher < 0.0:
        raise ValueError("loss terms must be nonnegative")
    return LossReport(loss_initial, loss_teacher, loss_initial + loss_teacher)
