import numpy as np
import pytest

from entity_forge.self_correct import (
    DynamicThresholdParams,
    EmaConfig,
    LossReport,
    compose_losses,
    dynamic_threshold,
    ema_update,
    filter_teacher_labels,
)
from entity_forge.tensorio import PseudoLabel, encode_rle


def scored_label(area, score, size=64):
    dense = np.zeros((size, size), dtype=bool)
    dense.ravel()[:area] = True
    return PseudoLabel.from_mask(encode_rle(dense), "refined", 0.5, score=score)


class TestEmaUpdate:
    def test_single_step(self):
        out = ema_update(np.array([1.0]), np.array([0.0]), EmaConfig(0.9995))
        assert out[0] == pytest.approx(0.9995, abs=1e-15)

    def test_zero_momentum_invalid_but_limit_copies_student(self):
        out = ema_update(np.array([5.0]), np.array([2.0]), EmaConfig(1e-12))
        assert out[0] == pytest.approx(2.0, abs=1e-9)

    def test_geometric_convergence_closed_form(self):
        m = 0.9995
        student = np.full(3, 0.25)
        teacher = np.array([1.0, -2.0, 0.5])
        initial_err = teacher - student
        for n in (1, 10, 1000):
            t = teacher.copy()
            for _ in range(n):
                t = ema_update(t, student, EmaConfig(m))
            assert np.allclose(t - student, m ** n * initial_err, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ema_update(np.ones(3), np.ones(4))

    def test_momentum_bounds(self):
        with pytest.raises(ValueError):
            EmaConfig(0.0)
        with pytest.raises(ValueError):
            EmaConfig(1.0)


class TestDynamicThreshold:
    def test_tiny_area_gives_theta_small(self):
        assert dynamic_threshold(1e-300) == 0.3

    def test_full_area_gives_theta_large(self):
        assert dynamic_threshold(1.0 - 1e-16) == 0.7
        assert dynamic_threshold(1.0) == 0.7

    def test_one_percent_area_value(self):
        # direct evaluation of 0.3 + (1 - 0.99^200) * 0.4
        want = 0.3 + (1.0 - 0.99 ** 200) * 0.4
        got = dynamic_threshold(0.01)
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.6464081300568154, abs=1e-5)

    def test_strictly_increasing(self):
        # strict growth where float64 can represent it (the curve's rise
        # saturates at theta_large well before a reaches 1)
        ratios = np.linspace(1e-9, 0.1, 10_000)
        values = np.array([dynamic_threshold(float(a)) for a in ratios])
        assert (np.diff(values) > 0).all()
        # and never decreasing nor out of bounds anywhere on (0, 1)
        full = np.array([dynamic_threshold(float(a))
                         for a in np.linspace(1e-9, 1.0 - 1e-9, 10_000)])
        assert (np.diff(full) >= 0).all()
        assert full.min() > 0.3 - 1e-15 and full.max() < 0.7 + 1e-15

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            dynamic_threshold(-0.1)
        with pytest.raises(ValueError):
            dynamic_threshold(1.1)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            DynamicThresholdParams(theta_small=0.7, theta_large=0.3)
        with pytest.raises(ValueError):
            DynamicThresholdParams(gamma=1.0)


class TestFilterTeacherLabels:
    def test_small_mask_kept_at_half_score(self):
        lab = scored_label(area=1, score=0.5)
        assert filter_teacher_labels([lab], 64 * 64) == [lab]

    def test_full_image_mask_dropped_at_half_score(self):
        lab = scored_label(area=64 * 64, score=0.5)
        assert filter_teacher_labels([lab], 64 * 64) == []

    def test_score_exactly_at_threshold_dropped(self):
        # threshold at a -> 0 is exactly theta_small; "exceeding" is strict
        lab = scored_label(area=1, score=0.3)
        params = DynamicThresholdParams()
        a = 1 / (64 * 64)
        assert lab.score <= dynamic_threshold(a, params)
        kept = filter_teacher_labels([lab], 64 * 64, params)
        assert kept == [] or dynamic_threshold(a, params) < 0.3
        exact = scored_label(area=1, score=float(dynamic_threshold(a, params)))
        assert filter_teacher_labels([exact], 64 * 64, params) == []

    def test_missing_score_rejected(self):
        dense = np.zeros((8, 8), dtype=bool)
        dense[0, 0] = True
        lab = PseudoLabel.from_mask(encode_rle(dense), "refined", 0.5)
        with pytest.raises(ValueError):
            filter_teacher_labels([lab], 64)

    def test_keeping_monotone_in_area(self):
        # same score, smaller area -> never harder to keep
        params = DynamicThresholdParams()
        image_area = 128 * 128
        for score in (0.31, 0.5, 0.69):
            kept_flags = []
            for area in (1, 16, 256, 4096, image_area):
                lab = scored_label(area=area, score=score, size=128)
                kept_flags.append(
                    bool(filter_teacher_labels([lab], image_area, params)))
            # once dropping starts at some area, all larger areas drop too
            assert kept_flags == sorted(kept_flags, reverse=True)

    def test_dynamic_keeps_at_least_fixed_large_rule_on_small(self):
        rng = np.random.default_rng(3)
        params = DynamicThresholdParams()
        image_area = 128 * 128
        small_limit = image_area // 1024
        labels = [scored_label(int(rng.integers(1, small_limit)),
                               float(rng.random()), size=128)
                  for _ in range(100)]
        dynamic_kept = filter_teacher_labels(labels, image_area, params)
        fixed_kept = [lab for lab in labels if lab.score > params.theta_large]
        assert len(dynamic_kept) >= len(fixed_kept)


class TestComposeLosses:
    def test_zero(self):
        assert compose_losses(0.0, 0.0).total == 0.0

    def test_sum(self):
        report = compose_losses(1.0, 2.0)
        assert report.total == 3.0
        assert report.loss_initial == 1.0
        assert report.loss_teacher == 2.0

    def test_symmetric(self):
        assert compose_losses(0.7, 1.3).total == compose_losses(1.3, 0.7).total

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            compose_losses(-1.0, 0.0)

    def test_report_invariant(self):
        with pytest.raises(ValueError):
            LossReport(1.0, 2.0, 4.0)
