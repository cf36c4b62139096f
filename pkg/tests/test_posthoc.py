import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calibscope.core import LabelSpace, PredictionRecord, PredictionSet, ValidationError, softmax
from calibscope.metrics import compute_metrics, ece
from calibscope.posthoc import (apply_temperature, ensemble_average, fit_temperature, smooth_targets,
                                temperature_nll)
from calibscope.synth import gen_calibrated, gen_overconfident

from conftest import grid_temperature_nll, make_set


def logit_set(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    return PredictionSet(LabelSpace(logits.shape[1]), [f"r{i}" for i in range(len(labels))],
                         softmax(logits), labels, logits=logits)


class TestFitTemperature:
    def test_calibrated_stays_near_one(self):
        t = fit_temperature(gen_calibrated(20_000, 3, 11)).temperature
        assert 0.9 <= t <= 1.1

    def test_recovers_scale_two(self):
        s = gen_overconfident(20_000, 4, 12, 2.0)
        fit = fit_temperature(s)
        assert fit.temperature == pytest.approx(2.0, abs=0.1)
        assert fit.nll_after <= fit.nll_before
        assert ece(apply_temperature(s, fit.temperature)) < ece(s)

    def test_matches_grid_oracle(self):
        s = gen_overconfident(3000, 3, 13, 3.0)
        grid = np.round(np.arange(0.05, 20.0 + 1e-9, 0.01), 2)
        nll = grid_temperature_nll(np.array(s.logits), s.labels, grid)
        fit = fit_temperature(s)
        assert fit.nll_after <= nll.min() + 1e-6
        assert abs(fit.temperature - grid[np.argmin(nll)]) <= 0.011

    def test_never_worse_than_identity(self):
        s = gen_calibrated(500, 2, 14)
        fit = fit_temperature(s)
        assert fit.nll_after <= fit.nll_before
        assert fit.nll_before == pytest.approx(temperature_nll(np.array(s.logits), s.labels, 1.0))

    def test_degenerate_interval(self):
        s = gen_overconfident(500, 2, 15)
        assert fit_temperature(s, t_min=3.0, t_max=3.0).temperature == 3.0
        one = fit_temperature(s, t_min=1.0, t_max=1.0)
        assert one.temperature == 1.0 and one.nll_after == one.nll_before
        with pytest.raises(ValidationError):
            fit_temperature(s, t_min=3.0, t_max=2.0)

    def test_needs_logits(self):
        with pytest.raises(ValidationError, match="logits"):
            fit_temperature(make_set([([0.6, 0.4], 0)]))


class TestApplyTemperature:
    def test_identity(self):
        s = gen_overconfident(100, 3, 1)
        np.testing.assert_allclose(apply_temperature(s, 1.0).probs, s.probs, atol=1e-15)

    def test_hand_value(self):
        out = apply_temperature(logit_set([[2.0, 0.0]], [0]), 2.0)
        np.testing.assert_allclose(out.probs[0], [0.731059, 0.268941], atol=1e-6)

    @pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
    def test_argmax_preserved(self, t):
        s = gen_overconfident(2000, 5, 2)
        np.testing.assert_array_equal(apply_temperature(s, t).predictions(), s.predictions())

    def test_other_columns_kept(self):
        s = gen_overconfident(20, 2, 3).replace(steps=np.arange(20), confidence=np.full(20, 0.5))
        out = apply_temperature(s, 2.0)
        np.testing.assert_array_equal(out.steps, s.steps)
        np.testing.assert_array_equal(out.confidence, s.confidence)
        assert out.ids == s.ids

    def test_rejects_bad_t(self):
        with pytest.raises(ValidationError):
            apply_temperature(gen_overconfident(5, 2, 0), 0.0)


class TestSmoothTargets:
    def test_examples(self):
        np.testing.assert_allclose(smooth_targets(0, 2, 0.1), [0.95, 0.05])
        np.testing.assert_allclose(smooth_targets(2, 4, 0.2), [0.05, 0.05, 0.85, 0.05])
        np.testing.assert_array_equal(smooth_targets(1, 3, 0.0), [0.0, 1.0, 0.0])

    @pytest.mark.parametrize("eps", [0.0, 0.1, 0.5, 0.9])
    @pytest.mark.parametrize("k", [2, 3, 10])
    def test_argmax_and_sum(self, eps, k):
        for label in range(k):
            t = smooth_targets(label, k, eps)
            assert np.argmax(t) == label and t.sum() == pytest.approx(1.0)

    def test_rejects_bad_args(self):
        with pytest.raises(ValidationError):
            smooth_targets(0, 2, 1.0)
        with pytest.raises(ValidationError):
            smooth_targets(2, 2, 0.1)


class TestEnsemble:
    def test_single_member(self):
        s = gen_calibrated(50, 3, 4)
        np.testing.assert_array_equal(ensemble_average([s]).probs, s.probs)

    def test_two_members(self):
        a = make_set([([0.9, 0.1], 0), ([0.2, 0.8], 0)])
        b = make_set([([0.5, 0.5], 0), ([0.6, 0.4], 0)])
        np.testing.assert_allclose(ensemble_average([a, b]).probs, [[0.7, 0.3], [0.4, 0.6]])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 1000))
    def test_simplex_and_order_free(self, m, seed):
        base = gen_calibrated(40, 4, seed)
        members = [base.replace(probs=gen_calibrated(40, 4, seed + j + 1).probs, logits=None)
                   for j in range(m)]
        avg = ensemble_average(members)
        np.testing.assert_allclose(avg.probs.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(ensemble_average(members[::-1]).probs, avg.probs, atol=1e-15)
        np.testing.assert_allclose(ensemble_average([avg] * 3).probs, avg.probs, atol=1e-15)

    def test_confidence_dropped(self):
        s = gen_calibrated(10, 2, 5).replace(confidence=np.full(10, 0.3))
        out = ensemble_average([s, s])
        assert out.confidence is None and out.logits is None
        assert compute_metrics(out).conf == pytest.approx(compute_metrics(s, use_override=False).conf)

    def test_mismatches(self):
        a = make_set([([0.9, 0.1], 0), ([0.2, 0.8], 0)])
        b = make_set([([0.9, 0.1], 0), ([0.2, 0.8], 1)])
        with pytest.raises(ValidationError, match="label"):
            ensemble_average([a, b])
        c = PredictionSet.from_records(LabelSpace(2), [PredictionRecord("x", [0.5, 0.5], 0),
                                                       PredictionRecord("y", [0.5, 0.5], 0)])
        with pytest.raises(ValidationError, match="id"):
            ensemble_average([a, c])
        with pytest.raises(ValidationError):
            ensemble_average([a, make_set([([0.3, 0.3, 0.4], 0), ([0.3, 0.3, 0.4], 0)])])
        with pytest.raises(ValidationError):
            ensemble_average([])
