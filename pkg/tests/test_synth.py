import numpy as np
import pytest

from calibscope.core import ValidationError, load_labeled_data, save_labeled_data
from calibscope.metrics import compute_metrics, ece
from calibscope.synth import (gen_calibrated, gen_gaussian_mixture, gen_overconfident,
                              gen_predictable_correctness, mixture_centers, train_toy_classifier)

from conftest import newton_logistic


class TestCalibrated:
    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_acc_matches_conf(self, k):
        m = compute_metrics(gen_calibrated(50_000, k, 100 + k))
        assert abs(m.acc - m.conf) < 0.01
        assert m.ece < 0.02

    def test_confidence_range(self):
        c = gen_calibrated(10_000, 4, 0).confidences()
        assert c.min() >= 0.25 and c.max() < 1.0

    def test_deterministic(self):
        a, b = gen_calibrated(100, 3, 9), gen_calibrated(100, 3, 9)
        np.testing.assert_array_equal(a.probs, b.probs)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.probs, gen_calibrated(100, 3, 10).probs)


class TestOverconfident:
    @pytest.mark.parametrize("k", [2, 4])
    def test_conf_exceeds_acc(self, k):
        m = compute_metrics(gen_overconfident(20_000, k, 1, 2.0))
        assert m.conf - m.acc >= 0.02

    def test_limit_is_calibrated(self):
        a = gen_overconfident(1000, 3, 5, 1 + 1e-9)
        b = gen_calibrated(1000, 3, 5)
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-6)
        np.testing.assert_array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("s", [1.0, 0.5])
    def test_scale_must_exceed_one(self, s):
        with pytest.raises(ValidationError):
            gen_overconfident(10, 2, 0, s)


class TestPredictableCorrectness:
    def test_constant_confidence(self):
        m = compute_metrics(gen_predictable_correctness(2000, 8, 0))
        assert abs(m.cerr_neg - 0.95) < 1e-12 and abs(m.conf - 0.95) < 1e-12
        assert 0.45 < m.acc < 0.55

    def test_correctness_linearly_decodable(self):
        s = gen_predictable_correctness(2000, 8, 1)
        X, y = np.array(s.features), s.correct().astype(float)
        predict = newton_logistic(X[:1000], y[:1000])
        assert np.mean((predict(X[1000:]) > 0.5) == y[1000:]) >= 0.95


class TestMixture:
    def test_centers_separation(self):
        c = mixture_centers(5, 3, 0, 4.0)
        gaps = np.linalg.norm(c[:, None] - c[None], axis=-1)[np.triu_indices(5, 1)]
        assert gaps.min() == pytest.approx(4.0)

    def test_nearest_centroid(self):
        d = gen_gaussian_mixture(4000, 3, 2, seed=0, separation=10.0)
        c = mixture_centers(3, 2, 0, 10.0)
        pred = np.argmin(np.linalg.norm(d.X[:, None] - c[None], axis=-1), axis=1)
        assert np.mean(pred == d.y) >= 0.99

    def test_class_counts(self):
        n, k = 30_000, 4
        counts = np.bincount(gen_gaussian_mixture(n, k, 2, seed=3).y, minlength=k)
        sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
        assert np.all(np.abs(counts - n / k) < 3 * sigma)

    def test_shared_centers(self):
        a = gen_gaussian_mixture(2000, 2, 3, seed=1, centers_seed=0)
        b = gen_gaussian_mixture(2000, 2, 3, seed=2, centers_seed=0)
        for cls in range(2):
            np.testing.assert_allclose(a.X[a.y == cls].mean(0), b.X[b.y == cls].mean(0), atol=0.15)

    def test_labeled_data_round_trip(self, tmp_path):
        d = gen_gaussian_mixture(50, 3, 4, seed=0)
        save_labeled_data(d, tmp_path / "d.jsonl")
        back = load_labeled_data(tmp_path / "d.jsonl", 3)
        np.testing.assert_array_equal(back.X, d.X)
        np.testing.assert_array_equal(back.y, d.y)
        assert back.ids == d.ids


class TestToyClassifier:
    def setup_method(self):
        self.train = gen_gaussian_mixture(200, 2, 5, seed=1, separation=2.0, centers_seed=0)
        self.test = gen_gaussian_mixture(300, 2, 5, seed=2, separation=2.0, centers_seed=0)

    def run(self, **kw):
        args = dict(arch=[5, 32, 2], epochs=10, log_every=3, seed=0, batch_size=32)
        args.update(kw)
        return train_toy_classifier(self.train, self.test, **args)

    def test_logging_contract(self):
        cps = self.run()
        steps_per_epoch = int(np.ceil(200 / 32))
        assert [s for s, _ in cps] == list(range(3, 10 * steps_per_epoch + 1, 3))
        s = cps[0][1]
        assert len(s) == 300 and s.features.shape == (300, 32) and s.logits is not None
        assert set(s.splits) == {"test"} and set(s.steps.tolist()) == {3}

    def test_confidence_grows(self):
        cps = self.run(epochs=30)
        first, last = compute_metrics(cps[0][1]), compute_metrics(cps[-1][1])
        assert last.conf > first.conf and last.acc > 0.7

    def test_reproducible(self):
        a, b = self.run(), self.run()
        np.testing.assert_array_equal(a[-1][1].probs, b[-1][1].probs)

    def test_arch_checked(self):
        with pytest.raises(ValidationError):
            self.run(arch=[4, 8, 2])
        with pytest.raises(ValidationError):
            self.run(log_every=0)

    def test_ece_defined_everywhere(self):
        assert all(0 <= ece(s) <= 1 for _, s in self.run(epochs=2))
