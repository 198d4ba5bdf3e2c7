from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c2ftcn.augment import (DATASET_BASE_WINDOWS, WindowDistribution, build_distribution, pool_features,
                            sample_window, upsample_probs)
from c2ftcn.augment import test_time_aggregate as aggregate


class TestDistribution:
    def test_w0_10(self):
        d = build_distribution(10)
        assert d.windows == tuple(range(5, 21))
        assert d.prob(10) == 0.5
        others = [p for w, p in d.support() if w != 10]
        assert len(others) == 15 and all(p == pytest.approx(1 / 30, abs=1e-15) for p in others)

    def test_w0_4(self):
        d = build_distribution(4)
        assert d.windows == tuple(range(2, 9))
        assert [d.prob(w) for w in (2, 3, 5, 6, 7, 8)] == pytest.approx([1 / 12] * 6, abs=1e-15)

    def test_outside_support_zero(self):
        d = build_distribution(6)
        assert d.prob(2) == 0.0 and d.prob(13) == 0.0

    def test_point_mass(self):
        d = build_distribution(8, pi0=1.0)
        assert d.support() == [(8, 1.0)]

    @pytest.mark.parametrize("w0", range(2, 65))
    def test_sums_to_one(self, w0):
        d = build_distribution(w0)
        assert abs(sum(d.probs) - 1.0) < 1e-12
        assert sum(Fraction(p) for p in d.probs) == pytest.approx(1, abs=1e-12)

    def test_rejects_small_base(self):
        with pytest.raises(ValueError):
            build_distribution(1)

    def test_dataset_defaults(self):
        assert sorted(DATASET_BASE_WINDOWS.values()) == [4, 10, 20]


class TestSampling:
    def test_pi0_one(self):
        rng = np.random.default_rng(0)
        d = build_distribution(7, pi0=1.0)
        assert {sample_window(d, rng) for _ in range(200)} == {7}

    def test_frequencies(self):
        rng = np.random.default_rng(0)
        d = build_distribution(10)
        draws = np.array([sample_window(d, rng) for _ in range(100_000)])
        assert abs(np.mean(draws == 10) - 0.5) < 0.01
        for w in d.windows:
            assert abs(np.mean(draws == w) - d.prob(w)) < 0.01
        assert draws.min() >= 5 and draws.max() <= 20


class TestPooling:
    def test_hand_max(self):
        out = pool_features(np.array([[1], [3], [2], [5], [4]]), None, 2)
        assert out.features.ravel().tolist() == [3, 5, 4]

    def test_hand_majority(self):
        assert pool_features(np.zeros((5, 1)), np.array([0, 0, 1, 1, 1]), 2).labels.tolist() == [0, 1, 1]

    def test_tie_goes_to_first(self):
        assert pool_features(np.zeros((4, 1)), np.array([2, 1, 1, 2]), 4).labels.tolist() == [2]

    def test_window_one_identity(self):
        f = np.random.default_rng(0).normal(size=(9, 3))
        y = np.arange(9) % 4
        out = pool_features(f, y, 1)
        np.testing.assert_array_equal(out.features, f)
        np.testing.assert_array_equal(out.labels, y)

    def test_oversized_window_is_global(self):
        f = np.random.default_rng(0).normal(size=(5, 2))
        out = pool_features(f, np.array([1, 1, 0, 0, 0]), 50)
        np.testing.assert_array_equal(out.features, f.max(axis=0, keepdims=True))
        assert out.labels.tolist() == [0]

    @given(st.integers(1, 60), st.data())
    @settings(max_examples=60)
    def test_length_and_label_membership(self, T, data):
        w = data.draw(st.integers(1, 2 * T))
        rng = np.random.default_rng(T * 1000 + w)
        y = rng.integers(0, 4, size=T)
        out = pool_features(rng.normal(size=(T, 2)), y, w)
        eff = min(w, T)
        assert len(out.features) == len(out.labels) == -(-T // eff)
        for i, lab in enumerate(out.labels):
            assert lab in y[i * eff:(i + 1) * eff]

    @given(st.integers(1, 40), st.integers(1, 50), st.integers(0, 5))
    @settings(max_examples=30)
    def test_constant_labels_stay_constant(self, T, w, c):
        out = pool_features(np.zeros((T, 1)), np.full(T, c), w)
        assert set(out.labels.tolist()) == {c}


class TestAggregate:
    @staticmethod
    def _infer(pooled):
        # deterministic per-length probabilities
        T = len(pooled)
        z = np.stack([np.sin(np.arange(T) + T), np.cos(np.arange(T) * 0.5)], axis=1)
        e = np.exp(z)
        return e / e.sum(1, keepdims=True)

    def test_single_window_is_plain_inference(self):
        f = np.random.default_rng(0).normal(size=(30, 3))
        out = aggregate(self._infer, f, WindowDistribution.point_mass(3))
        ref = upsample_probs(self._infer(pool_features(f, None, 3).features), 30)
        assert out.tobytes() == ref.tobytes()

    def test_two_constant_predictions_average(self):
        d = WindowDistribution(w0=2, pi0=0.5, windows=(2, 3), probs=(0.5, 0.5))

        def infer(pooled):
            row = [1.0, 0.0] if len(pooled) == 6 else [0.0, 1.0]
            return np.tile(row, (len(pooled), 1))
        out = aggregate(infer, np.zeros((12, 1)), d)
        np.testing.assert_array_equal(out, 0.5)

    def test_enumerates_full_support(self):
        f = np.random.default_rng(1).normal(size=(40, 2))
        d = build_distribution(4)
        out = aggregate(self._infer, f, d)
        ref = sum(d.prob(w) * upsample_probs(self._infer(pool_features(f, None, w).features), 40)
                  for w in range(2, 9))
        np.testing.assert_allclose(out, ref, rtol=1e-14)
        np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-9)


class TestUpsampleProbs:
    @given(st.integers(1, 20), st.integers(1, 80), st.integers(0, 2**31))
    @settings(max_examples=40)
    def test_rows_stay_distributions(self, ts, td, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(3), size=ts)
        out = upsample_probs(p, td)
        assert out.shape == (td, 3)
        np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-12)
        assert np.all(out >= 0)
