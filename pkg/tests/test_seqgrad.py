import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c2ftcn import seqgrad as sg
from c2ftcn.seqgrad import Tensor


def col(values):
    return Tensor(np.asarray(values, dtype=float).reshape(-1, 1))


def kernel(values):
    return Tensor(np.asarray(values, dtype=float).reshape(1, 1, -1))


class TestConv1d:
    def test_identity_kernel(self):
        out = sg.conv1d(col([1, 2, 3]), kernel([0, 1, 0]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data.ravel(), [1, 2, 3])

    def test_box_kernel_zero_padding(self):
        # 0+1+2, 1+2+3, 2+3+0
        out = sg.conv1d(col([1, 2, 3]), kernel([1, 1, 1]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data.ravel(), [3, 6, 5])

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(4, 2, 3)))
        b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
        out = sg.conv1d(Tensor(np.zeros((7, 2))), w, b)
        np.testing.assert_array_equal(out.data, np.tile(b.data, (7, 1)))

    def test_channel_mismatch(self):
        with pytest.raises(sg.ShapeError):
            sg.conv1d(Tensor(np.zeros((5, 3))), Tensor(np.zeros((2, 4, 3))))

    @given(st.integers(1, 5), st.integers(1, 12), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_diagonal_identity_bank(self, C, T, seed):
        x = np.random.default_rng(seed).normal(size=(2, T, C))
        w = np.zeros((C, C, 3))
        w[np.arange(C), np.arange(C), 1] = 1.0
        out = sg.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(C)))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 2))
        w = rng.normal(size=(3, 2, 3))
        out = sg.conv1d(Tensor(x), Tensor(w)).data
        xp = np.pad(x, ((1, 1), (0, 0)))
        ref = np.array([[sum(w[o, i, j] * xp[t + j, i] for i in range(2) for j in range(3))
                         for o in range(3)] for t in range(6)])
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestMaxPool:
    def test_windowed_max(self):
        np.testing.assert_array_equal(sg.maxpool1d(col([1, 4, 2, 3]), 2).data.ravel(), [4, 3])

    def test_constant(self):
        assert np.all(sg.maxpool1d(col([2.5] * 9), 4).data == 2.5)

    def test_floor_length(self):
        assert sg.maxpool1d(Tensor(np.zeros((12, 3))), 5).shape == (2, 3)

    def test_degenerate(self):
        with pytest.raises(sg.DegenerateError):
            sg.maxpool1d(Tensor(np.zeros((3, 1))), 4)

    def test_tie_gradient_goes_to_earliest(self):
        x = Tensor(np.array([[1.0], [1.0], [0.0], [0.0]]), requires_grad=True)
        sg.sum_all(sg.maxpool1d(x, 2)).backward()
        np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 1, 0])


class TestUpsample:
    def test_endpoint_aligned(self):
        out = sg.upsample_linear(col([0, 2]), 4).data.ravel()
        np.testing.assert_allclose(out, [0, 2 / 3, 4 / 3, 2], atol=1e-15)

    def test_replicate_single_frame(self):
        np.testing.assert_array_equal(sg.upsample_linear(col([5]), 3).data.ravel(), [5, 5, 5])

    @given(st.integers(1, 20), st.integers(1, 60), st.floats(-10, 10))
    def test_constant_preserved(self, ts, td, c):
        out = sg.upsample_linear(Tensor(np.full((ts, 2), c)), td).data
        assert np.all(out == c)

    @given(st.integers(2, 10), st.integers(1, 6), st.integers(0, 2**31))
    def test_grid_points_recover_source(self, ts, factor, seed):
        x = np.random.default_rng(seed).normal(size=(ts, 3))
        td = (ts - 1) * factor + 1
        out = sg.upsample_linear(Tensor(x), td).data
        np.testing.assert_allclose(out[::factor], x, atol=1e-12)


class TestBatchNorm:
    def test_constant_channel_is_zero(self):
        st_ = sg.BatchNormState.create(1)
        out = sg.batchnorm(col([3.0, 3.0, 3.0]), st_, training=True)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_point_standardisation(self):
        st_ = sg.BatchNormState.create(1, eps=1e-15)
        out = sg.batchnorm(col([0.0, 2.0]), st_, training=True)
        np.testing.assert_allclose(out.data.ravel(), [-1, 1], atol=1e-12)

    def test_eval_affine(self):
        st_ = sg.BatchNormState.create(1, eps=0.0)
        st_.gamma.data[:] = 2.0
        st_.beta.data[:] = 1.0
        out = sg.batchnorm(col([1.0]), st_, training=False)
        np.testing.assert_allclose(out.data.ravel(), [3.0])

    def test_mask_excludes_frames(self):
        st_ = sg.BatchNormState.create(1, eps=1e-15)
        out = sg.batchnorm(col([0.0, 2.0, 100.0]), st_, training=True, mask=np.array([1, 1, 0], bool))
        np.testing.assert_allclose(out.data.ravel()[:2], [-1, 1], atol=1e-12)

    def test_running_stats_update(self):
        st_ = sg.BatchNormState.create(1, momentum=0.5)
        sg.batchnorm(col([0.0, 2.0]), st_, training=True)
        np.testing.assert_allclose(st_.running_mean, [0.5])
        np.testing.assert_allclose(st_.running_var, [0.5 * 1 + 0.5 * 2.0])  # unbiased var is 2

    def test_all_masked(self):
        with pytest.raises(sg.DegenerateError):
            sg.batchnorm(col([1.0, 2.0]), sg.BatchNormState.create(1), mask=np.zeros(2, bool))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(sg.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        np.testing.assert_allclose(sg.softmax_rows(Tensor([[np.log(2), 0.0]])).data, [[2 / 3, 1 / 3]])

    def test_no_overflow(self):
        p = sg.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)

    @given(st.integers(0, 2**31))
    @settings(max_examples=25)
    def test_rows_sum_to_one(self, seed):
        z = np.random.default_rng(seed).normal(scale=20, size=(7, 5))
        p = sg.softmax_rows(Tensor(z)).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
        assert np.all(sg.log(Tensor(p)).data >= np.log(sg.PROB_FLOOR))


class TestGradCheck:
    def test_linear_function_exact(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        c = rng.normal(size=(5, 3))
        res = sg.grad_check(lambda: sg.weighted_sum(w, c), [w])
        assert res.max_rel_error < 1e-8

    def test_double_conv_cross_entropy(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 8, 3)), requires_grad=True)
        w1 = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(4, 4, 3)), requires_grad=True)
        bn1, bn2 = sg.BatchNormState.create(4), sg.BatchNormState.create(4)
        target = np.eye(4)[rng.integers(0, 4, size=(2, 8))]

        def fn():
            h = sg.relu(sg.batchnorm(sg.conv1d(x, w1), bn1))
            h = sg.relu(sg.batchnorm(sg.conv1d(h, w2), bn2))
            return -sg.weighted_sum(sg.log(sg.softmax_rows(h)), target / 16)

        res = sg.grad_check(fn, [x, w1, w2, bn1.gamma, bn1.beta, bn2.gamma, bn2.beta])
        assert res.max_rel_error < 1e-4

    def test_kink_detected_and_resampled(self):
        # Pre-activation within the probe step of zero flips the ReLU branch.
        def make(rng):
            x = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
            return (lambda: sg.sum_all(sg.relu(x))), [x]

        x0 = Tensor(np.array([[2e-6, 1.0], [0.5, -0.3]]), requires_grad=True)
        fn0 = lambda: sg.sum_all(sg.relu(x0))
        with pytest.raises(sg.KinkError):
            sg.grad_check(fn0, [x0])
        res = sg.grad_check(fn0, [x0], resample=make)
        assert res.n_resampled >= 1
        assert res.max_rel_error < 1e-6

    def test_non_finite_loss_aborts(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(FloatingPointError):
            sg.grad_check(lambda: sg.weighted_sum(x, np.array([np.inf])), [x])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    with sg.no_grad():
        y = sg.relu(x)
    assert not y.requires_grad and y._parents == ()


def test_gradients_accumulate_through_shared_nodes():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    sg.sum_all(y + y).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_temporal_max_respects_mask():
    x = Tensor(np.array([[5.0], [1.0], [9.0]]), requires_grad=True)
    out = sg.temporal_max(x, np.array([True, True, False]))
    assert out.data.tolist() == [5.0]
    sg.sum_all(out).backward()
    np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0])
