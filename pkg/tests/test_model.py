import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c2ftcn import seqgrad as sg
from c2ftcn.model import (C2FTCN, CheckpointError, ModelConfig, level_masks, load_checkpoint,
                          pad_to_multiple, save_checkpoint)
from c2ftcn.seqgrad import Tensor
from oracles import hand_core_count

SMALL = ModelConfig(d_in=6, num_classes=4, num_activities=3,
                    encoder_widths=(8, 8, 8, 6, 6, 6, 6), decoder_width=5, mlp_hidden=7)


class TestPadding:
    def test_207(self):
        x, m = pad_to_multiple(np.arange(207.0)[:, None])
        assert x.shape == (256, 1)
        assert m.sum() == 207 and not m[207:].any()
        assert np.all(x[207:] == 206.0)

    def test_exact_multiple_unchanged(self):
        f = np.random.default_rng(0).normal(size=(128, 3))
        x, m = pad_to_multiple(f)
        np.testing.assert_array_equal(x, f)
        assert m.all()

    def test_single_frame(self):
        x, m = pad_to_multiple(np.array([[2.0, 3.0]]))
        assert x.shape == (64, 2) and m.sum() == 1
        assert np.all(x == [2.0, 3.0])

    def test_empty(self):
        with pytest.raises(sg.ShapeError):
            pad_to_multiple(np.zeros((0, 2)))

    def test_level_masks_ceil(self):
        mask = np.zeros(128, bool)
        mask[:71] = True
        lengths = [m.sum() for m in level_masks(mask)]
        assert lengths == [71, 36, 18, 9, 5, 3, 2]


class TestShapes:
    @pytest.mark.parametrize("t_in", [64, 128])
    def test_default_widths(self, t_in):
        model = C2FTCN(ModelConfig(d_in=32, num_classes=5), seed=0)
        out = model.forward(np.random.default_rng(1).normal(size=(1, t_in, 32)), training=False)
        assert [e.shape for e in out.encoder] == [
            (1, t_in >> i, w) for i, w in enumerate((256, 256, 256, 128, 128, 128, 128))]
        assert out.bottleneck.shape == (1, t_in // 64, 132)
        assert [p.shape for p in out.probs] == [(1, t_in >> (6 - i), 5) for i in range(1, 7)]

    def test_decoder_concat_widths(self):
        assert ModelConfig().decoder_in_widths() == (260, 256, 256, 384, 384, 384)

    def test_rows_are_distributions(self):
        model = C2FTCN(SMALL, seed=2)
        out = model.forward(np.random.default_rng(0).normal(size=(2, 128, 6)))
        for p in out.probs:
            np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-9)
            assert np.all(p.data >= 0)

    def test_unpadded_input_rejected(self):
        with pytest.raises(sg.ShapeError):
            C2FTCN(SMALL).forward(np.zeros((1, 100, 6)))

    def test_wrong_channels_rejected(self):
        with pytest.raises(sg.ShapeError):
            C2FTCN(SMALL).forward(np.zeros((1, 64, 5)))


class TestBottleneck:
    def _model(self):
        return C2FTCN(ModelConfig(d_in=4, num_classes=3, encoder_widths=(4, 4, 4, 4, 4, 4, 128)), seed=0)

    def test_length_12(self):
        f = Tensor(np.random.default_rng(0).normal(size=(12, 128)))
        assert self._model().bottleneck_forward(f).shape == (12, 132)

    def test_clamped_windows(self):
        # windows larger than the sequence pool globally
        f = Tensor(np.random.default_rng(1).normal(size=(4, 128)))
        model = self._model()
        assert model.bottleneck_forward(f).shape == (4, 132)
        wc, bc = model.params["tpp.collapse.weight"].data, model.params["tpp.collapse.bias"].data
        global_branch = f.data.max(axis=0) @ wc[:, :, 0].T + bc
        model.params["tpp.conv.weight"].data[:] = 0.0
        model.params["tpp.conv.weight"].data[np.arange(132), np.arange(132), 1] = 1.0
        model.params["tpp.conv.bias"].data[:] = 0.0
        out = model.bottleneck_forward(f).data
        np.testing.assert_allclose(out[:, 2], global_branch[0])
        np.testing.assert_allclose(out[:, 3], global_branch[0])
        np.testing.assert_allclose(out[:, 4:], f.data)


class TestParameterCount:
    def test_core_matches_hand_derivation(self):
        model = C2FTCN(ModelConfig(), seed=0)
        assert model.count_parameters("core") == hand_core_count() == 4_096_821

    def test_with_heads_near_published(self):
        model = C2FTCN(ModelConfig(num_classes=48), seed=0)
        total = model.count_parameters("core") + model.count_parameters("heads")
        assert abs(total - 4.08e6) / 4.08e6 < 0.05


class TestRecognition:
    def test_mlp_input_is_temporal_max_of_logs(self):
        model = C2FTCN(ModelConfig(d_in=4, num_classes=2, num_activities=3, encoder_widths=(4,) * 7,
                                   decoder_width=4, mlp_hidden=5), seed=0)
        p = np.array([[0.9, 0.1], [0.2, 0.8]])
        got = model.recognition_forward(Tensor(p)).data
        z = np.log([0.9, 0.8])
        w1, b1 = model.params["rec.fc1.weight"].data, model.params["rec.fc1.bias"].data
        w2, b2 = model.params["rec.fc2.weight"].data, model.params["rec.fc2.bias"].data
        logits = np.maximum(w1 @ z + b1, 0) @ w2.T + b2
        ref = np.exp(logits - logits.max())
        np.testing.assert_allclose(got, ref / ref.sum(), rtol=1e-12)

    def test_constant_sequence_matches_single_frame(self):
        model = C2FTCN(SMALL, seed=3)
        row = np.array([[0.1, 0.2, 0.3, 0.4]])
        a = model.recognition_forward(Tensor(np.repeat(row, 9, axis=0))).data
        b = model.recognition_forward(Tensor(row)).data
        np.testing.assert_array_equal(a, b)

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        model = C2FTCN(SMALL, seed=seed % 7)
        p = rng.dirichlet(np.ones(4), size=20)
        perm = rng.permutation(20)
        a = model.recognition_forward(Tensor(p)).data
        b = model.recognition_forward(Tensor(p[perm])).data
        np.testing.assert_array_equal(a, b)

    def test_mask_limits_max(self):
        model = C2FTCN(SMALL, seed=0)
        p = np.full((2, 4), 0.25)
        p[1] = [0.97, 0.01, 0.01, 0.01]
        a = model.recognition_forward(Tensor(p), np.array([True, False])).data
        b = model.recognition_forward(Tensor(p[:1])).data
        np.testing.assert_array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = C2FTCN(SMALL, seed=5)
        model.forward(np.random.default_rng(0).normal(size=(1, 64, 6)), training=True)  # move BN stats
        save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.config == model.config
        a, b = model.state_arrays(), loaded.state_arrays()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes(), k

    def test_eval_outputs_identical_after_reload(self, tmp_path):
        model = C2FTCN(SMALL, seed=1)
        x = np.random.default_rng(2).normal(size=(1, 64, 6))
        model.forward(x, training=True)
        save_checkpoint(model, tmp_path / "m.ckpt")
        a = model.forward(x, training=False).probs[-1].data
        b = load_checkpoint(tmp_path / "m.ckpt").forward(x, training=False).probs[-1].data
        np.testing.assert_array_equal(a, b)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        save_checkpoint(C2FTCN(SMALL), tmp_path / "m")
        raw = (tmp_path / "m").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t")


class TestConfig:
    def test_rejects_small_window(self):
        with pytest.raises(ValueError):
            ModelConfig(tpp_windows=(1, 3))

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            ModelConfig(num_classes=1)

    def test_dict_round_trip(self):
        assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
