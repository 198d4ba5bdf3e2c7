"""Finite-difference self-check of every differentiable op and of the full model."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import seqgrad as sg
from .ensemble import c2f_ensemble
from .losses import LossConfig, joint_loss, recognition_loss
from .model import C2FTCN, ModelConfig
from .seqgrad import Tensor, grad_check

TINY_CONFIG = ModelConfig(d_in=8, num_classes=3, num_activities=2,
                          encoder_widths=(4, 4, 4, 4, 4, 4, 4), decoder_width=4, mlp_hidden=4)


def _param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


def _scalarize(out: Tensor, rng) -> Tensor:
    return sg.weighted_sum(out, rng.normal(size=out.shape))


def _seq_shape(rng):
    return int(rng.integers(1, 3)), int(rng.integers(4, 11)), int(rng.integers(1, 4))


def _op_problem(op):
    """Wrap a builder ``op(rng) -> (out_fn, params)`` into a grad_check problem factory."""
    def make(rng):
        build, params = op(rng)
        w_rng_seed = int(rng.integers(2**31))

        def fn():
            return _scalarize(build(), np.random.default_rng(w_rng_seed))
        return fn, params
    return make


def _conv(rng):
    B, T, cin = _seq_shape(rng)
    cout = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    x, w, b = _param(rng, B, T, cin), _param(rng, cout, cin, k), _param(rng, cout)
    return (lambda: sg.conv1d(x, w, b)), [x, w, b]


def _maxpool(rng):
    B, T, C = _seq_shape(rng)
    w = int(rng.integers(1, T + 1))
    x = _param(rng, B, T, C)
    return (lambda: sg.maxpool1d(x, w)), [x]


def _upsample(rng):
    B, T, C = _seq_shape(rng)
    t_dst = int(rng.integers(1, 3 * T))
    x = _param(rng, B, T, C)
    return (lambda: sg.upsample_linear(x, t_dst)), [x]


def _batchnorm(training):
    def build(rng):
        B, T, C = _seq_shape(rng)
        x = _param(rng, B, T, C)
        st = sg.BatchNormState.create(C)
        st.gamma.data[:] = rng.normal(size=C)
        st.beta.data[:] = rng.normal(size=C)
        st.running_mean = rng.normal(size=C)
        st.running_var = rng.uniform(0.5, 2.0, size=C)
        mask = rng.random((B, T)) < 0.8
        mask[:, 0] = True
        return (lambda: sg.batchnorm(x, st, training, mask)), [x, st.gamma, st.beta]
    return build


def _softmax(rng):
    x = _param(rng, *_seq_shape(rng), scale=2.0)
    return (lambda: sg.softmax_rows(x)), [x]


def _relu(rng):
    x = _param(rng, *_seq_shape(rng))
    return (lambda: sg.relu(x)), [x]


def _log(rng):
    x = Tensor(rng.uniform(0.05, 2.0, size=_seq_shape(rng)), requires_grad=True)
    return (lambda: sg.log(x)), [x]


def _concat(rng):
    B, T, C = _seq_shape(rng)
    a, b = _param(rng, B, T, C), _param(rng, B, T, int(rng.integers(1, 4)))
    return (lambda: sg.concat([a, b], axis=-1)), [a, b]


def _add_mul(rng):
    shape = _seq_shape(rng)
    a, b = _param(rng, *shape), _param(rng, shape[-1])
    return (lambda: sg.mul(sg.add(a, b), a) - b), [a, b]


def _temporal_max(rng):
    B, T, C = _seq_shape(rng)
    x = _param(rng, B, T, C)
    mask = rng.random((B, T)) < 0.7
    mask[:, -1] = True
    return (lambda: sg.temporal_max(x, mask)), [x]


def _mean(rng):
    x = _param(rng, *_seq_shape(rng))
    return (lambda: sg.mean(sg.square(x))), [x]


def _linear(rng):
    B, T, cin = _seq_shape(rng)
    cout = int(rng.integers(1, 4))
    x, w, b = _param(rng, B, cin), _param(rng, cout, cin), _param(rng, cout)
    return (lambda: sg.linear(x, w, b)), [x, w, b]


def _abs_clip(rng):
    x = _param(rng, *_seq_shape(rng), scale=2.0)
    return (lambda: sg.clip_max(sg.absolute(x), 1.0)), [x]


def _slice(rng):
    B, T, C = _seq_shape(rng)
    x = _param(rng, B, T, C)
    lo = int(rng.integers(0, T - 1))
    return (lambda: sg.time_slice(x, lo, T)), [x]


OP_PROBLEMS = {
    "conv1d": _conv,
    "maxpool1d": _maxpool,
    "upsample_linear": _upsample,
    "batchnorm_train": _batchnorm(True),
    "batchnorm_eval": _batchnorm(False),
    "softmax_rows": _softmax,
    "relu": _relu,
    "log": _log,
    "concat": _concat,
    "add_mul": _add_mul,
    "temporal_max": _temporal_max,
    "mean_square": _mean,
    "linear": _linear,
    "abs_clip": _abs_clip,
    "time_slice": _slice,
}


def model_problem(config: ModelConfig = TINY_CONFIG, t_in: int = 64, recognition: bool = False):
    """Full forward pass plus joint (or recognition) loss on a two-video batch."""
    def make(rng):
        model = C2FTCN(config, seed=int(rng.integers(2**31)))
        x = rng.normal(size=(2, t_in, config.d_in))
        mask = np.ones((2, t_in), dtype=bool)
        mask[1, int(rng.integers(t_in // 2, t_in)):] = False
        y = rng.integers(0, config.num_classes, size=(2, t_in))
        acts = rng.integers(0, config.num_activities, size=2)
        cfg = LossConfig()

        def fn():
            out = model.forward(x, mask, training=True)
            p = c2f_ensemble(out.probs, t_out=t_in)
            if recognition:
                return recognition_loss(model.recognition_forward(p, mask), acts)
            return joint_loss(p, y, mask, cfg)[0]
        params = list(model.params.values()) if recognition else list(model.segmentation_parameters().values())
        return fn, params
    return make


@dataclasses.dataclass
class SuiteResult:
    per_check: dict[str, float]
    trials: dict[str, int]
    resamples: int
    seconds: float

    @property
    def max_rel_error(self) -> float:
        return max(self.per_check.values())


def run_suite(op_trials: int = 100, model_trials: int = 100, seed: int = 0,
              step: float = 1e-5, model_step: float = 1e-6, model_entries: int = 8) -> SuiteResult:
    """Grad-check each op ``op_trials`` times and the tiny model ``model_trials`` times.

    Each model trial probes ``model_entries`` random parameter entries.  The
    smaller ``model_step`` keeps truncation error low through the stacked
    width-4 batch norms, where the loss has large curvature.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    per_check, trials, resamples = {}, {}, 0
    checks = {name: (_op_problem(op), op_trials, None, step) for name, op in OP_PROBLEMS.items()}
    checks["model_joint_loss"] = (model_problem(), model_trials, model_entries, model_step)
    checks["model_recognition_loss"] = (model_problem(recognition=True), max(1, model_trials // 10),
                                        model_entries, model_step)
    for name, (make, n, entries, h) in checks.items():
        worst = 0.0
        for _ in range(n):
            trial_rng = np.random.default_rng(int(rng.integers(2**63)))
            fn, params = make(trial_rng)
            res = grad_check(fn, params, step=h, seed=int(rng.integers(2**31)),
                             max_entries=entries, resample=make)
            worst = max(worst, res.max_rel_error)
            resamples += res.n_resampled
        per_check[name] = worst
        trials[name] = n
    return SuiteResult(per_check, trials, resamples, time.perf_counter() - t0)
