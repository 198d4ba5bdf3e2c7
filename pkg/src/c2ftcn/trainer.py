"""Training loop, evaluation, k-fold orchestration and activity recognition."""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Sequence

import numpy as np

from . import seqgrad as sg
from .augment import WindowDistribution, build_distribution, pool_features, sample_window, test_time_aggregate, upsample_probs
from .data import Dataset, activity_action_sets, kfold_splits
from .ensemble import DEFAULT_ALPHA, c2f_ensemble, normalize_alpha, one_hot_alpha, predict_labels
from .losses import LossConfig, joint_loss, recognition_loss
from .metrics import (CalibrationBin, calibration_curve, segmentation_scores, wrong_prediction_entropy)
from .model import C2FTCN, ModelConfig, pad_to_multiple

log = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    batch_size: int = 5
    epochs: int = 600
    w0: int = 4
    pi0: float = 0.5
    lambda_tr: float = 0.15
    eps_max: float = 4.0
    seed: int = 0
    eval_every: int = 0
    use_action_loss: bool = True
    train_augment: bool = True
    test_augment: bool = True
    alpha: tuple[float, ...] = DEFAULT_ALPHA
    decoupled_weight_decay: bool = False
    calibration_bins: int = 10
    recognition_epochs: int = 0
    # network shape
    encoder_widths: tuple[int, ...] = (256, 256, 256, 128, 128, 128, 128)
    decoder_width: int = 128
    tpp_windows: tuple[int, ...] = (2, 3, 5, 6)
    mlp_hidden: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.recognition_epochs < 0:
            raise ValueError("recognition_epochs must be >= 0")
        self.alpha = tuple(float(a) for a in self.alpha)
        normalize_alpha(self.alpha)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_tr=self.lambda_tr, eps_max=self.eps_max, use_action_loss=self.use_action_loss)

    def train_distribution(self) -> WindowDistribution:
        if not self.train_augment or self.pi0 == 1.0:
            return WindowDistribution.point_mass(self.w0)
        return build_distribution(self.w0, self.pi0)

    def test_distribution(self) -> WindowDistribution:
        if not self.test_augment or self.pi0 == 1.0:
            return WindowDistribution.point_mass(self.w0)
        return build_distribution(self.w0, self.pi0)

    def model_config(self, ds: Dataset) -> ModelConfig:
        return ModelConfig(d_in=ds.dim, num_classes=ds.num_classes, num_activities=ds.num_activities,
                           encoder_widths=self.encoder_widths, decoder_width=self.decoder_width,
                           tpp_windows=self.tpp_windows, mlp_hidden=self.mlp_hidden)


# ------------------------------------------------------------------ optimiser

@dataclasses.dataclass
class AdamState:
    m: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, decoupled: bool = False) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update, in place.

    Weight decay is added to the gradient (L2) unless ``decoupled``.  A step
    with any non-finite gradient is skipped and counted in ``state.skipped``.
    """
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; skipping step (%d skipped so far)", state.skipped)
        return params
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if weight_decay and decoupled:
            update = update + weight_decay * p
        p -= lr * update
    return params


def _step(tensors: dict[str, sg.Tensor], state: AdamState, cfg: TrainConfig):
    adam_step({k: t.data for k, t in tensors.items()}, {k: t.grad for k, t in tensors.items()},
              state, cfg.learning_rate, cfg.weight_decay, cfg.decoupled_weight_decay)


# ------------------------------------------------------------------ batching

def _stack_padded(seqs: Sequence[np.ndarray], labels: Sequence[np.ndarray] | None):
    """Pad each sequence to a multiple of 64, then all to the longest; returns x, y, mask."""
    padded = [pad_to_multiple(s) for s in seqs]
    t_max = max(p.shape[0] for p, _ in padded)
    B, d = len(seqs), seqs[0].shape[1]
    x = np.empty((B, t_max, d))
    mask = np.zeros((B, t_max), dtype=bool)
    y = np.zeros((B, t_max), dtype=np.int64) if labels is not None else None
    for b, (p, m) in enumerate(padded):
        x[b, :len(p)] = p
        x[b, len(p):] = p[-1]
        mask[b, :len(m)] = m
        if labels is not None:
            y[b, :len(labels[b])] = labels[b]
    return x, y, mask


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ------------------------------------------------------------------ training

def train_epoch(model: C2FTCN, ds: Dataset, dist: WindowDistribution, cfg: TrainConfig,
                rng: np.random.Generator, state: AdamState) -> dict[str, float]:
    """One pass over ``ds`` with a freshly sampled pooling window per video."""
    loss_cfg = cfg.loss_config()
    params = model.segmentation_parameters()
    sums = {"ce": 0.0, "tr": 0.0, "al": 0.0, "total": 0.0}
    batches = _batches(len(ds.videos), cfg.batch_size, rng)
    for idx in batches:
        feats, labels = [], []
        for i in idx:
            v = ds.videos[i]
            pooled = pool_features(v.features, v.frame_labels, sample_window(dist, rng))
            feats.append(pooled.features)
            labels.append(pooled.labels)
        x, y, mask = _stack_padded(feats, labels)
        model.zero_grad()
        out = model.forward(x, mask, training=True)
        p_ens = c2f_ensemble(out.probs, cfg.alpha, x.shape[1])
        loss, parts = joint_loss(p_ens, y, mask, loss_cfg)
        loss.backward()
        _step(params, state, cfg)
        for k in sums:
            sums[k] += parts[k]
    return {k: v / len(batches) for k, v in sums.items()}


@dataclasses.dataclass
class FitResult:
    model: C2FTCN
    history: list[dict[str, float]]
    state: AdamState


def fit(ds: Dataset, cfg: TrainConfig, model: C2FTCN | None = None,
        stop: Callable[[int, C2FTCN], bool] | None = None,
        on_epoch: Callable[[int, dict], None] | None = None) -> FitResult:
    """Train a segmentation model; ``stop(epoch, model)`` is polled every ``eval_every`` epochs."""
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = C2FTCN(cfg.model_config(ds), seed=cfg.seed)
    state = AdamState()
    dist = cfg.train_distribution()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(model, ds, dist, cfg, rng, state)
        stats = {"epoch": epoch, **stats}
        history.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, stats)
        log.debug("epoch %d: %s", epoch, stats)
        if stop is not None and cfg.eval_every and epoch % cfg.eval_every == 0 and stop(epoch, model):
            break
    return FitResult(model, history, state)


# ------------------------------------------------------------------ inference

def infer_layers(model: C2FTCN, f: np.ndarray) -> list[np.ndarray]:
    """Per-decoder-layer probabilities at the (unpadded) input resolution."""
    x, mask = pad_to_multiple(np.asarray(f, dtype=np.float64))
    with sg.no_grad():
        out = model.forward(x[None], mask[None], training=False)
    T = f.shape[0]
    t_pad = x.shape[0]
    return [upsample_probs(p.data[0], t_pad)[:T] for p in out.probs]


def infer(model: C2FTCN, f: np.ndarray, alpha=DEFAULT_ALPHA) -> np.ndarray:
    layers = infer_layers(model, f)
    return c2f_ensemble(layers, alpha, layers[-1].shape[0]).data


def predict_video(model: C2FTCN, f: np.ndarray, dist: WindowDistribution,
                  alphas: Sequence = (DEFAULT_ALPHA,)) -> list[np.ndarray]:
    """Expected probabilities at the original length, one array per ensemble weighting."""
    def run(pooled):
        layers = infer_layers(model, pooled)
        return np.stack([c2f_ensemble(layers, a, layers[-1].shape[0]).data for a in alphas])

    return list(test_time_aggregate(run, f, dist))


@dataclasses.dataclass
class EvalReport:
    metrics: dict[str, float]
    per_video: dict[str, dict[str, float]]
    calibration: list[CalibrationBin]
    entropy: np.ndarray
    predictions: dict[str, tuple[np.ndarray, np.ndarray]]

    def summary_lines(self) -> list[str]:
        return [f"{k} {v:.6f}" for k, v in self.metrics.items()]


def out_of_activity_rate(pred: np.ndarray, allowed: set[int]) -> float:
    return float(np.mean(~np.isin(pred, sorted(allowed))))


def evaluate(model: C2FTCN, ds: Dataset, cfg: TrainConfig, alpha=None,
             activity_sets: dict[int, set[int]] | None = None,
             dist: WindowDistribution | None = None) -> EvalReport:
    """Score every video at its original frame rate; dataset metrics are unweighted means."""
    reports = evaluate_many(model, ds, cfg, [cfg.alpha if alpha is None else alpha], activity_sets, dist)
    return reports[0]


def evaluate_many(model: C2FTCN, ds: Dataset, cfg: TrainConfig, alphas: Sequence,
                  activity_sets: dict[int, set[int]] | None = None,
                  dist: WindowDistribution | None = None) -> list[EvalReport]:
    """Like ``evaluate`` for several ensemble weightings sharing one set of forward passes."""
    dist = dist or cfg.test_distribution()
    results = [dict(per_video={}, conf=[], correct=[], entropy=[], predictions={}) for _ in alphas]
    for v in ds.videos:
        probs = predict_video(model, v.features, dist, alphas)
        for res, p in zip(results, probs):
            pred, conf = predict_labels(p)
            scores = segmentation_scores(pred, v.frame_labels)
            if activity_sets is not None:
                scores["out_of_activity"] = 100.0 * out_of_activity_rate(pred, activity_sets[v.activity])
            res["per_video"][v.id] = scores
            res["conf"].append(conf)
            res["correct"].append(pred == v.frame_labels)
            res["entropy"].append(wrong_prediction_entropy(p, pred, v.frame_labels))
            res["predictions"][v.id] = (pred, conf)
    reports = []
    for res in results:
        keys = next(iter(res["per_video"].values())).keys()
        metrics = {k: float(np.mean([s[k] for s in res["per_video"].values()])) for k in keys}
        conf = np.concatenate(res["conf"])
        correct = np.concatenate(res["correct"])
        bins = calibration_curve(conf, correct, cfg.calibration_bins)
        reports.append(EvalReport(metrics, res["per_video"], bins, np.concatenate(res["entropy"]),
                                  res["predictions"]))
    return reports


def per_layer_reports(model: C2FTCN, ds: Dataset, cfg: TrainConfig, **kw) -> dict[str, EvalReport]:
    """Reports for each decoder layer alone and for the configured ensemble."""
    names = [f"layer{i}" for i in range(1, 7)] + ["ensemble"]
    alphas = [one_hot_alpha(i) for i in range(1, 7)] + [cfg.alpha]
    return dict(zip(names, evaluate_many(model, ds, cfg, alphas, **kw)))


# ------------------------------------------------------------------ k-fold

@dataclasses.dataclass
class KFoldResult:
    fold_reports: list[EvalReport]
    metrics: dict[str, float]
    splits: list[tuple[list[str], list[str]]]


def run_kfold(ds: Dataset, k: int, cfg: TrainConfig) -> KFoldResult:
    """Train one model per fold and average the held-out reports.

    The out-of-activity diagnostic uses action sets observed over the whole
    dataset, since a held-out activity may be absent from a training fold.
    """
    splits = kfold_splits(ds.ids(), k, cfg.seed)
    activity_sets = activity_action_sets(ds)
    reports = []
    for fold, (train_ids, test_ids) in enumerate(splits):
        train_ds = ds.subset(train_ids)
        fit_res = fit(train_ds, dataclasses.replace(cfg, seed=cfg.seed + fold))
        reports.append(evaluate(fit_res.model, ds.subset(test_ids), cfg, activity_sets=activity_sets))
    keys = reports[0].metrics.keys()
    metrics = {key: float(np.mean([r.metrics[key] for r in reports])) for key in keys}
    return KFoldResult(reports, metrics, splits)


# ------------------------------------------------------------------ recognition

def _recognition_forward(model: C2FTCN, x, mask, alpha, training):
    out = model.forward(x, mask, training=training)
    p_ens = c2f_ensemble(out.probs, alpha, x.shape[1])
    return model.recognition_forward(p_ens, mask)


def train_recognition(model: C2FTCN, ds: Dataset, cfg: TrainConfig) -> list[float]:
    """Optimise the activity loss end to end for ``cfg.epochs`` epochs.  Frame labels are never read."""
    rng = np.random.default_rng(cfg.seed)
    dist = cfg.train_distribution()
    params = model.params
    state = AdamState()
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        batches = _batches(len(ds.videos), cfg.batch_size, rng)
        for idx in batches:
            feats = [pool_features(ds.videos[i].features, None, sample_window(dist, rng)).features for i in idx]
            acts = np.array([ds.videos[i].activity for i in idx])
            x, _, mask = _stack_padded(feats, None)
            model.zero_grad()
            loss = recognition_loss(_recognition_forward(model, x, mask, cfg.alpha, True), acts)
            loss.backward()
            _step(params, state, cfg)
            total += float(loss.data)
        history.append(total / len(batches))
    return history


def recognize(model: C2FTCN, f: np.ndarray, dist: WindowDistribution, alpha=DEFAULT_ALPHA) -> np.ndarray:
    """Activity distribution averaged over the window distribution."""
    total = None
    for w, pw in dist.support():
        pooled = pool_features(f, None, w).features
        x, mask = pad_to_multiple(np.asarray(pooled, dtype=np.float64))
        with sg.no_grad():
            p_v = _recognition_forward(model, x[None], mask[None], alpha, False).data[0]
        total = pw * p_v if total is None else total + pw * p_v
    return total


def recognition_accuracy(model: C2FTCN, ds: Dataset, cfg: TrainConfig) -> float:
    dist = cfg.test_distribution()
    hits = [int(np.argmax(recognize(model, v.features, dist, cfg.alpha))) == v.activity for v in ds.videos]
    return 100.0 * float(np.mean(hits))
