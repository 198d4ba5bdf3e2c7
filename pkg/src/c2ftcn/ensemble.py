"""Coarse-to-fine ensembling of the decoder layer outputs."""

from __future__ import annotations

import numpy as np

from . import seqgrad as sg
from .seqgrad import Tensor

DEFAULT_ALPHA = (0.0, 0.0, 0.25, 0.25, 0.25, 0.25)

# Un-normalised weight rows of the layer-count ablation, last layer only up to all six.
ABLATION_ALPHAS = (
    (0, 0, 0, 0, 0, 1),
    (0, 0, 0, 0, 1, 1),
    (0, 0, 0, 1, 1, 1),
    (0, 0, 1, 1, 1, 1),
    (0, 1, 1, 1, 1, 1),
    (1, 1, 1, 1, 1, 1),
)


class EnsembleConfigError(ValueError):
    pass


def normalize_alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or np.any(a < 0) or not np.all(np.isfinite(a)):
        raise EnsembleConfigError(f"ensemble weights must be finite and nonnegative, got {alpha!r}")
    total = a.sum()
    if total <= 0:
        raise EnsembleConfigError("ensemble weights are all zero")
    return a / total


def one_hot_alpha(layer: int, n_layers: int = 6) -> np.ndarray:
    """Weights selecting decoder layer ``layer`` (1-based) alone."""
    a = np.zeros(n_layers)
    a[layer - 1] = 1.0
    return a


def c2f_ensemble(probs, alpha=DEFAULT_ALPHA, t_out: int | None = None) -> Tensor:
    """Weighted sum of per-layer probabilities, each interpolated to ``t_out`` frames.

    Layers with zero weight are skipped entirely, so a one-hot weight on a
    layer whose length already equals ``t_out`` returns that layer unchanged.
    """
    a = normalize_alpha(alpha)
    if len(a) != len(probs):
        raise EnsembleConfigError(f"{len(a)} weights for {len(probs)} layers")
    probs = [p if isinstance(p, Tensor) else Tensor(p) for p in probs]
    if t_out is None:
        t_out = max(p.shape[-2] for p in probs)
    out = None
    for weight, p in zip(a, probs):
        if weight == 0:
            continue
        term = sg.upsample_linear(p, t_out)
        if weight != 1.0:
            term = term * weight
        out = term if out is None else out + term
    return out


def predict_labels(p) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame argmax label (ties to the lowest class) and its probability."""
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    labels = np.argmax(arr, axis=-1)
    conf = np.take_along_axis(arr, labels[..., None], axis=-1)[..., 0]
    return labels, conf
