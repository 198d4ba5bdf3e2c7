"""Frame, transition, action-presence and activity losses.

All segmentation losses take batched probabilities ``(B, T, C)`` with a
``(B, T)`` valid-frame mask and return the mean over videos.  A 2-D input is
treated as a batch of one.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import seqgrad as sg
from .seqgrad import PROB_FLOOR, Tensor


@dataclasses.dataclass
class LossConfig:
    lambda_tr: float = 0.15
    eps_max: float = 4.0
    prob_floor: float = PROB_FLOOR
    use_action_loss: bool = True

    def __post_init__(self):
        if self.lambda_tr < 0:
            raise ValueError("lambda_tr must be >= 0")
        if self.eps_max <= 0:
            raise ValueError("eps_max must be > 0")


class LabelError(ValueError):
    pass


def _batched(p, y=None, mask=None):
    p = p if isinstance(p, Tensor) else Tensor(p)
    squeeze = p.data.ndim == 2
    if squeeze:
        p = sg.take(p, (None,))
    B, T, C = p.shape
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(B, T)
    if y is not None:
        y = np.asarray(y).reshape(B, T)
        bad = mask & ((y < 0) | (y >= C))
        if bad.any():
            raise LabelError(f"label {int(y[bad][0])} outside [0, {C})")
    return p, y, mask


def _valid_counts(mask):
    n = mask.sum(axis=1).astype(np.float64)
    if np.any(n == 0):
        raise sg.DegenerateError("a video has no valid frames")
    return n


def cross_entropy(p, y, mask=None, floor: float = PROB_FLOOR) -> Tensor:
    p, y, mask = _batched(p, y, mask)
    B, T, C = p.shape
    n = _valid_counts(mask)
    onehot = np.zeros((B, T, C))
    np.put_along_axis(onehot, np.where(mask, y, 0)[..., None], 1.0, axis=-1)
    weights = onehot * (mask / n[:, None])[..., None] / B
    return -sg.weighted_sum(sg.log(p, floor), weights)


def transition_loss(p, mask=None, eps_max: float = 4.0, floor: float = PROB_FLOOR) -> Tensor:
    """Clipped squared log-probability jumps between neighbouring valid frames, divided by T."""
    p, _, mask = _batched(p, None, mask)
    B, T, C = p.shape
    if T < 2:
        return Tensor(np.asarray(0.0))
    n = _valid_counts(mask)
    logp = sg.log(p, floor)
    diff = sg.absolute(sg.time_slice(logp, 1, T) - sg.time_slice(logp, 0, T - 1))
    clipped = sg.clip_max(diff, eps_max)
    pair = mask[:, 1:] & mask[:, :-1]
    weights = (pair / n[:, None])[..., None] / B
    return sg.weighted_sum(sg.square(clipped), np.broadcast_to(weights, clipped.shape))


def action_presence(y, mask, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    mask = np.asarray(mask, dtype=bool)
    present = np.zeros(y.shape[:-1] + (num_classes,))
    for idx in np.ndindex(*y.shape[:-1]):
        present[idx][np.unique(y[idx][mask[idx]])] = 1.0
    return present


def action_loss(p, y, mask=None, floor: float = PROB_FLOOR) -> Tensor:
    """Video-level binary cross-entropy on each class's temporal-max probability."""
    p, y, mask = _batched(p, y, mask)
    B, T, C = p.shape
    _valid_counts(mask)
    present = action_presence(y, mask, C)
    pi_pres = sg.temporal_max(p, mask)
    pos = sg.weighted_sum(sg.log(pi_pres, floor), present / B)
    neg = sg.weighted_sum(sg.log(1.0 - pi_pres, floor), (1.0 - present) / B)
    return -(pos + neg)


def joint_loss(p, y, mask=None, cfg: LossConfig | None = None) -> tuple[Tensor, dict[str, float]]:
    """``L_AL + L_CE + lambda_tr * L_TR``; also returns the components as floats."""
    cfg = cfg or LossConfig()
    ce = cross_entropy(p, y, mask, cfg.prob_floor)
    tr = transition_loss(p, mask, cfg.eps_max, cfg.prob_floor)
    total = ce + cfg.lambda_tr * tr if cfg.lambda_tr else ce
    al_value = 0.0
    if cfg.use_action_loss:
        al = action_loss(p, y, mask, cfg.prob_floor)
        total = al + total
        al_value = float(al.data)
    parts = {"ce": float(ce.data), "tr": float(tr.data), "al": al_value, "total": float(total.data)}
    return total, parts


def recognition_loss(p_v, y_v, floor: float = PROB_FLOOR) -> Tensor:
    """Mean negative log-probability of the true activity over the batch."""
    p_v = p_v if isinstance(p_v, Tensor) else Tensor(p_v)
    if p_v.data.ndim == 1:
        p_v = sg.take(p_v, (None,))
    B, K = p_v.shape
    y_v = np.asarray(y_v).reshape(B)
    if np.any((y_v < 0) | (y_v >= K)):
        raise LabelError(f"activity label outside [0, {K})")
    onehot = np.zeros((B, K))
    onehot[np.arange(B), y_v] = 1.0 / B
    return -sg.weighted_sum(sg.log(p_v, floor), onehot)
