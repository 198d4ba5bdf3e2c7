"""Multi-resolution feature augmentation and its test-time expectation."""

from __future__ import annotations

import dataclasses
from fractions import Fraction
from typing import Callable

import numpy as np

from .seqgrad import interpolate

# Base windows used for Breakfast, 50Salads and GTEA.
DATASET_BASE_WINDOWS = {"breakfast": 10, "50salads": 20, "gtea": 4}


@dataclasses.dataclass(frozen=True)
class WindowDistribution:
    w0: int
    pi0: float
    windows: tuple[int, ...]
    probs: tuple[float, ...]

    @property
    def w_min(self) -> int:
        return self.w0 // 2

    @property
    def w_max(self) -> int:
        return 2 * self.w0

    @property
    def r(self) -> int:
        return self.w_max - self.w_min

    def prob(self, w: int) -> float:
        try:
            return self.probs[self.windows.index(w)]
        except ValueError:
            return 0.0

    def support(self) -> list[tuple[int, float]]:
        return [(w, p) for w, p in zip(self.windows, self.probs) if p > 0]

    @classmethod
    def point_mass(cls, w: int) -> "WindowDistribution":
        """Degenerate distribution used to run inference at a single window."""
        return cls(w0=w, pi0=1.0, windows=(w,), probs=(1.0,))


def build_distribution(w0: int, pi0: float = 0.5) -> WindowDistribution:
    """``pi0`` on the base window, the rest spread uniformly over ``[w0 // 2, 2 * w0]``."""
    if w0 < 2:
        raise ValueError(f"base window must be >= 2, got {w0}")
    if not 0.0 <= pi0 <= 1.0:
        raise ValueError(f"pi0 must lie in [0, 1], got {pi0}")
    lo, hi = w0 // 2, 2 * w0
    r = hi - lo
    other = (Fraction(1) - Fraction(pi0)) / r
    windows = tuple(range(lo, hi + 1))
    probs = tuple(float(Fraction(pi0)) if w == w0 else float(other) for w in windows)
    return WindowDistribution(w0=w0, pi0=float(pi0), windows=windows, probs=probs)


def sample_window(dist: WindowDistribution, rng: np.random.Generator) -> int:
    if rng.random() < dist.pi0 or len(dist.windows) == 1:
        return dist.w0
    others = [w for w in dist.windows if w != dist.w0]
    return int(others[rng.integers(len(others))])


@dataclasses.dataclass
class PooledSample:
    features: np.ndarray
    labels: np.ndarray | None
    window: int


def _window_starts(T: int, w: int) -> np.ndarray:
    return np.arange(0, T, w)


def pool_features(f: np.ndarray, y: np.ndarray | None, w: int) -> PooledSample:
    """Max-pool features and majority-vote labels over windows ``[w*t, w*t + w)``.

    The last window is truncated at ``T``, so the pooled length is ``ceil(T / w)``.
    Label ties go to the label that occurs first inside the window.
    """
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    f = np.asarray(f)
    T = f.shape[0]
    w = min(w, T)
    starts = _window_starts(T, w)
    feats = np.maximum.reduceat(f, starts, axis=0)
    labels = None
    if y is not None:
        y = np.asarray(y)
        if len(y) != T:
            raise ValueError(f"{len(y)} labels for {T} frames")
        labels = np.empty(len(starts), dtype=np.int64)
        for i, s in enumerate(starts):
            win = y[s:s + w]
            vals, first, counts = np.unique(win, return_index=True, return_counts=True)
            best = counts.max()
            labels[i] = win[first[counts == best].min()]
    return PooledSample(feats, labels, w)


def upsample_probs(p: np.ndarray, t_out: int) -> np.ndarray:
    if p.shape[-2] == t_out:
        return p
    return interpolate(p, t_out)


def test_time_aggregate(infer: Callable[[np.ndarray], np.ndarray], f: np.ndarray,
                        dist: WindowDistribution, t_out: int | None = None) -> np.ndarray:
    """Expected per-frame probabilities over the window distribution.

    ``infer`` maps pooled features ``(T_w, d)`` to probabilities ``(T_w, C)``.
    Every window with positive probability is evaluated, in increasing order.
    """
    f = np.asarray(f)
    if t_out is None:
        t_out = f.shape[0]
    total = None
    for w, pw in dist.support():
        pooled = pool_features(f, None, w)
        p = upsample_probs(np.asarray(infer(pooled.features)), t_out)
        total = pw * p if total is None else total + pw * p
    return total
