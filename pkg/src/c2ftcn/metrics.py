"""Segmentation scores (MoF, edit, F1@k) and calibration diagnostics."""

from __future__ import annotations

import dataclasses
from typing import NamedTuple, Sequence

import numpy as np

F1_THRESHOLDS = (0.10, 0.25, 0.50)


class MetricError(ValueError):
    pass


class Segment(NamedTuple):
    label: int
    start: int
    end: int  # exclusive


def to_segments(labels: Sequence) -> list[Segment]:
    labels = list(labels)
    segs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segs.append(Segment(labels[start], start, t))
            start = t
    return segs


def mof(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"length mismatch: {pred.shape} vs {gt.shape}")
    valid = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = valid.sum()
    if n == 0:
        raise MetricError("MoF undefined without valid frames")
    return 100.0 * np.count_nonzero((pred == gt) & valid) / n


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


def edit_score(pred, gt) -> float:
    if len(pred) == 0 or len(gt) == 0:
        raise MetricError("edit score needs nonempty sequences")
    p = [s.label for s in to_segments(pred)]
    g = [s.label for s in to_segments(gt)]
    dist = levenshtein(p, g)
    return max(0.0, 100.0 * (1.0 - dist / max(len(p), len(g))))


class F1Result(NamedTuple):
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def f1_at(pred, gt, tau: float) -> F1Result:
    """Segment F1 where a prediction hits its best-IoU same-class segment if IoU >= tau."""
    return segment_f1(to_segments(pred), to_segments(gt), tau)


def segment_f1(p_segs: Sequence[Segment], g_segs: Sequence[Segment], tau: float) -> F1Result:
    """``f1_at`` on explicit segment lists, which need not tile the timeline."""
    if not 0 < tau < 1:
        raise MetricError(f"IoU threshold must lie in (0, 1), got {tau}")
    g_label = np.array([s.label for s in g_segs])
    g_start = np.array([s.start for s in g_segs])
    g_end = np.array([s.end for s in g_segs])
    hit = np.zeros(len(g_segs), dtype=bool)
    tp = fp = 0
    for s in p_segs:
        inter = np.minimum(s.end, g_end) - np.maximum(s.start, g_start)
        union = np.maximum(s.end, g_end) - np.minimum(s.start, g_start)
        iou = np.where(g_label == s.label, np.maximum(inter, 0) / union, 0.0)
        j = int(np.argmax(iou)) if len(iou) else -1
        if j >= 0 and iou[j] >= tau and not hit[j]:
            tp += 1
            hit[j] = True
        else:
            fp += 1
    fn = int(len(g_segs) - hit.sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Result(100 * precision, 100 * recall, 100 * f1, tp, fp, fn)


def segmentation_scores(pred, gt) -> dict[str, float]:
    scores = {"mof": mof(pred, gt), "edit": edit_score(pred, gt)}
    for tau in F1_THRESHOLDS:
        scores[f"f1@{round(tau * 100)}"] = f1_at(pred, gt, tau).f1
    return scores


@dataclasses.dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    accuracy: float        # nan when empty
    mean_confidence: float  # nan when empty

    @property
    def empty(self) -> bool:
        return self.count == 0

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)


def calibration_curve(confidences, correct, n_bins: int = 10) -> list[CalibrationBin]:
    """Accuracy per confidence bin ``(n/N, (n+1)/N]``; a confidence of exactly 0 joins the first bin."""
    if n_bins < 2:
        raise MetricError("need at least two calibration bins")
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    ok = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != ok.shape:
        raise MetricError("confidences and correctness flags differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise MetricError("confidences must lie in [0, 1]")
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    bins = []
    for n in range(n_bins):
        sel = idx == n
        count = int(sel.sum())
        acc = float(ok[sel].mean()) if count else float("nan")
        mc = float(conf[sel].mean()) if count else float("nan")
        bins.append(CalibrationBin(edges[n], edges[n + 1], count, acc, mc))
    return bins


def calibration_series(bins: Sequence[CalibrationBin]) -> list[tuple[float, float]]:
    """(bin midpoint, accuracy minus midpoint) for every nonempty bin."""
    return [(b.midpoint, b.accuracy - b.midpoint) for b in bins if not b.empty]


def expected_calibration_error(bins: Sequence[CalibrationBin]) -> float:
    total = sum(b.count for b in bins)
    if total == 0:
        return float("nan")
    return sum(b.count * abs(b.accuracy - b.mean_confidence) for b in bins if not b.empty) / total


def wrong_prediction_entropy(p, pred, gt) -> np.ndarray:
    """Shannon entropy (nats) of each frame whose predicted label is wrong."""
    p = np.asarray(p, dtype=np.float64)
    wrong = np.asarray(pred) != np.asarray(gt)
    rows = p[wrong]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(rows > 0, rows * np.log(rows), 0.0)
    return -terms.sum(axis=-1)
