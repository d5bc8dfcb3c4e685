"""Streaming progressive evaluation over fixed-size instance windows.

Each prediction is recorded before the model trains on its instance
(test-then-train). Windows close at exact multiples of the window size;
a trailing partial window is kept separately and never enters the
aggregates. AUC is undefined for single-class windows and RIG for
degenerate base rates; undefined values are excluded from aggregates
rather than imputed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EvalError

DEFAULT_WINDOW = 20_000


def window_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-based (Mann-Whitney) AUC with ties counted as 0.5.

    Returns None for a single-class window (undefined, not 0).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    # average ranks across tie groups (1-based ranks)
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def window_logloss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of probabilities against 0/1 labels."""
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def window_rig(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Relative information gain: 1 - LL_model / LL_baserate.

    The baseline predicts the window's empirical base rate for every
    instance; a degenerate base rate (0 or 1) makes RIG undefined.
    """
    y = np.asarray(labels, dtype=np.float64)
    base = float(y.mean())
    if base <= 0.0 or base >= 1.0:
        return None
    ll_model = window_logloss(scores, y)
    ll_base = -(base * math.log(base) + (1.0 - base) * math.log(1.0 - base))
    return 1.0 - ll_model / ll_base


@dataclass
class WindowRecord:
    index: int
    count: int
    auc: float | None
    logloss: float
    rig: float | None
    pos_rate: float


class WindowedMetrics:
    """Accumulates (prediction, label) pairs into fixed-size windows."""

    def __init__(self, window_size: int = DEFAULT_WINDOW):
        if window_size < 1:
            raise EvalError(f"window size must be >= 1, got {window_size}")
        self.window_size = window_size
        self.windows: list[WindowRecord] = []
        self.partial: WindowRecord | None = None
        self._scores: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []
        self._buffered = 0

    def record(self, prediction: float, label: int) -> None:
        """Score one instance; must be called before the model trains on it."""
        self.record_batch(np.asarray([prediction]), np.asarray([label]))

    def record_batch(self, predictions: np.ndarray, labels: np.ndarray) -> None:
        predictions = np.asarray(predictions, dtype=np.float64)
        labels = np.asarray(labels)
        if predictions.shape != labels.shape:
            raise EvalError(f"{predictions.shape} predictions vs {labels.shape} labels")
        if len(predictions) and (predictions.min() <= 0.0 or predictions.max() >= 1.0):
            raise EvalError("predictions must lie strictly inside (0, 1)")
        start = 0
        n = len(predictions)
        while start < n:
            take = min(self.window_size - self._buffered, n - start)
            self._scores.append(predictions[start:start + take])
            self._labels.append(labels[start:start + take])
            self._buffered += take
            start += take
            if self._buffered == self.window_size:
                self._close_window()

    def _close_window(self) -> None:
        scores = np.concatenate(self._scores)
        labels = np.concatenate(self._labels)
        self.windows.append(_make_window(len(self.windows), scores, labels))
        self._scores, self._labels, self._buffered = [], [], 0

    def finish(self) -> None:
        """Close out the trailing partial window (kept apart from full ones)."""
        if self._buffered:
            scores = np.concatenate(self._scores)
            labels = np.concatenate(self._labels)
            self.partial = _make_window(len(self.windows), scores, labels)
            self._scores, self._labels, self._buffered = [], [], 0

    def aggregate(self) -> dict[str, dict[str, float]]:
        """avg/median/max/min/std per metric over defined full windows only."""
        if not self.windows:
            raise EvalError("no full windows to aggregate")
        out: dict[str, dict[str, float]] = {}
        for metric in ("auc", "logloss", "rig", "pos_rate"):
            values = [getattr(w, metric) for w in self.windows]
            defined = np.array([v for v in values if v is not None], dtype=np.float64)
            if defined.size == 0:
                raise EvalError(f"no defined windows for metric '{metric}'")
            out[metric] = {
                "avg": float(defined.mean()),
                "median": float(np.median(defined)),
                "max": float(defined.max()),
                "min": float(defined.min()),
                "std": float(defined.std()),  # population std
                "windows": int(defined.size),
            }
        return out


def _make_window(index: int, scores: np.ndarray, labels: np.ndarray) -> WindowRecord:
    return WindowRecord(
        index=index,
        count=len(scores),
        auc=window_auc(scores, labels),
        logloss=window_logloss(scores, labels),
        rig=window_rig(scores, labels),
        pos_rate=float(np.asarray(labels, dtype=np.float64).mean()),
    )
