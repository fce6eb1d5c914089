"""Margins, ramp loss, error rates, disparities, and exhaustive-enumeration
divergence oracles over finite hypothesis classes.

Scoring functions restricted to a fixed sample set are held as ScoreTables
(n samples x k classes).  The induced labeling takes the argmax with ties
broken toward the smallest class index, which keeps every oracle
deterministic.  All expectations are empirical means over the provided
sample index sets.

The oracles enumerate hypotheses outright.  They are meant for small test
instances and refuse anything past explicit size limits rather than grind.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, SizeLimitError

MAX_ORACLE_HYPOTHESES = 10_000
MAX_ORACLE_PAIR_HYPOTHESES = 1_000
MAX_ORACLE_SAMPLES = 100_000
MAX_ORACLE_WORK = 20_000_000  # hypotheses x samples


@dataclass
class ScoreTable:
    """Scores of one hypothesis on a fixed sample set, with optional labels."""

    scores: np.ndarray  # (n, k) float64
    labels: np.ndarray | None = None  # (n,) int64

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[1] < 2:
            raise ShapeError("scores must be (n, k) with k >= 2")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.scores.shape[0],):
                raise ShapeError("labels must be (n,)")

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def k(self) -> int:
        return self.scores.shape[1]

    def predictions(self) -> np.ndarray:
        """h_f: argmax score, smallest class index on ties."""
        return np.argmax(self.scores, axis=1)


class FiniteHypothesisClass:
    """A finite list of score tables over one shared sample set."""

    def __init__(self, tables: Sequence[ScoreTable]):
        if not tables:
            raise ValueError("hypothesis class must be nonempty")
        n, k = tables[0].n, tables[0].k
        for t in tables:
            if (t.n, t.k) != (n, k):
                raise ShapeError("all tables must share (n, k)")
        self.tables = list(tables)
        self.scores = np.stack([t.scores for t in self.tables])  # (H, n, k)

    def __len__(self) -> int:
        return len(self.tables)

    @property
    def n(self) -> int:
        return self.scores.shape[1]

    @property
    def k(self) -> int:
        return self.scores.shape[2]

    def predictions(self) -> np.ndarray:
        """(H, n) labelings of every hypothesis."""
        return np.argmax(self.scores, axis=2)

    def pi_1_values(self) -> np.ndarray:
        """Scalar family {x -> f(x, y)}: one row per (hypothesis, class)."""
        H, n, k = self.scores.shape
        return self.scores.transpose(0, 2, 1).reshape(H * k, n)

    def pi_h_values(self) -> np.ndarray:
        """Scalar family {x -> f(x, h_f(x))}: the top score per sample."""
        return np.max(self.scores, axis=2)


# ---------------------------------------------------------------------------
# margins and ramp loss

def margin_of(scores: np.ndarray, y: int) -> float:
    """Half the gap between the score of y and the best other class."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise ShapeError("need a 1-D score vector with k >= 2")
    if not 0 <= y < scores.size:
        raise ShapeError(f"label {y} out of range for k={scores.size}")
    others = np.delete(scores, y)
    return 0.5 * (scores[y] - np.max(others))


def margins_at(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorized margin_of over the rows of a score table."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = scores.shape[0]
    chosen = scores[np.arange(n), labels]
    masked = scores.copy()
    masked[np.arange(n), labels] = -np.inf
    return 0.5 * (chosen - np.max(masked, axis=1))


def ramp(x, rho: float):
    """Piecewise-linear surrogate: 1 below 0, 0 above rho, linear between."""
    if rho <= 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    return np.clip(1.0 - np.asarray(x, dtype=np.float64) / rho, 0.0, 1.0)


def margin_error(table: ScoreTable, rho: float) -> float:
    """Mean ramp loss of the margins at the true labels."""
    if table.labels is None:
        raise ValueError("margin_error needs a labeled table")
    return float(np.mean(ramp(margins_at(table.scores, table.labels), rho)))


def zero_one_error(table: ScoreTable) -> float:
    if table.labels is None:
        raise ValueError("zero_one_error needs a labeled table")
    return float(np.mean(table.predictions() != table.labels))


# ---------------------------------------------------------------------------
# disparities

def zero_one_disparity(h: np.ndarray, h_prime: np.ndarray) -> float:
    """Fraction of samples where two labelings differ."""
    h = np.asarray(h, dtype=np.int64)
    h_prime = np.asarray(h_prime, dtype=np.int64)
    if h.shape != h_prime.shape:
        raise ShapeError(f"labelings differ in shape: {h.shape} vs {h_prime.shape}")
    return float(np.mean(h != h_prime))


def margin_disparity(f: ScoreTable, f_prime: ScoreTable, rho: float) -> float:
    """Mean ramp loss of f_prime's margin at f's predicted labels."""
    if f.scores.shape != f_prime.scores.shape:
        raise ShapeError("score tables must share (n, k)")
    pseudo = f.predictions()
    return float(np.mean(ramp(margins_at(f_prime.scores, pseudo), rho)))


# ---------------------------------------------------------------------------
# enumeration oracles

def _check_index_sets(n: int, s1: np.ndarray, s2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s1 = np.asarray(s1, dtype=np.int64)
    s2 = np.asarray(s2, dtype=np.int64)
    if s1.size == 0 or s2.size == 0:
        raise ValueError("sample index sets must be nonempty")
    for s in (s1, s2):
        if s.min() < 0 or s.max() >= n:
            raise ShapeError(f"sample index out of range [0, {n})")
    if max(s1.size, s2.size) > MAX_ORACLE_SAMPLES:
        raise SizeLimitError(f"oracle limited to {MAX_ORACLE_SAMPLES} samples")
    return s1, s2


def _check_class_size(size: int, limit: int, n_samples: int = 0) -> None:
    if size > limit:
        raise SizeLimitError(f"oracle limited to {limit} hypotheses, got {size}")
    if size * n_samples > MAX_ORACLE_WORK:
        raise SizeLimitError(
            f"oracle limited to {MAX_ORACLE_WORK} hypothesis-sample pairs"
        )


def zero_one_discrepancy(h: np.ndarray, hypotheses: FiniteHypothesisClass,
                         s1, s2) -> float:
    """sup over h' of (0-1 disparity on s2 minus 0-1 disparity on s1)."""
    h = np.asarray(h, dtype=np.int64)
    s1, s2 = _check_index_sets(hypotheses.n, s1, s2)
    _check_class_size(len(hypotheses), MAX_ORACLE_HYPOTHESES, hypotheses.n)
    preds = hypotheses.predictions()  # (H, n)
    diff = preds != h[None, :]
    gaps = diff[:, s2].mean(axis=1) - diff[:, s1].mean(axis=1)
    return float(np.max(gaps))


def margin_discrepancy_oracle(f: ScoreTable, hypotheses: FiniteHypothesisClass,
                              s1, s2, rho: float) -> tuple[float, int]:
    """sup over f' of (margin disparity on s2 minus margin disparity on s1).

    Returns (value, argmax hypothesis index); exact by enumeration.
    """
    if f.scores.shape != (hypotheses.n, hypotheses.k):
        raise ShapeError("f must share (n, k) with the hypothesis class")
    s1, s2 = _check_index_sets(hypotheses.n, s1, s2)
    _check_class_size(len(hypotheses), MAX_ORACLE_HYPOTHESES, hypotheses.n)
    pseudo = f.predictions()
    H, n, _ = hypotheses.scores.shape
    rows = np.arange(n)
    chosen = hypotheses.scores[:, rows, pseudo]
    masked = hypotheses.scores.copy()
    masked[:, rows, pseudo] = -np.inf
    margins = 0.5 * (chosen - np.max(masked, axis=2))  # (H, n)
    losses = ramp(margins, rho)
    gaps = losses[:, s2].mean(axis=1) - losses[:, s1].mean(axis=1)
    best = int(np.argmax(gaps))
    return float(gaps[best]), best


def hdeltah_divergence_oracle(hypotheses: FiniteHypothesisClass, s1, s2) -> float:
    """sup over pairs (h, h') of |disparity on s2 - disparity on s1|."""
    s1, s2 = _check_index_sets(hypotheses.n, s1, s2)
    _check_class_size(len(hypotheses), MAX_ORACLE_PAIR_HYPOTHESES, hypotheses.n)
    preds = hypotheses.predictions()
    best = 0.0
    for i in range(len(hypotheses)):
        diff = preds != preds[i][None, :]  # (H, n)
        gaps = np.abs(diff[:, s2].mean(axis=1) - diff[:, s1].mean(axis=1))
        best = max(best, float(np.max(gaps)))
    return best


def discrepancy_divergence_oracle(hypotheses: FiniteHypothesisClass, s1, s2,
                                  loss: Callable[[np.ndarray, np.ndarray], np.ndarray]
                                  ) -> float:
    """sup over pairs of |E_s2 loss(h', h) - E_s1 loss(h', h)|.

    ``loss`` maps two label arrays to per-sample losses in [0, 1].
    """
    s1, s2 = _check_index_sets(hypotheses.n, s1, s2)
    _check_class_size(len(hypotheses), MAX_ORACLE_PAIR_HYPOTHESES, hypotheses.n)
    preds = hypotheses.predictions()
    best = 0.0
    for i in range(len(hypotheses)):
        for j in range(len(hypotheses)):
            values = np.asarray(loss(preds[j], preds[i]), dtype=np.float64)
            if values.shape != (hypotheses.n,):
                raise ShapeError("loss must return one value per sample")
            if np.any(values < 0) or np.any(values > 1):
                raise ValueError("loss values must lie in [0, 1]")
            gap = abs(float(values[s2].mean() - values[s1].mean()))
            best = max(best, gap)
    return best
