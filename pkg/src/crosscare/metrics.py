"""Discrimination and calibration metrics.

The AUROC uses the rank (Mann-Whitney) formulation with mid-ranks for
ties, so it equals P(score+ > score-) + P(tie)/2.  Isotonic recalibration
is a pool-adjacent-violators fit yielding a piecewise-constant
non-decreasing map; scores that compare equal are pooled before fitting
so the map is well defined.  The paired significance test enumerates the
exact two-sided null over all sign assignments of the fold differences,
dropping zero differences and mid-ranking tied magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .validation import check_binary_labels, check_same_length, check_vector


def _mid_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    scores = check_vector(scores, "scores")
    labels = check_binary_labels(labels, "labels")
    check_same_length(scores, labels, "scores", "labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUROC: labels contain a single class")
    ranks = _mid_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class IsotonicModel:
    breakpoints: np.ndarray  # strictly increasing scores
    values: np.ndarray  # non-decreasing fitted means

    def predict(self, scores) -> np.ndarray:
        scores = check_vector(scores, "scores")
        idx = np.searchsorted(self.breakpoints, scores, side="right") - 1
        return self.values[np.clip(idx, 0, len(self.values) - 1)]


def isotonic_fit(scores, labels) -> IsotonicModel:
    scores = check_vector(scores, "scores")
    labels = np.asarray(labels, dtype=float)
    check_same_length(scores, labels, "scores", "labels")
    if len(scores) == 0:
        raise ValueError("cannot fit isotonic regression on zero points")
    order = np.argsort(scores, kind="mergesort")
    xs, ys = scores[order], labels[order]

    # Pool equal scores into weighted points first.
    points = []  # [score, mean, weight]
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        points.append([xs[i], float(ys[i : j + 1].mean()), j - i + 1])
        i = j + 1

    # Pool adjacent violators; each block keeps its first score.
    blocks = []  # [first_score, mean, weight]
    for score, mean, weight in points:
        blocks.append([score, mean, weight])
        while len(blocks) >= 2 and blocks[-2][1] > blocks[-1][1]:
            s_prev, m_prev, w_prev = blocks[-2]
            _, m_cur, w_cur = blocks[-1]
            merged = (m_prev * w_prev + m_cur * w_cur) / (w_prev + w_cur)
            blocks[-2:] = [[s_prev, merged, w_prev + w_cur]]
    return IsotonicModel(
        breakpoints=np.array([b[0] for b in blocks]),
        values=np.array([b[1] for b in blocks]),
    )


class IsotonicCalibrator(TransformerMixin, BaseEstimator):
    """Estimator wrapper over isotonic_fit, for pipeline-style use."""

    def fit(self, X, y) -> "IsotonicCalibrator":
        self.model_ = isotonic_fit(X, y)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("IsotonicCalibrator.fit must run first")
        return self.model_.predict(X)

    predict = transform


def calibration_curve(
    probs, labels, n_bins: int = 10, winsor_q: float = 0.999
) -> list[tuple[float, float, int]]:
    """(mean predicted, observed fraction, count) per non-empty bin.

    Predictions are winsorised at the winsor_q quantile and binned with
    equal widths on [0, cap]; winsor_q=1.0 keeps the raw maximum.
    """
    probs = check_vector(probs, "probs")
    labels = np.asarray(labels, dtype=float)
    check_same_length(probs, labels, "probs", "labels")
    if not 0 < winsor_q <= 1:
        raise ValueError(f"winsor_q must lie in (0, 1], got {winsor_q}")
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    cap = float(np.quantile(probs, winsor_q))
    if cap <= 0:
        return [(0.0, float(labels.mean()), len(labels))]
    clipped = np.minimum(probs, cap)
    idx = np.minimum((clipped / cap * n_bins).astype(int), n_bins - 1)
    curve = []
    for b in range(n_bins):
        inside = idx == b
        n = int(inside.sum())
        if n == 0:
            continue
        curve.append((float(clipped[inside].mean()), float(labels[inside].mean()), n))
    return curve


def wilcoxon_paired(fold_scores_a, fold_scores_b) -> float:
    a = check_vector(fold_scores_a, "fold_scores_a")
    b = check_vector(fold_scores_b, "fold_scores_b")
    check_same_length(a, b, "fold_scores_a", "fold_scores_b")
    diffs = a - b
    diffs = diffs[diffs != 0]
    n = len(diffs)
    if n == 0:
        return 1.0
    if n > 20:
        raise ValueError(f"exact enumeration supports up to 20 pairs, got {n}")
    ranks = _mid_ranks(np.abs(diffs))
    w_obs = ranks[diffs > 0].sum()
    centre = ranks.sum() / 2.0
    observed_dev = abs(w_obs - centre)
    hits = 0
    for signs in product((0.0, 1.0), repeat=n):
        w = float(np.dot(signs, ranks))
        if abs(w - centre) >= observed_dev - 1e-12:
            hits += 1
    return hits / 2.0**n
