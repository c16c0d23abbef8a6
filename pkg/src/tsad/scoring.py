"""Association discrepancy, the anomaly criterion, and thresholding.

The discrepancy between the Gaussian prior association and the learned
series association is a per-position symmetric KL divergence, averaged
over heads and layers. The point-wise anomaly score weights the squared
reconstruction error by a softmax of the negative discrepancy taken
across each window, so positions whose attention collapses onto the
local neighbourhood are emphasized. Thresholds come from a percentile of
a pooled score distribution driven by an expected anomaly ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError

KL_FLOOR = 1e-12


@dataclass
class ScoreVector:
    scores: np.ndarray  # per scored position, >= 0
    window_starts: np.ndarray
    threshold: float | None = None


def _check_row_stochastic(arr: np.ndarray, what: str):
    sums = arr.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-6 or (arr < 0).any():
        raise ContractError(f"{what} rows must be non-negative and sum to 1")


def association_discrepancy(prior_list, series_list) -> Tensor:
    """Per-position symmetric KL between prior and series rows.

    Input lists hold one map per layer, each ... x heads x N x N. The
    result drops the two trailing axes and the head axis: (... x N),
    averaged over heads and layers. A 1e-12 floor inside the logarithms
    keeps the sparse zeros finite; because the same floor sits on both
    sides, the symmetrized value is always >= 0 and is 0 iff the rows
    match.
    """
    if len(prior_list) != len(series_list) or not prior_list:
        raise ContractError("need matching non-empty per-layer map lists")
    total = None
    for p, s in zip(prior_list, series_list):
        p, s = ad.as_tensor(p), ad.as_tensor(s)
        _check_row_stochastic(p.data, "prior")
        _check_row_stochastic(s.data, "series")
        diff = ad.sub(p, s)
        logdiff = ad.sub(ad.log(ad.add(p, KL_FLOOR)), ad.log(ad.add(s, KL_FLOOR)))
        sym = ad.tsum(ad.mul(diff, logdiff), axis=-1)  # ... x heads x N
        per_pos = ad.tmean(sym, axis=-2)  # ... x N, averaged over heads
        total = per_pos if total is None else ad.add(total, per_pos)
    return ad.mul(total, 1.0 / len(prior_list))


def anomaly_score(x: np.ndarray, x_adapt: np.ndarray, assdis: np.ndarray,
                  window_starts=None) -> ScoreVector:
    """score_i = softmax(-assdis)_i * ||x_i - x_adapt_i||^2, per window.

    ``x`` and ``x_adapt`` are B x W x d, ``assdis`` is B x W; the softmax
    runs across each window's positions. Scores come back flattened in
    time order.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adapt = np.asarray(x_adapt, dtype=np.float64)
    assdis = np.asarray(assdis, dtype=np.float64)
    if x.shape != x_adapt.shape or assdis.shape != x.shape[:2]:
        raise ContractError("score inputs disagree on window geometry")
    err = ((x - x_adapt) ** 2).sum(axis=-1)  # B x W
    z = -assdis
    z = z - z.max(axis=-1, keepdims=True)
    weights = np.exp(z)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    scores = (weights * err).reshape(-1)
    if window_starts is None:
        window_starts = np.arange(x.shape[0]) * x.shape[1]
    return ScoreVector(scores=scores, window_starts=np.asarray(window_starts))


def threshold_from_ratio(scores_pool, anomaly_ratio: float) -> float:
    """Nearest-rank percentile threshold: flag the top ``anomaly_ratio``%.

    The threshold is the k-th largest pooled score with
    k = ceil(ratio% * pool size), so exactly the top ratio% of the pool
    scores >= threshold, up to ties.
    """
    pool = np.asarray(scores_pool, dtype=np.float64).reshape(-1)
    if pool.size == 0:
        raise ContractError("threshold needs a non-empty score pool")
    if not 0.0 < anomaly_ratio < 100.0:
        raise ContractError("anomaly_ratio must lie in (0, 100)")
    k = int(np.ceil(pool.size * anomaly_ratio / 100.0))
    k = min(max(k, 1), pool.size)
    return float(np.sort(pool)[pool.size - k])


def detect(scores, threshold: float, point_adjust: bool = False, truth=None) -> np.ndarray:
    """Flag score >= threshold; optionally extend hits across true segments.

    With ``point_adjust`` every ground-truth anomalous segment containing
    at least one flagged point is marked detected in full. That protocol
    requires the truth labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(threshold):
        raise ContractError("threshold must be finite")
    pred = (scores >= threshold).astype(np.int64)
    if not point_adjust:
        return pred
    if truth is None:
        raise ContractError("point adjustment needs ground-truth labels")
    return point_adjusted(pred, np.asarray(truth))


def point_adjusted(pred, truth) -> np.ndarray:
    pred = np.asarray(pred).astype(np.int64).copy()
    truth = np.asarray(truth).astype(np.int64)
    if pred.shape != truth.shape:
        raise ContractError("prediction/truth lengths differ")
    t = 0
    n = len(truth)
    while t < n:
        if truth[t] == 1:
            end = t
            while end < n and truth[end] == 1:
                end += 1
            if pred[t:end].any():
                pred[t:end] = 1
            t = end
        else:
            t += 1
    return pred


def loss_differential(baseline_losses, our_losses) -> np.ndarray:
    """Per-batch log-loss gap; positive where the second run is lower."""
    a = np.asarray(baseline_losses, dtype=np.float64)
    b = np.asarray(our_losses, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("loss histories must have equal lengths")
    if (a <= 0).any() or (b <= 0).any():
        raise DomainError("losses must be strictly positive")
    return np.log(a) - np.log(b)


# ---------------------------------------------------------------------------
# score CSV round trip


def write_scores_csv(path, sv: ScoreVector, raw_pred, adjusted_pred):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "score", "threshold", "raw_pred", "adjusted_pred"])
        thr = repr(float(sv.threshold)) if sv.threshold is not None else ""
        for i, s in enumerate(sv.scores):
            writer.writerow(
                [i, repr(float(s)), thr, int(raw_pred[i]), int(adjusted_pred[i])]
            )


def read_scores_csv(path):
    """Returns (scores, threshold, raw_pred, adjusted_pred) arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["position", "score"]:
        raise ContractError(f"{path}: not a scores file")
    scores, raw, adj = [], [], []
    threshold = None
    for row in rows[1:]:
        scores.append(float(row[1]))
        if row[2]:
            threshold = float(row[2])
        raw.append(int(row[3]))
        adj.append(int(row[4]))
    return (
        np.asarray(scores),
        threshold,
        np.asarray(raw, dtype=np.int64),
        np.asarray(adj, dtype=np.int64),
    )
