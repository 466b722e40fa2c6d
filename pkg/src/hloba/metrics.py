"""Error and calibration metrics, plus the paired block bootstrap used for comparisons."""
from __future__ import annotations

import numpy as np

from .observations import ObservationSet, apply_H


class UndefinedMetric(ValueError):
    pass


def weighted_rmse(x, x_truth, weights=None) -> float:
    """sqrt(sum w (x - x_truth)^2 / sum w); uniform weights by default."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(x_truth, dtype=float)
    if x.shape != t.shape:
        raise UndefinedMetric("state and truth differ in shape")
    if weights is None:
        return float(np.sqrt(np.mean((x - t) ** 2)))
    w = np.asarray(weights, dtype=float)
    if w.shape != x.shape or np.any(w < 0) or not w.sum() > 0:
        raise UndefinedMetric("weights must be nonnegative with a positive sum")
    return float(np.sqrt(np.sum(w * (x - t) ** 2) / w.sum()))


def obs_rmse(x, obs: ObservationSet) -> float:
    """RMSE of H(x) against the usable observations in ``obs``."""
    idx = obs.active
    if idx.size == 0:
        raise UndefinedMetric("no observations to verify against")
    d = apply_H(x, obs.network)[idx] - obs.values[idx]
    return float(np.sqrt(np.mean(d * d)))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape or a.size < 3:
        raise UndefinedMetric("pearson needs two vectors of equal length >= 3")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        raise UndefinedMetric("zero variance")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def block_means(series, window: int):
    """Means over consecutive non-overlapping blocks; a short tail is dropped."""
    s = np.asarray(series, dtype=float)
    if window < 1 or window > len(s):
        raise UndefinedMetric(f"window {window} does not fit a series of length {len(s)}")
    n = len(s) // window
    return s[: n * window].reshape(n, window, *s.shape[1:]).mean(axis=1)


def aggregated_correlation(errors, stds, window: int) -> float:
    """Mean spatial correlation between window-mean error and window-mean std.

    ``errors`` and ``stds`` are ``(n_cycles, n_x)``. Blocks where either field
    is constant are skipped; if every block is skipped the metric is undefined.
    """
    E, S = block_means(errors, window), block_means(stds, window)
    vals = []
    for e, s in zip(E, S):
        try:
            vals.append(pearson(e, s))
        except UndefinedMetric:
            continue
    if not vals:
        raise UndefinedMetric("no block had variance in both fields")
    return float(np.mean(vals))


def mean_rowwise_correlation(a, b) -> float:
    """Mean over rows of pearson(a[i], b[i]); undefined rows are skipped."""
    vals = []
    for x, y in zip(np.asarray(a, dtype=float), np.asarray(b, dtype=float)):
        try:
            vals.append(pearson(x, y))
        except UndefinedMetric:
            continue
    if not vals:
        raise UndefinedMetric("no row had variance in both inputs")
    return float(np.mean(vals))


def paired_block_bootstrap(a, b, rng, n_boot: int = 2000, block: int = 20,
                           level: float = 0.95, groups=None) -> dict:
    """Confidence interval for mean(a - b) resampling contiguous blocks.

    ``groups`` labels independent segments (e.g. seeds); blocks never cross a
    group boundary. Returns mean, lower and upper bounds.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    g = np.zeros(len(d), dtype=int) if groups is None else np.asarray(groups)
    labels = np.unique(g)
    L = min([block] + [int(np.sum(g == label)) for label in labels])
    starts = []
    for label in labels:
        pos = np.flatnonzero(g == label)
        # groups are contiguous, so these blocks never leave their group
        starts += list(pos[: len(pos) - L + 1])
    starts = np.asarray(starts)
    n_blocks = int(np.ceil(len(d) / L))
    means = np.empty(n_boot)
    for i in range(n_boot):
        s = rng.choice(starts, n_blocks)
        idx = (s[:, None] + np.arange(L)[None, :]).reshape(-1)[: len(d)]
        means[i] = d[idx].mean()
    tail = 0.5 * (1.0 - level) * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return {"mean": float(d.mean()), "lower": float(lo), "upper": float(hi),
            "level": level, "block": L, "n": int(len(d))}
