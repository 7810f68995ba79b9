"""Run and dataset diagnostics: autocorrelation, performance correlation, traces."""

from __future__ import annotations

import numpy as np

from ..acquisition import RunHistory
from ..core import SequenceDataset


def _lag1_pairs(ds: SequenceDataset) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (o_t, o_{t+1}) pairs over all instances and valid steps."""
    if ds.T < 2:
        raise ValueError("autocorrelation needs T >= 2")
    valid = np.arange(ds.T - 1)[None, :] < (ds.lengths[:, None] - 1)
    return ds.obs[:, :-1][valid], ds.obs[:, 1:][valid]


def _pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Pearson correlation; NaN where either column is constant."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    den = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (a * b).sum(axis=0) / np.where(den > 0, den, 1.0), np.nan)


def feature_autocorr(ds: SequenceDataset, with_flag: bool = False):
    """Lag-1 autocorrelation per feature, averaged over features.

    Zero-variance features are excluded; the flag lists their indices.
    """
    a, b = _lag1_pairs(ds)
    r = _pearson_columns(a, b)
    excluded = [int(k) for k in np.nonzero(np.isnan(r))[0]]
    value = float(np.nanmean(r)) if len(excluded) < r.size else float("nan")
    return (value, excluded) if with_flag else value


def feature_autocorr_by_step(ds: SequenceDataset) -> np.ndarray:
    """Feature-averaged correlation between steps k and k+1, across instances; length T-1."""
    if ds.T < 2:
        raise ValueError("autocorrelation needs T >= 2")
    out = np.full(ds.T - 1, np.nan)
    for k in range(ds.T - 1):
        alive = ds.lengths > k + 1
        if alive.sum() >= 2:
            r = _pearson_columns(ds.obs[alive, k], ds.obs[alive, k + 1])
            if not np.all(np.isnan(r)):
                out[k] = np.nanmean(r)
    return out


def performance_corr_matrix(history: RunHistory | np.ndarray) -> np.ndarray:
    """Pearson correlation between per-step score columns; NaN marks undefined entries."""
    Y = history.Y if isinstance(history, RunHistory) else np.asarray(history, dtype=np.float64)
    if Y.shape[0] < 3:
        raise ValueError("need at least three acquisitions")
    C = Y - Y.mean(axis=0)
    norm = np.sqrt((C * C).sum(axis=0))
    ok = norm > 0
    safe = np.where(ok, norm, 1.0)
    R = (C.T @ C) / np.outer(safe, safe)
    R = np.clip(R, -1.0, 1.0)
    R[~ok, :] = np.nan
    R[:, ~ok] = np.nan
    idx = np.nonzero(ok)[0]
    R[idx, idx] = 1.0
    return R


def mean_offdiag(R: np.ndarray) -> float:
    mask = ~np.eye(len(R), dtype=bool)
    return float(np.nanmean(R[mask]))


def top_k_trajectory(history: RunHistory, k: int = 20) -> np.ndarray:
    """For each step, the mean raw hyperparameter vector of the k best acquisitions."""
    if k < 1:
        raise ValueError("k must be positive")
    X, Y = history.X, history.Y
    k = min(k, len(Y))
    out = np.empty((history.T, X.shape[1]))
    for t in range(history.T):
        top = np.argsort(-Y[:, t], kind="mergesort")[:k]
        out[t] = X[top].mean(axis=0)
    return out


def embedding_trace(history: RunHistory) -> np.ndarray | None:
    """The (T, embed_dim) dataset embeddings stored by an SMS-DKL run, if any."""
    z = history.extras.get("embeddings")
    return None if z is None else np.asarray(z)
