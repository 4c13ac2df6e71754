"""Representation diagnostics: feature rank, matrix rank, dormant units, DCI."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.model_selection import KFold, StratifiedKFold, cross_val_predict

from .errors import ConfigError, DimensionError

DORMANT_THRESHOLD = 0.025
RANK_TOL = 1e-6
FEATURE_EPS = 0.01


def _matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D activation matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("activation matrix has non-finite entries")
    return m


def feature_rank(m, eps: float = FEATURE_EPS) -> int:
    """Smallest number of principal directions keeping ``1 - eps`` of the variance."""
    if not 0.0 < eps < 1.0:
        raise ConfigError(f"eps must lie in (0, 1), got {eps}")
    m = _matrix(m)
    s2 = np.linalg.svd(m - m.mean(0), compute_uv=False) ** 2
    total = s2.sum()
    if total == 0.0:
        return 0
    return int(np.searchsorted(np.cumsum(s2), (1.0 - eps) * total) + 1)


def matrix_rank(m, tol: float = RANK_TOL) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    if tol <= 0:
        raise ConfigError(f"tol must be positive, got {tol}")
    s = np.linalg.svd(_matrix(m), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > tol * s[0]).sum())


def dormant_ratio(m, threshold: float = DORMANT_THRESHOLD) -> float:
    """Fraction of units whose mean |activation|, relative to the layer mean, is <= threshold."""
    if threshold < 0:
        raise ConfigError(f"threshold must be non-negative, got {threshold}")
    per_unit = np.abs(_matrix(m)).mean(0)
    layer = per_unit.mean()
    if layer == 0.0:
        return 1.0
    return float((per_unit / layer <= threshold).mean())


@dataclass(frozen=True)
class DciScores:
    disentanglement: float
    completeness: float
    informativeness: float
    importance: np.ndarray


def _entropy(p: np.ndarray, base: int, axis: int) -> np.ndarray:
    if base <= 1:
        return np.zeros(np.delete(p.shape, axis))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis) / np.log(base)


def importance_matrix(factors: np.ndarray, reps: np.ndarray) -> np.ndarray:
    """``|spearman(z_j, f_k)|`` with rows = representation dims, cols = factors."""
    imp = np.zeros((reps.shape[1], factors.shape[1]))
    for j in range(reps.shape[1]):
        if np.ptp(reps[:, j]) == 0:
            continue
        for k in range(factors.shape[1]):
            imp[j, k] = abs(spearmanr(reps[:, j], factors[:, k]).statistic)
    return np.nan_to_num(imp)


def dci(factors, reps, folds: int = 5, ridge: float = 1e-3, seed: int = 0) -> DciScores:
    """Disentanglement, completeness and informativeness of ``reps`` w.r.t. ``factors``."""
    f = np.asarray(factors, dtype=np.float64)
    z = np.asarray(reps, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if z.ndim == 1:
        z = z[:, None]
    if len(f) != len(z):
        raise DimensionError(f"{len(f)} factor rows vs {len(z)} representation rows")
    if len(f) < 20:
        raise ConfigError("DCI needs at least 20 samples")
    keep = np.ptp(f, axis=0) > 0
    if not keep.all():
        warnings.warn(f"excluding constant factor columns {np.flatnonzero(~keep).tolist()}", stacklevel=2)
        f = f[:, keep]
    if f.shape[1] == 0:
        raise ConfigError("every factor column is constant")

    imp = importance_matrix(f, z)
    n_z, n_f = imp.shape
    total = imp.sum()
    if total == 0:
        d = c = 0.0
    else:
        row = imp.sum(1)
        p_code = np.divide(imp, row[:, None], out=np.zeros_like(imp), where=row[:, None] > 0)
        d_per = 1.0 - _entropy(p_code, n_f, 1)
        d = float((d_per * row / total).sum())
        col = imp.sum(0)
        p_fac = np.divide(imp, col[None], out=np.zeros_like(imp), where=col[None] > 0)
        c_per = np.where(col > 0, 1.0 - _entropy(p_fac, n_z, 0), 0.0)
        c = float(c_per.mean())

    cv = KFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = []
    for k in range(f.shape[1]):
        pred = cross_val_predict(Ridge(alpha=ridge), z, f[:, k], cv=cv)
        ss = ((f[:, k] - f[:, k].mean()) ** 2).sum()
        scores.append(1.0 - ((f[:, k] - pred) ** 2).sum() / ss)
    info = float(np.clip(np.mean(scores), 0.0, 1.0))
    return DciScores(float(np.clip(d, 0, 1)), float(np.clip(c, 0, 1)), info, imp)


def probe_accuracy(z, labels, folds: int = 5, seed: int = 0) -> float:
    """Held-out accuracy of a linear classifier predicting ``labels`` from ``z``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels)
    folds = min(folds, int(np.bincount(np.unique(y, return_inverse=True)[1]).min()))
    if folds < 2:
        raise ConfigError("every class needs at least two samples")
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    pred = cross_val_predict(LogisticRegression(max_iter=1000), z, y, cv=cv)
    return float((pred == y).mean())
