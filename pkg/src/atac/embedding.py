"""Unit-norm vector algebra and augmentation drift statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, TooFewViews, ZeroVector

NORM_FLOOR = 1e-12


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < NORM_FLOOR:
        raise ZeroVector(f"cannot normalize vector with norm {n:.3g}")
    return v / n


def normalize_rows(v: np.ndarray) -> np.ndarray:
    """Row-wise ``normalize`` for a batch of shape ``(..., D)``."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < NORM_FLOOR):
        raise ZeroVector("batch contains a zero vector")
    return v / n


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class DriftStats:
    drifts: np.ndarray  # (n, D), f_x minus each view
    mean_drift: np.ndarray
    tau: float
    degenerate: bool


def drift_stats(f_x, views) -> DriftStats:
    f_x = np.asarray(f_x, dtype=np.float64)
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 2:
        raise DimensionMismatch("views must be a list of vectors")
    if len(views) < 2:
        raise TooFewViews(f"need at least 2 views, got {len(views)}")
    if views.shape[1] != f_x.shape[-1] or f_x.ndim != 1:
        raise DimensionMismatch(f"f_x {f_x.shape} vs views {views.shape}")
    drifts = f_x[None, :] - views
    mean_drift = drifts.mean(axis=0)
    tau, degenerate = batch_tau(drifts[:, None, :], mean_drift[None, :])
    return DriftStats(drifts, mean_drift, float(tau[0]), bool(degenerate[0]))


def batch_tau(drifts: np.ndarray, mean_drift: np.ndarray):
    """Consistency score for drifts ``(n, B, D)`` against ``(B, D)`` means.

    Returns ``(tau, degenerate)``, both of shape ``(B,)``. Degenerate rows
    (any zero drift, or a zero mean) get ``tau = 0``.
    """
    dn = np.linalg.norm(drifts, axis=-1)
    mn = np.linalg.norm(mean_drift, axis=-1)
    degenerate = (mn < NORM_FLOOR) | np.any(dn < NORM_FLOOR, axis=0)
    safe_dn = np.where(dn < NORM_FLOOR, 1.0, dn)
    safe_mn = np.where(mn < NORM_FLOOR, 1.0, mn)
    cos = np.einsum("nbd,bd->nb", drifts, mean_drift) / (safe_dn * safe_mn)
    tau = np.clip(cos, -1.0, 1.0).mean(axis=0)
    return np.where(degenerate, 0.0, tau), degenerate


def batch_drift_stats(f_x: np.ndarray, views: np.ndarray):
    """Vectorised ``drift_stats`` for ``f_x (B, D)`` and ``views (n, B, D)``."""
    if views.shape[0] < 2:
        raise TooFewViews(f"need at least 2 views, got {views.shape[0]}")
    if views.shape[1:] != f_x.shape:
        raise DimensionMismatch(f"f_x {f_x.shape} vs views {views.shape}")
    drifts = f_x[None] - views
    mean_drift = drifts.mean(axis=0)
    tau, degenerate = batch_tau(drifts, mean_drift)
    return drifts, mean_drift, tau, degenerate


def tau_backward(drifts: np.ndarray, mean_drift: np.ndarray, g_tau: np.ndarray) -> np.ndarray:
    """Gradient of ``tau`` w.r.t. each drift, given upstream ``g_tau (B,)``.

    Shapes follow :func:`batch_tau`. Degenerate rows receive zero gradient.
    """
    n = drifts.shape[0]
    dn = np.linalg.norm(drifts, axis=-1)[..., None]  # (n, B, 1)
    mn = np.linalg.norm(mean_drift, axis=-1)[None, :, None]  # (1, B, 1)
    bad = (mn[0, :, 0] < NORM_FLOOR) | np.any(dn[..., 0] < NORM_FLOOR, axis=0)
    dn = np.where(dn < NORM_FLOOR, 1.0, dn)
    mn = np.where(mn < NORM_FLOOR, 1.0, mn)
    m = mean_drift[None]
    cos = np.sum(drifts * m, axis=-1, keepdims=True) / (dn * mn)
    # d cos_i / d d_i and d cos_i / d mean
    dcos_dd = m / (dn * mn) - cos * drifts / dn**2
    dcos_dm = drifts / (dn * mn) - cos * m / mn**2
    g_mean = dcos_dm.sum(axis=0)  # (B, D)
    grad = (dcos_dd + g_mean[None] / n) / n
    grad = grad * np.where(bad, 0.0, g_tau)[None, :, None]
    return grad
