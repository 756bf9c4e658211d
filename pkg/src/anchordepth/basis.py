"""Basis-map alignment: design matrix, ridge weights, log-scale field and recovered depth.

The log-scale correction is a weighted sum of basis maps,
``ell(x) = sum_m w_m E_m(x)``, with the weights fitted to anchor log ratios
by ridge regression and the depth recovered as ``D_mde * exp(ell)``.
"""
from __future__ import annotations

import io
import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .anchors import AnchorSet, compute_targets
from .errors import RankError, ShapeError
from .field import DepthMap
from .tensorio import atomic_write_bytes

log = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-3
LOG_CLAMP = 700.0


def assemble_design(e: np.ndarray, a: AnchorSet) -> np.ndarray:
    """``M[i, m] = E_m(a_i)``."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 3:
        raise ShapeError(f"embedding must be (K, H, W), got {e.shape}")
    rows, cols = a.rows, a.cols
    H, W = e.shape[1:]
    if len(a) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= H or cols.max() >= W):
        raise ShapeError("anchor outside the embedding grid")
    return e[:, rows, cols].T.copy()


def ridge_factor(m: np.ndarray, lam: float):
    """Cholesky factor of ``M^T M + lam I``; raises :class:`RankError` if singular."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 1:
        raise ShapeError(f"design matrix must be (N, K) with K >= 1, got {m.shape}")
    if lam < 0:
        raise ValueError(f"ridge lambda must be >= 0, got {lam}")
    a = m.T @ m
    a[np.diag_indices_from(a)] += lam
    scale = max(float(np.max(np.abs(np.diag(a)))), np.finfo(float).tiny)
    try:
        c = cho_factor(a, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        raise RankError("M^T M + lambda I is singular; use lambda > 0") from None
    piv = np.abs(np.diag(c[0]))
    if piv.min() ** 2 <= 1e-13 * scale:
        raise RankError("M^T M + lambda I is numerically singular; use lambda > 0")
    return c


def ridge_solve(m: np.ndarray, y: np.ndarray, lam: float = DEFAULT_RIDGE) -> np.ndarray:
    """``w* = (M^T M + lam I)^-1 M^T y`` via a Cholesky solve."""
    m = np.asarray(m, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if m.shape[0] != y.shape[0]:
        raise ShapeError(f"{m.shape[0]} design rows but {y.shape[0]} targets")
    if m.shape[0] < 1:
        raise ShapeError("need at least one anchor")
    return cho_solve(ridge_factor(m, lam), m.T @ y)


def predict_log_scale(e: np.ndarray, w: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if e.shape[0] != w.shape[0]:
        raise ShapeError(f"{e.shape[0]} basis maps but {w.shape[0]} weights")
    return np.tensordot(w, e, axes=1)


def clamp_log_scale(ell):
    """Clip to ``[-700, 700]``; returns ``(clipped, n_clipped)``."""
    ell = np.asarray(ell, dtype=np.float64)
    over = np.abs(ell) > LOG_CLAMP
    n = int(np.count_nonzero(over))
    return np.clip(ell, -LOG_CLAMP, LOG_CLAMP), n


def recover_depth(d_mde: DepthMap, ell) -> DepthMap:
    """``D_mde * exp(ell)``; the mask is carried over unchanged."""
    ell, n = clamp_log_scale(ell)
    if ell.shape != d_mde.shape:
        raise ShapeError(f"log-scale shape {ell.shape} != depth shape {d_mde.shape}")
    if n:
        log.warning("clamped %d log-scale values to +/-%g", n, LOG_CLAMP)
    out = np.where(d_mde.mask, d_mde.filled(1.0) * np.exp(ell), np.nan)
    return DepthMap(out, d_mde.mask)


def absorb_shift(s, t, d_mde: DepthMap):
    """Fold an affine ``s D + t`` into a pure log-scale ``log(s + t / D)``.

    Returns ``(ell, valid)`` where ``valid`` marks pixels whose argument was
    positive; other pixels are excluded and ``ell`` is 0 there.
    """
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), d_mde.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), d_mde.shape)
    arg = s + t / d_mde.filled(1.0)
    valid = d_mde.mask & (arg > 0)
    n_bad = int(np.count_nonzero(d_mde.mask & ~valid))
    if n_bad:
        log.warning("absorb_shift: %d pixels with nonpositive s + t/D flagged invalid", n_bad)
    ell = np.zeros(d_mde.shape)
    ell[valid] = np.log(arg[valid])
    return ell, valid


def align(e, d_mde: DepthMap, a: AnchorSet, lam: float = DEFAULT_RIDGE):
    """Full inference pass; returns ``(depth, weights)``."""
    m = assemble_design(e, a)
    y = compute_targets(a, d_mde)
    w = ridge_solve(m, y, lam)
    return recover_depth(d_mde, predict_log_scale(e, w)), w


def write_weights_csv(path, w) -> None:
    buf = io.StringIO()
    buf.write("index,weight\n")
    for i, v in enumerate(np.asarray(w, dtype=np.float64)):
        buf.write(f"{i},{float(v)!r}\n")
    atomic_write_bytes(path, buf.getvalue().encode())
