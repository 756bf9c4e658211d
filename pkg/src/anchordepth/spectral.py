"""Spectral diagnostics of the anchor embedding Gram matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, EmptyMaskError, ShapeError


def gram(m) -> np.ndarray:
    """``C = M M^T``."""
    m = np.asarray(m, dtype=np.float64)
    c = m @ m.T
    return 0.5 * (c + c.T)


def _round_robin(n: int):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = idx[i], idx[m - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def sym_eigen(c, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigenvalues (descending) and orthonormal eigenvectors of a symmetric matrix.

    Cyclic Jacobi rotations, visiting pairs in round-robin order so each round
    applies disjoint rotations at once. Stops when the off-diagonal Frobenius
    norm drops to ``tol * ||C||_F``.
    """
    a = np.array(c, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = np.linalg.norm(a)
    rounds = _round_robin(n) if n > 1 else []
    off = 0.0
    for _ in range(max_sweeps + 1):
        offd = a.copy()
        np.fill_diagonal(offd, 0.0)
        off = np.linalg.norm(offd)
        if off <= tol * norm:
            break
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            nz = apq != 0.0
            cs = np.ones_like(apq)
            sn = np.zeros_like(apq)
            if nz.any():
                theta = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                cs[nz] = 1.0 / np.sqrt(t * t + 1.0)
                sn[nz] = t * cs[nz]
            # columns: A <- A J
            ap = a[:, p].copy()
            aq = a[:, q].copy()
            a[:, p] = ap * cs - aq * sn
            a[:, q] = ap * sn + aq * cs
            # rows: A <- J^T A
            ap = a[p, :].copy()
            aq = a[q, :].copy()
            a[p, :] = cs[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + cs[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp = v[:, p].copy()
            vq = v[:, q].copy()
            v[:, p] = vp * cs - vq * sn
            v[:, q] = vp * sn + vq * cs
    else:
        raise ConvergenceError(
            f"Jacobi did not converge in {max_sweeps} sweeps", residual=off / max(norm, 1e-300)
        )
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def energy_concentration(eigenvalues, tol: float = 1e-12) -> float:
    """Leading eigenvalue over the sum, after clamping roundoff negatives to 0."""
    s = np.asarray(eigenvalues, dtype=np.float64)
    scale = float(np.sqrt(np.sum(s * s)))
    if np.any(s < -tol * scale - 0.0):
        raise DomainError(f"matrix is not positive semidefinite (min eigenvalue {s.min()})")
    s = np.where(s < 0, 0.0, s)
    total = s.sum()
    if not total > 0:
        raise DomainError("energy concentration undefined for an all-zero spectrum")
    return float(s.max() / total)


@dataclass(frozen=True)
class LeadingMode:
    mu1: float
    v1: np.ndarray
    similarity: float
    degenerate: bool
    shift_alignment: float  # |<v1, v1 of M^T M + lam I>|


def leading_similarity(m, ridge_lambda: float = 0.0) -> LeadingMode:
    """Leading eigenpair of ``M^T M`` and its overlap ``|v1[0]|`` with the constant channel."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 1:
        raise ShapeError(f"design matrix must be (N, K>=1), got {m.shape}")
    mtm = m.T @ m
    mu, vec = sym_eigen(mtm)
    v1 = vec[:, 0]
    degenerate = len(mu) > 1 and (mu[0] - mu[1]) < 1e-12 * abs(mu[0])
    shifted = mtm + ridge_lambda * np.eye(len(mu))
    _, vec_s = sym_eigen(shifted)
    align = float(abs(vec_s[:, 0] @ v1))
    return LeadingMode(float(mu[0]), v1, float(min(1.0, abs(v1[0]))), bool(degenerate), align)


def gating_stats(g, mask=None):
    """Masked mean and population variance of gating channel 0."""
    g0 = np.asarray(g, dtype=np.float64)[0]
    if mask is None:
        mask = np.ones(g0.shape, dtype=bool)
    vals = g0[np.asarray(mask, dtype=bool)]
    if vals.size == 0:
        raise EmptyMaskError("gating statistics over an empty mask")
    mean = float(vals.mean())
    return mean, float(np.mean((vals - mean) ** 2))


def eigenbasis_coefficients(u, y) -> np.ndarray:
    """``alpha_l = u_l^T y`` for eigenvector columns ``u``."""
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if u.shape[0] != y.shape[0]:
        raise ShapeError(f"{u.shape[0]}-dim eigenvectors vs {y.shape[0]} targets")
    return u.T @ y


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: np.ndarray
    eta1: float
    alpha: np.ndarray
    mu1: float
    v1: np.ndarray
    similarity: float
    degenerate: bool
    g0_mean: float
    g0_var: float


def spectral_report(m, y, g=None, mask=None, ridge_lambda: float = 1e-3) -> SpectralReport:
    c = gram(m)
    s, u = sym_eigen(c)
    lead = leading_similarity(m, ridge_lambda)
    if g is not None:
        g0_mean, g0_var = gating_stats(g, mask)
    else:
        g0_mean = g0_var = float("nan")
    return SpectralReport(s, energy_concentration(s), eigenbasis_coefficients(u, y), lead.mu1,
                          lead.v1, lead.similarity, lead.degenerate, g0_mean, g0_var)
