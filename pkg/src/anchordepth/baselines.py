"""Reference alignment methods: global affine, piecewise affine, LWLR, grid scale, region-aware."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .anchors import AnchorSet
from .errors import InsufficientAnchorsError, RankError, ShapeError
from .field import DepthMap, lattice_interp_matrix, upsample_lattice

_EPS = 1e-12


@dataclass(frozen=True)
class AffineParams:
    s: float
    t: float


def _positive(values, mask) -> DepthMap:
    with np.errstate(invalid="ignore"):
        ok = mask & np.isfinite(values) & (values > 0)
    return DepthMap(np.where(ok, values, np.nan), ok)


def affine_lstsq(x, y, weights=None) -> AffineParams:
    """Least-squares ``y ~ s x + t``; scale-only when ``x`` has no spread."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 1:
        raise InsufficientAnchorsError("affine fit needs at least one anchor", shortfall=1)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    sw = w.sum()
    xm = (w * x).sum() / sw
    ym = (w * y).sum() / sw
    sxx = (w * (x - xm) ** 2).sum()
    if x.size < 2 or sxx <= _EPS * (w * x * x).sum():
        return AffineParams(float((w * x * y).sum() / (w * x * x).sum()), 0.0)
    s = (w * (x - xm) * (y - ym)).sum() / sxx
    return AffineParams(float(s), float(ym - s * xm))


def fit_global(d_mde: DepthMap, a: AnchorSet) -> AffineParams:
    """Constant scale and shift fitted to the anchors."""
    return affine_lstsq(d_mde.at(a.rows, a.cols), a.depths)


def apply_affine(d_mde: DepthMap, p: AffineParams) -> DepthMap:
    return _positive(p.s * d_mde.values + p.t, d_mde.mask)


def global_align(d_mde: DepthMap, a: AnchorSet) -> DepthMap:
    return apply_affine(d_mde, fit_global(d_mde, a))


# -- piecewise ------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseModel:
    edges: np.ndarray  # interior interval edges, strictly increasing
    params: tuple  # one AffineParams per interval

    def interval(self, depth) -> np.ndarray:
        return np.searchsorted(self.edges, depth, side="right")


def fit_piecewise(d_mde: DepthMap, a: AnchorSet, n_bins_max: int = 4) -> PiecewiseModel:
    n = len(a)
    if n < 2:
        raise InsufficientAnchorsError("piecewise fit needs >= 2 anchors", shortfall=2 - n)
    x = d_mde.at(a.rows, a.cols)
    y = a.depths
    order = np.argsort(x, kind="stable")
    xs = x[order]
    nb = max(1, min(n_bins_max, n // 2))
    groups = np.array_split(np.arange(n), nb)
    edges = [0.5 * (xs[g[0] - 1] + xs[g[0]]) for g in groups[1:]]
    edges = list(np.unique(edges))

    def counts(e):
        return np.bincount(np.searchsorted(e, x, side="right"), minlength=len(e) + 1)

    c = counts(edges)
    while len(edges) and c.min() < 2:
        i = int(np.argmin(c))
        if i == 0:
            drop = 0
        elif i == len(c) - 1:
            drop = len(edges) - 1
        else:
            # merge toward the neighbour whose anchors lie closer in depth
            b = np.searchsorted(edges, x, side="right")
            here = x[b == i].mean() if c[i] else 0.5 * (edges[i - 1] + edges[i])
            left = x[b == i - 1].mean() if c[i - 1] else edges[i - 1]
            right = x[b == i + 1].mean() if c[i + 1] else edges[i]
            drop = i - 1 if here - left <= right - here else i
        del edges[drop]
        c = counts(edges)
    edges = np.asarray(edges, dtype=np.float64)
    b = np.searchsorted(edges, x, side="right")
    params = tuple(affine_lstsq(x[b == k], y[b == k]) for k in range(len(edges) + 1))
    return PiecewiseModel(edges, params)


def apply_piecewise(d_mde: DepthMap, model: PiecewiseModel) -> DepthMap:
    d = d_mde.filled(1.0)
    b = model.interval(d)
    s = np.array([p.s for p in model.params])[b]
    t = np.array([p.t for p in model.params])[b]
    return _positive(s * d + t, d_mde.mask)


# -- LWLR -----------------------------------------------------------------


@dataclass(frozen=True)
class LwlrConfig:
    sigma: Optional[float] = None  # pixels; None -> 0.1 * image diagonal
    lambda_t: float = 1.0
    eval_stride: int = 8

    def resolved_sigma(self, shape) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return 0.1 * float(np.hypot(*shape))


def _stride_knots(n: int, stride: int) -> np.ndarray:
    k = np.arange(0, n, stride)
    if k[-1] != n - 1:
        k = np.append(k, n - 1)
    return k


def lwlr_local_params(pr, pc, ar, ac, x, y, sigma, lambda_t):
    """Solve the weighted ridge problem at query pixels ``(pr, pc)``.

    Returns ``(s, t)`` arrays. Falls back to weighted scale-only where the 2x2
    system is singular and to ``(1, 0)`` where all weights underflow.
    """
    d2 = (pr[:, None] - ar[None, :]) ** 2 + (pc[:, None] - ac[None, :]) ** 2
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    sw = w.sum(1)
    sx = w @ x
    sxx = w @ (x * x)
    sy = w @ y
    sxy = w @ (x * y)
    a11, a12, a22 = sxx, sx, sw + lambda_t
    det = a11 * a22 - a12 * a12
    scale = np.maximum(a11 * a22, np.finfo(float).tiny)
    ok = det > 1e-12 * scale
    s = np.ones_like(sw)
    t = np.zeros_like(sw)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_full = (a22 * sxy - a12 * sy) / det
        t_full = (a11 * sy - a12 * sxy) / det
        s_only = sxy / sxx
    s = np.where(ok, s_full, s)
    t = np.where(ok, t_full, t)
    fallback = ~ok & (sxx > 0)
    s = np.where(fallback, s_only, s)
    t = np.where(fallback, 0.0, t)
    zero = sw <= 0
    s = np.where(zero, 1.0, s)
    t = np.where(zero, 0.0, t)
    return s, t


def fit_lwlr(d_mde: DepthMap, a: AnchorSet, cfg: LwlrConfig = LwlrConfig()) -> DepthMap:
    if len(a) < 2:
        raise InsufficientAnchorsError("LWLR needs >= 2 anchors", shortfall=2 - len(a))
    if cfg.eval_stride < 1:
        raise ShapeError("eval_stride must be >= 1")
    pre = fit_global(d_mde, a)
    # stage 2 regresses on the raw affine values; positivity is only enforced on output
    d_tilde = pre.s * d_mde.filled(1.0) + pre.t
    H, W = d_mde.shape
    sigma = cfg.resolved_sigma((H, W))
    x = d_tilde[a.rows, a.cols]
    y = a.depths
    rk = _stride_knots(H, cfg.eval_stride)
    ck = _stride_knots(W, cfg.eval_stride)
    pr, pc = np.meshgrid(rk, ck, indexing="ij")
    s, t = lwlr_local_params(
        pr.ravel().astype(float), pc.ravel().astype(float),
        a.rows.astype(float), a.cols.astype(float), x, y, sigma, cfg.lambda_t,
    )
    s_field = upsample_lattice(s.reshape(pr.shape), rk, ck, (H, W))
    t_field = upsample_lattice(t.reshape(pr.shape), rk, ck, (H, W))
    return _positive(s_field * d_tilde + t_field, d_mde.mask)


# -- grid -----------------------------------------------------------------


@dataclass(frozen=True)
class GridScaleField:
    grid_rows: int
    grid_cols: int
    row_knots: np.ndarray
    col_knots: np.ndarray
    scales: np.ndarray  # (grid_rows, grid_cols)
    pre: AffineParams

    def dense(self, shape) -> np.ndarray:
        return upsample_lattice(self.scales, self.row_knots, self.col_knots, shape)


def _grid_basis(rows, cols, row_knots, col_knots):
    """Sparse bilinear weights: ``(n, 4)`` vertex indices and weights."""
    gc = len(col_knots)
    rl, rf = lattice_interp_matrix(rows, row_knots)
    cl, cf = lattice_interp_matrix(cols, col_knots)
    rh = rl + (len(row_knots) > 1)
    ch = cl + (len(col_knots) > 1)
    idx = np.stack([rl * gc + cl, rl * gc + ch, rh * gc + cl, rh * gc + ch], axis=1)
    wts = np.stack([(1 - rf) * (1 - cf), (1 - rf) * cf, rf * (1 - cf), rf * cf], axis=1)
    return idx, wts


def grid_laplacian(grid_rows: int, grid_cols: int) -> np.ndarray:
    n = grid_rows * grid_cols
    lap = np.zeros((n, n))
    for r in range(grid_rows):
        for c in range(grid_cols):
            k = r * grid_cols + c
            for rr, cc in ((r + 1, c), (r, c + 1)):
                if rr < grid_rows and cc < grid_cols:
                    j = rr * grid_cols + cc
                    lap[k, k] += 1
                    lap[j, j] += 1
                    lap[k, j] -= 1
                    lap[j, k] -= 1
    return lap


def fit_grid(d_mde: DepthMap, a: AnchorSet, grid_rows: int = 8, grid_cols: int = 8,
             mu: float = 0.1):
    """Vertex scales on a coarse lattice after global pre-alignment.

    Returns ``(GridScaleField, DepthMap)``.
    """
    if len(a) < 1:
        raise InsufficientAnchorsError("grid fit needs >= 1 anchor", shortfall=1)
    H, W = d_mde.shape
    pre = fit_global(d_mde, a)
    d_tilde = pre.s * d_mde.filled(1.0) + pre.t
    x = d_tilde[a.rows, a.cols]
    y = a.depths
    row_knots = np.linspace(0, H - 1, grid_rows)
    col_knots = np.linspace(0, W - 1, grid_cols)
    idx, wts = _grid_basis(a.rows.astype(float), a.cols.astype(float), row_knots, col_knots)
    nv = grid_rows * grid_cols
    A = np.zeros((len(a), nv))
    for j in range(4):
        np.add.at(A, (np.arange(len(a)), idx[:, j]), wts[:, j] * x)
    lhs = A.T @ A + mu * grid_laplacian(grid_rows, grid_cols)
    rhs = A.T @ y
    ev = np.linalg.eigvalsh(lhs)
    if ev[0] <= 1e-12 * max(ev[-1], np.finfo(float).tiny):
        raise RankError("grid system is singular; use a smoothness weight mu > 0")
    scales = np.linalg.solve(lhs, rhs).reshape(grid_rows, grid_cols)
    g = GridScaleField(grid_rows, grid_cols, row_knots, col_knots, scales, pre)
    depth = _positive(g.dense((H, W)) * d_tilde, d_mde.mask)
    return g, depth


# -- region-aware ---------------------------------------------------------


@dataclass(frozen=True)
class RegionModel:
    labels: np.ndarray  # merged label field
    params: dict = field(default_factory=dict)  # label -> (s, beta, gamma, t)
    merges: tuple = ()  # (absorbed, into) in merge order


def boundary_lengths(labels: np.ndarray) -> dict:
    """4-neighbour boundary length between each unordered label pair."""
    out = {}
    for a, b in ((labels[:-1, :], labels[1:, :]), (labels[:, :-1], labels[:, 1:])):
        diff = a != b
        if not diff.any():
            continue
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        pairs, cnt = np.unique(np.stack([lo, hi], axis=1), axis=0, return_counts=True)
        for (p, q), n in zip(pairs, cnt):
            out[(int(p), int(q))] = out.get((int(p), int(q)), 0) + int(n)
    return out


def merge_regions(labels: np.ndarray, rows, cols, min_anchors: int = 4):
    """Absorb regions with too few anchors into the neighbour with the longest shared boundary."""
    labels = np.asarray(labels).astype(np.int64).copy()
    merges = []
    while True:
        present = np.unique(labels)
        if len(present) == 1:
            break
        counts = {int(k): 0 for k in present}
        for k in labels[rows, cols]:
            counts[int(k)] += 1
        short = [k for k in present if counts[int(k)] < min_anchors]
        if not short:
            break
        victim = int(min(short, key=lambda k: (counts[int(k)], k)))
        bl = boundary_lengths(labels)
        nbrs = {}
        for (p, q), n in bl.items():
            if p == victim:
                nbrs[q] = n
            elif q == victim:
                nbrs[p] = n
        if nbrs:
            into = min(nbrs, key=lambda k: (-nbrs[k], k))
        else:
            into = int(min(k for k in present if k != victim))
        labels[labels == victim] = into
        merges.append((victim, int(into)))
    return labels, tuple(merges)


def _region_design(depth, rows, cols, shape):
    H, W = shape
    u = cols / (W - 1) if W > 1 else np.zeros_like(cols, dtype=float)
    v = rows / (H - 1) if H > 1 else np.zeros_like(rows, dtype=float)
    return np.stack([depth, u, v, np.ones_like(depth)], axis=1)


def fit_region(d_mde: DepthMap, a: AnchorSet, labels):
    """Per-region ``s D + beta u + gamma v + t`` with iterative merging.

    Returns ``(RegionModel, DepthMap)``.
    """
    labels = np.asarray(labels)
    if labels.shape != d_mde.shape:
        raise ShapeError(f"label shape {labels.shape} != depth shape {d_mde.shape}")
    if len(a) < 4:
        raise InsufficientAnchorsError("region fit needs >= 4 anchors", shortfall=4 - len(a))
    rows, cols = a.rows, a.cols
    merged, merges = merge_regions(labels, rows, cols)
    x = d_mde.at(rows, cols)
    y = a.depths
    anchor_lab = merged[rows, cols]
    params = {}
    H, W = d_mde.shape
    for k in np.unique(merged):
        sel = anchor_lab == k
        X = _region_design(x[sel], rows[sel].astype(float), cols[sel].astype(float), (H, W))
        if sel.sum() >= 4 and np.linalg.matrix_rank(X) == 4:
            coef = np.linalg.lstsq(X, y[sel], rcond=None)[0]
            params[int(k)] = tuple(float(c) for c in coef)
        else:
            p = affine_lstsq(x[sel], y[sel])
            params[int(k)] = (p.s, 0.0, 0.0, p.t)
    rr, cc = np.mgrid[0:H, 0:W]
    u = cc / (W - 1) if W > 1 else np.zeros((H, W))
    v = rr / (H - 1) if H > 1 else np.zeros((H, W))
    coef = np.zeros((4, H, W))
    for k, p in params.items():
        coef[:, merged == k] = np.asarray(p)[:, None]
    d = d_mde.filled(1.0)
    out = coef[0] * d + coef[1] * u + coef[2] * v + coef[3]
    return RegionModel(merged, params, merges), _positive(out, d_mde.mask)
