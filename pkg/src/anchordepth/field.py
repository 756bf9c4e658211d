"""Dense per-pixel fields, validity masks and depth maps.

Scalar fields are plain ``(H, W)`` float64 arrays and field stacks are
``(C, H, W)`` arrays. Pixel coordinates are ``(row, col)`` with the origin at
the top-left and integer pixel centres. Invalid pixels of a :class:`DepthMap`
carry NaN internally; every read goes through the mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, EmptyMaskError, ShapeError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def as_field(a, ndim: int = 2) -> np.ndarray:
    """Return ``a`` as a float64 array, checking rank and nonzero extent."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != ndim:
        raise ShapeError(f"expected a rank-{ndim} field, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ShapeError(f"field dimensions must be >= 1, got {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric (or scale-ambiguous) depth with a validity mask.

    Valid pixels hold strictly positive finite values; invalid ones hold NaN.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = as_field(self.values)
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise ShapeError(f"mask shape {mask.shape} != values shape {values.shape}")
        good = np.isfinite(values) & (values > 0)
        bad = mask & ~good
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DomainError(
                f"depth at valid pixel ({r}, {c}) must be positive and finite, got {values[r, c]!r}"
            )
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @classmethod
    def from_raw(cls, raw, mask=None) -> "DepthMap":
        """Wrap a dense array; pixels that are nonpositive or non-finite become invalid."""
        raw = as_field(raw)
        good = np.isfinite(raw) & (raw > 0)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != raw.shape:
                raise ShapeError(f"mask shape {mask.shape} != values shape {raw.shape}")
            good &= mask
        return cls(np.where(good, raw, np.nan), good)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Dense copy with invalid pixels replaced by ``fill``."""
        return np.where(self.mask, self.values, fill)

    def at(self, rows, cols) -> np.ndarray:
        """Values at integer pixel positions; raises if any is invalid."""
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        ok = self.mask[rows, cols]
        if not np.all(ok):
            i = int(np.flatnonzero(~ok)[0])
            raise DomainError(f"pixel ({rows[i]}, {cols[i]}) is invalid")
        return self.values[rows, cols]


def check_same_shape(*arrays) -> None:
    shapes = {np.shape(a)[-2:] for a in arrays if a is not None}
    if len(shapes) > 1:
        raise ShapeError(f"dimension mismatch: {sorted(shapes)}")


def make_depth_mask(raw, sky=None, min_depth: float = 0.1, max_depth: float = 80.0) -> np.ndarray:
    """Evaluation mask: finite, inside ``[min_depth, max_depth]`` and not sky."""
    if not min_depth > 0:
        raise DomainError(f"min_depth must be > 0, got {min_depth}")
    if not max_depth > min_depth:
        raise DomainError(f"max_depth ({max_depth}) must exceed min_depth ({min_depth})")
    raw = as_field(raw)
    if sky is not None:
        sky = np.asarray(sky, dtype=bool)
        check_same_shape(raw, sky)
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(raw) & (raw >= min_depth) & (raw <= max_depth)
    if sky is not None:
        valid &= ~sky
    return valid


def log_field(d: DepthMap) -> np.ndarray:
    """Natural log at valid pixels, NaN elsewhere."""
    out = np.full(d.shape, np.nan)
    out[d.mask] = np.log(d.values[d.mask])
    return out


def masked_sum(f, mask) -> Optional[float]:
    """Sum over valid pixels; ``None`` when the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    return float(np.sum(np.asarray(f)[mask]))


def masked_mean(f, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    check_same_shape(f, mask)
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("mean over an empty mask")
    return float(np.sum(np.asarray(f)[mask]) / n)


def spatial_gradient(f, mask=None) -> np.ndarray:
    """Row and column derivatives of ``f`` as a ``(2, H, W)`` stack.

    Central differences where both neighbours are valid, one-sided where only
    one is, zero where neither is. Invalid pixels get zero.
    """
    f = as_field(f)
    if mask is None:
        mask = np.ones(f.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != f.shape:
        raise ShapeError(f"mask shape {mask.shape} != field shape {f.shape}")
    g = np.zeros((2,) + f.shape)
    fz = np.where(mask, f, 0.0)
    for axis in (0, 1):
        fm = np.moveaxis(fz, axis, 0)
        mm = np.moveaxis(mask, axis, 0)
        out = np.moveaxis(g[axis], axis, 0)
        n = fm.shape[0]
        prev_ok = np.zeros_like(mm)
        next_ok = np.zeros_like(mm)
        prev_ok[1:] = mm[:-1]
        next_ok[:-1] = mm[1:]
        prev = np.zeros_like(fm)
        nxt = np.zeros_like(fm)
        if n > 1:
            prev[1:] = fm[:-1]
            nxt[:-1] = fm[1:]
        both = mm & prev_ok & next_ok
        fwd = mm & next_ok & ~prev_ok
        bwd = mm & prev_ok & ~next_ok
        out[both] = (nxt[both] - prev[both]) / 2.0
        out[fwd] = nxt[fwd] - fm[fwd]
        out[bwd] = fm[bwd] - prev[bwd]
    return g


def bilinear_weights(p: Sequence[float], cell) -> np.ndarray:
    """Bilinear weights of point ``p = (row, col)`` in an axis-aligned cell.

    ``cell`` lists the four vertices as ``(row, col)`` pairs in the order
    top-left, top-right, bottom-left, bottom-right. The returned weights follow
    the same order.
    """
    (r0, c0), (r0b, c1), (r1, c0b), (r1b, c1b) = [tuple(map(float, v)) for v in cell]
    if not (r0 == r0b and r1 == r1b and c0 == c0b and c1 == c1b):
        raise DomainError("cell vertices must form an axis-aligned rectangle")
    if not (r1 > r0 and c1 > c0):
        raise DomainError("cell must have positive extent")
    r, c = float(p[0]), float(p[1])
    if not (r0 <= r <= r1 and c0 <= c <= c1):
        raise DomainError(f"point {(r, c)} lies outside the cell")
    fr = (r - r0) / (r1 - r0)
    fc = (c - c0) / (c1 - c0)
    return np.array([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])


def lattice_interp_matrix(coords, knots):
    """Indices and weights of 1-D linear interpolation onto ascending ``knots``.

    Returns ``(lo, frac)`` such that a value at ``coords`` is
    ``(1 - frac) * v[lo] + frac * v[lo + 1]``.
    """
    knots = np.asarray(knots, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if knots.size == 1:
        return np.zeros(coords.shape, dtype=np.intp), np.zeros(coords.shape)
    lo = np.clip(np.searchsorted(knots, coords, side="right") - 1, 0, knots.size - 2)
    frac = (coords - knots[lo]) / (knots[lo + 1] - knots[lo])
    return lo, np.clip(frac, 0.0, 1.0)


def upsample_lattice(values, row_knots, col_knots, shape) -> np.ndarray:
    """Bilinearly resample lattice ``values[i, j]`` at ``(row_knots[i], col_knots[j])`` to every pixel."""
    values = np.asarray(values, dtype=np.float64)
    H, W = shape
    rl, rf = lattice_interp_matrix(np.arange(H), row_knots)
    cl, cf = lattice_interp_matrix(np.arange(W), col_knots)
    if len(row_knots) == 1:
        rh = rl
    else:
        rh = rl + 1
    if len(col_knots) == 1:
        ch = cl
    else:
        ch = cl + 1
    rf = rf[:, None]
    cf = cf[None, :]
    v00 = values[np.ix_(rl, cl)]
    v01 = values[np.ix_(rl, ch)]
    v10 = values[np.ix_(rh, cl)]
    v11 = values[np.ix_(rh, ch)]
    return (1 - rf) * ((1 - cf) * v00 + cf * v01) + rf * ((1 - cf) * v10 + cf * v11)


def normalized_coords(shape, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """``(2, H, W)`` row/col coordinates mapped to ``[lo, hi]``; a length-1 axis maps to ``lo``."""
    H, W = shape
    r = np.full(H, lo) if H == 1 else lo + (hi - lo) * np.arange(H) / (H - 1)
    c = np.full(W, lo) if W == 1 else lo + (hi - lo) * np.arange(W) / (W - 1)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return np.stack([rr, cc])
