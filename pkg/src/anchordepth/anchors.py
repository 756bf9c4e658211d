"""Sparse metric anchors: lattice sampling, log-ratio targets and drop-anchor sequences."""
from __future__ import annotations

import hashlib
import io
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, InsufficientAnchorsError
from .field import DepthMap
from .tensorio import atomic_write_bytes, read_anchor_csv


@dataclass(frozen=True)
class Anchor:
    row: int
    col: int
    depth_gt: float


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple
    seed: Optional[int] = None

    def __post_init__(self):
        anchors = tuple(self.anchors)
        seen = set()
        for a in anchors:
            key = (a.row, a.col)
            if key in seen:
                raise DomainError(f"duplicate anchor at {key}")
            seen.add(key)
            if not a.depth_gt > 0:
                raise DomainError(f"anchor at {key} has nonpositive depth {a.depth_gt}")
        object.__setattr__(self, "anchors", anchors)

    def __len__(self):
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    def __getitem__(self, i):
        return self.anchors[i]

    @property
    def rows(self) -> np.ndarray:
        return np.array([a.row for a in self.anchors], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([a.col for a in self.anchors], dtype=np.intp)

    @property
    def depths(self) -> np.ndarray:
        return np.array([a.depth_gt for a in self.anchors], dtype=np.float64)

    def digest(self) -> str:
        """Short content hash used to prove paired comparisons."""
        h = hashlib.sha256()
        for a in self.anchors:
            h.update(f"{a.row},{a.col},{a.depth_gt!r};".encode())
        return h.hexdigest()[:16]

    @classmethod
    def from_csv(cls, path, seed=None) -> "AnchorSet":
        return cls(tuple(Anchor(r, c, d) for r, c, d in read_anchor_csv(path)), seed)


@dataclass(frozen=True)
class AnchorRegime:
    n_min: int
    n_max: int
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max <= self.grid_rows * self.grid_cols:
            raise DomainError(f"invalid regime {self}")


REGIMES = {
    "low": AnchorRegime(10, 15, 4, 4),
    "med": AnchorRegime(100, 120, 12, 12),
    "high": AnchorRegime(500, 530, 24, 24),
}
REGIME_ALIASES = {"medium": "med"}
DROP_START = AnchorRegime(9, 9, 3, 3)


def get_regime(name: str) -> AnchorRegime:
    key = REGIME_ALIASES.get(name, name)
    if key not in REGIMES:
        raise KeyError(f"unknown regime {name!r}; choose from {sorted(REGIMES)}")
    return REGIMES[key]


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from a mix of ints and strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode()))
        else:
            words.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def lattice_points(shape, grid_rows: int, grid_cols: int) -> np.ndarray:
    """Cell-centred ``grid_rows x grid_cols`` lattice, row-major, as integer ``(row, col)``."""
    H, W = shape
    r = np.floor((np.arange(grid_rows) + 0.5) * H / grid_rows).astype(np.intp)
    c = np.floor((np.arange(grid_cols) + 0.5) * W / grid_cols).astype(np.intp)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def nearest_valid(mask: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Move each point onto the nearest valid pixel; ties go to the first in row-major order."""
    valid = np.argwhere(mask)
    out = points.copy()
    for i, (r, c) in enumerate(points):
        if mask[r, c]:
            continue
        d2 = (valid[:, 0] - r) ** 2 + (valid[:, 1] - c) ** 2
        out[i] = valid[int(np.argmin(d2))]
    return out


def sample_anchors(gt: DepthMap, regime: AnchorRegime, seed: int) -> AnchorSet:
    """Draw ``N`` anchors from a shifted candidate lattice, ``N ~ U[n_min, n_max]``."""
    mask = gt.mask
    n_valid = int(mask.sum())
    if n_valid < regime.n_min:
        raise InsufficientAnchorsError(
            f"only {n_valid} valid pixels, regime needs {regime.n_min}",
            shortfall=regime.n_min - n_valid,
        )
    cand = nearest_valid(mask, lattice_points(mask.shape, regime.grid_rows, regime.grid_cols))
    _, first = np.unique(cand[:, 0] * mask.shape[1] + cand[:, 1], return_index=True)
    cand = cand[np.sort(first)]
    if len(cand) < regime.n_min:
        raise InsufficientAnchorsError(
            f"{len(cand)} distinct candidates, regime needs {regime.n_min}",
            shortfall=regime.n_min - len(cand),
        )
    rng = np.random.default_rng(seed)
    n = int(rng.integers(regime.n_min, regime.n_max + 1))
    n = min(n, len(cand))
    pick = rng.choice(len(cand), size=n, replace=False)
    anchors = tuple(
        Anchor(int(r), int(c), float(gt.values[r, c])) for r, c in cand[pick]
    )
    return AnchorSet(anchors, seed)


def compute_targets(a: AnchorSet, d_mde: DepthMap) -> np.ndarray:
    """Log ratio ``log gt - log mde`` at each anchor."""
    rows, cols = a.rows, a.cols
    for i, (r, c) in enumerate(zip(rows, cols)):
        if not d_mde.mask[r, c]:
            raise DomainError(f"anchor {i} at ({r}, {c}) has no valid MDE depth")
    return np.log(a.depths) - np.log(d_mde.values[rows, cols])


def drop_anchor_sequence(a: AnchorSet) -> list:
    """Removal order that repeatedly drops one member of the closest pair.

    Among all pairs at the minimum distance the pair whose smaller (row-major)
    member comes first wins, and that member is removed.
    """
    alive = sorted(a.anchors, key=lambda x: (x.row, x.col))
    removed = []
    while len(alive) > 1:
        pts = np.array([(x.row, x.col) for x in alive], dtype=np.int64)
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.iinfo(np.int64).max)
        # alive is row-major sorted, so the first index attaining the minimum
        # in the upper triangle is the smallest lexicographic member.
        i = int(np.flatnonzero((d2 == d2.min()).any(axis=1))[0])
        removed.append(alive.pop(i))
    return removed


def take_first_n(a: AnchorSet, sequence: Sequence[Anchor], n: int) -> AnchorSet:
    """Survivors after applying the first ``len(a) - n`` removals, in original order."""
    if not 1 <= n <= len(a):
        raise DomainError(f"n must lie in [1, {len(a)}], got {n}")
    gone = {(x.row, x.col) for x in sequence[: len(a) - n]}
    return AnchorSet(tuple(x for x in a if (x.row, x.col) not in gone), a.seed)


def write_removal_csv(path, sequence) -> None:
    buf = io.StringIO()
    buf.write("step,row,col\n")
    for step, x in enumerate(sequence, start=1):
        buf.write(f"{step},{x.row},{x.col}\n")
    atomic_write_bytes(path, buf.getvalue().encode())
