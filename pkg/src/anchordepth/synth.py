"""Synthetic scenes with known scale bias, standing in for exported MDE outputs.

Each scene has a smooth metric depth landscape, an "MDE" depth corrupted by a
known log-scale field, feature channels that partly encode that field, a
validity mask and (for region bias) a label map.
"""
from __future__ import annotations

import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .anchors import derive_seed, REGIME_ALIASES, get_regime, sample_anchors
from .errors import AnchorDepthError, ShapeError
from .field import DepthMap, make_depth_mask, upsample_lattice
from .tensorio import atomic_write_bytes, read_tensor, write_anchor_csv, write_tensor

FAMILIES = ("global", "affine", "regions", "grid_smooth", "depth_dependent", "mixed")
SPATIAL_FAMILIES = ("regions", "grid_smooth")  # position-dependent families mixed draws from
N_FEATURES = 8
MIN_DEPTH, MAX_DEPTH = 0.1, 80.0


@dataclass(frozen=True)
class ScenarioSpec:
    bias_family: str = "mixed"
    noise_std: float = 0.0
    height: int = 96
    width: int = 128
    region_count: int = 3
    seed: int = 0
    spatial_amplitude: float = 0.25  # peak log-scale of the spatial term in "mixed"
    noise_corr: float = 0.0  # gaussian correlation length of the log-noise in pixels; 0 = white

    def __post_init__(self):
        if self.bias_family not in FAMILIES:
            raise ValueError(f"unknown bias family {self.bias_family!r}; choose from {FAMILIES}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.noise_corr < 0:
            raise ValueError("noise_corr must be >= 0")
        if self.region_count < 1:
            raise ValueError("region_count must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ShapeError("scene size must be positive")


@dataclass(frozen=True, eq=False)
class SceneSample:
    depth_gt: DepthMap
    depth_mde: DepthMap
    features: np.ndarray
    mask: np.ndarray
    true_log_scale: np.ndarray
    regions: Optional[np.ndarray]
    scene_id: str
    meta: dict

    @property
    def shape(self):
        return self.depth_gt.shape


def _depth_landscape(rng, H, W):
    v = np.linspace(0.0, 1.0, H)[:, None] * np.ones((1, W))
    u = np.ones((H, 1)) * np.linspace(0.0, 1.0, W)[None, :]
    far, near = rng.uniform(30.0, 55.0), rng.uniform(1.5, 4.0)
    tilt = rng.uniform(-0.15, 0.15)
    vv = np.clip(v + tilt * (u - 0.5), 0.0, 1.0)
    base = np.exp(np.log(far) + (np.log(near) - np.log(far)) * vv ** 0.8)
    occl = np.zeros((H, W))
    for _ in range(rng.integers(3, 7)):
        cr, cc = rng.uniform(0.2, 1.0), rng.uniform(0.0, 1.0)
        sr, sc = rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2)
        amp = rng.uniform(0.3, 0.7)
        occl = np.maximum(occl, amp * np.exp(-0.5 * (((v - cr) / sr) ** 2 + ((u - cc) / sc) ** 2)))
    depth = base * (1.0 - occl) * rng.uniform(0.6, 1.0)
    return np.clip(depth, 0.5, 60.0)


def _voronoi(rng, H, W, n):
    sites = np.stack([rng.uniform(0, H, n), rng.uniform(0, W, n)], axis=1)
    rr, cc = np.mgrid[0:H, 0:W]
    d2 = (rr[None] - sites[:, 0, None, None]) ** 2 + (cc[None] - sites[:, 1, None, None]) ** 2
    return np.argmin(d2, axis=0).astype(np.int64)


def _smooth_noise(rng, H, W, sigma):
    f = gaussian_filter(rng.normal(size=(H, W)), sigma, mode="reflect")
    sd = f.std()
    return f / sd if sd > 0 else f


def _spatial_term(family, rng, depth, labels, H, W, amp):
    if family == "affine":
        # gt = s * mde + t  =>  log(gt / mde) = log(s gt / (gt - t))
        s = np.exp(rng.uniform(-amp, amp))
        lo = float(depth.min())
        t_max = amp / 0.7  # 1 m at the full-family amplitude
        while True:
            t = rng.uniform(-t_max, t_max)
            if lo - t > 0:
                break
        return np.log(s * depth / (depth - t))
    if family == "regions":
        vals = rng.uniform(-amp, amp, labels.max() + 1)
        return vals[labels]
    if family == "grid_smooth":
        gr, gc = 3, 4
        verts = rng.uniform(-amp, amp, (gr, gc))
        return upsample_lattice(verts, np.linspace(0, H - 1, gr), np.linspace(0, W - 1, gc), (H, W))
    if family == "depth_dependent":
        a = rng.uniform(-amp, amp)
        ld = np.log(depth)
        centre = rng.uniform(np.log(3.0), np.log(20.0))
        return a * np.tanh((ld - centre) / rng.uniform(0.5, 1.5))
    raise ValueError(family)


def generate_scene(spec: ScenarioSpec, scene_id: str = "scene") -> SceneSample:
    """Deterministic scene for ``(spec, scene_id)``."""
    H, W = spec.height, spec.width
    rng = np.random.default_rng(derive_seed(spec.seed, scene_id))
    depth = _depth_landscape(rng, H, W)

    family = spec.bias_family
    sub = None
    n_regions = spec.region_count
    labels = _voronoi(rng, H, W, n_regions)
    glob = rng.uniform(-0.7, 0.7)
    if family == "global":
        ell = np.full((H, W), glob)
    elif family == "mixed":
        sub = SPATIAL_FAMILIES[int(rng.integers(len(SPATIAL_FAMILIES)))]
        ell = glob + _spatial_term(sub, rng, depth, labels, H, W, spec.spatial_amplitude)
    else:
        ell = _spatial_term(family, rng, depth, labels, H, W, 0.7)
    has_regions = family == "regions" or sub == "regions"

    # features: soft region indicators, distorted smoothed scale, nuisance fields
    feats = np.empty((N_FEATURES, H, W))
    for j in range(4):
        feats[j] = gaussian_filter((labels % 4 == j).astype(float), 1.5, mode="nearest")
    gain, offset = rng.uniform(0.8, 1.2), rng.uniform(-0.2, 0.2)
    feats[4] = gain * gaussian_filter(ell, 1.5, mode="nearest") + offset \
        + 0.03 * _smooth_noise(rng, H, W, 6.0)
    for j in range(5, 8):
        feats[j] = _smooth_noise(rng, H, W, rng.uniform(4.0, 12.0))

    if spec.noise_std == 0:
        noise = np.zeros((H, W))
    elif spec.noise_corr > 0:
        noise = spec.noise_std * _smooth_noise(rng, H, W, spec.noise_corr)
    else:
        noise = spec.noise_std * rng.normal(size=(H, W))
    mde = depth * np.exp(-ell) * np.exp(noise)

    blobs = _smooth_noise(rng, H, W, 3.0)
    holes = blobs > np.quantile(blobs, 0.97)
    raw_gt = np.where(holes, 0.0, depth)
    mask = make_depth_mask(raw_gt, None, MIN_DEPTH, MAX_DEPTH)

    meta = {"family": family, "seed": spec.seed, "noise_std": spec.noise_std,
            "height": H, "width": W, "region_count": n_regions, "noise_corr": spec.noise_corr,
            "spatial_family": sub or family}
    return SceneSample(
        depth_gt=DepthMap.from_raw(raw_gt, mask),
        depth_mde=DepthMap.from_raw(mde),
        features=feats,
        mask=mask,
        true_log_scale=ell,
        regions=labels if has_regions else None,
        scene_id=scene_id,
        meta=meta,
    )


def _meta_text(meta: dict) -> str:
    return "".join(f"{k}={meta[k]}\n" for k in sorted(meta))


def write_scene(sample: SceneSample, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "depth_gt.anch", sample.depth_gt.filled(0.0))
    write_tensor(d / "depth_mde.anch", sample.depth_mde.filled(0.0))
    write_tensor(d / "features.anch", sample.features)
    write_tensor(d / "mask.anch", sample.mask.astype(np.uint8))
    write_tensor(d / "true_log_scale.anch", sample.true_log_scale)
    if sample.regions is not None:
        write_tensor(d / "regions.anch", sample.regions.astype(np.uint8))
    atomic_write_bytes(d / "meta.txt", _meta_text(sample.meta).encode())


def _parse_meta(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_scene(directory) -> SceneSample:
    d = Path(directory)
    mask = read_tensor(d / "mask.anch").astype(bool)
    gt = DepthMap.from_raw(read_tensor(d / "depth_gt.anch"), mask)
    mde = DepthMap.from_raw(read_tensor(d / "depth_mde.anch"))
    regions = read_tensor(d / "regions.anch").astype(np.int64) if (d / "regions.anch").exists() else None
    meta = _parse_meta((d / "meta.txt").read_text()) if (d / "meta.txt").exists() else {}
    return SceneSample(gt, mde, read_tensor(d / "features.anch"), mask,
                       read_tensor(d / "true_log_scale.anch"), regions, d.name, meta)


def split_counts(n: int, ratios) -> tuple:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


def scene_anchors(scene: SceneSample, regime: str, seed: int):
    """The anchor set used for ``(scene, regime)`` everywhere a seed is shared."""
    regime = REGIME_ALIASES.get(regime, regime)
    return sample_anchors(scene.depth_gt, get_regime(regime), derive_seed(seed, scene.scene_id, regime))


def generate_dataset(out, template: ScenarioSpec, n_scenes: int, ratios=(0.6, 0.2, 0.2),
                     seed: int = 0, overwrite: bool = False, workers: int = 1,
                     anchor_regimes=()) -> dict:
    """Write ``n_scenes`` scene directories plus ``splits.csv``; returns ``{split: [ids]}``.

    Each regime in ``anchor_regimes`` also gets an ``anchors_<regime>.csv`` per scene.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise AnchorDepthError(f"output directory {out} exists; pass overwrite to replace it")
    counts = split_counts(n_scenes, ratios)
    spec = replace(template, seed=seed)
    ids = [f"scene_{i:04d}" for i in range(n_scenes)]
    order = np.random.default_rng(derive_seed(seed, "splits")).permutation(n_scenes)
    names = ("train", "val", "test")
    split_of = {}
    pos = 0
    for name, c in zip(names, counts):
        for j in order[pos:pos + c]:
            split_of[ids[j]] = name
        pos += c

    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        def work(sid):
            scene = generate_scene(spec, sid)
            write_scene(scene, tmp / sid)
            for regime in anchor_regimes:
                write_anchor_csv(tmp / sid / f"anchors_{regime}.csv", scene_anchors(scene, regime, seed))

        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            list(ex.map(work, ids))
        lines = ["scene_id,split\n"] + [f"{sid},{split_of[sid]}\n" for sid in ids]
        atomic_write_bytes(tmp / "splits.csv", "".join(lines).encode())
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return {n: [s for s in ids if split_of[s] == n] for n in names}


def read_splits(root) -> dict:
    root = Path(root)
    out = {"train": [], "val": [], "test": []}
    lines = (root / "splits.csv").read_text().splitlines()
    for line in lines[1:]:
        if line.strip():
            sid, split = line.split(",")
            out.setdefault(split, []).append(sid)
    return out


def load_split(root, split: str) -> list:
    root = Path(root)
    return [load_scene(root / sid) for sid in read_splits(root)[split]]
