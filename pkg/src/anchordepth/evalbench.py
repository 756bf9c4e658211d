"""Metrics, paired method comparisons, drop-anchor evaluation and aggregation."""
from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import baselines
from .anchors import (
    DROP_START, AnchorSet, derive_seed, drop_anchor_sequence, sample_anchors,
    take_first_n,
)
from .basis import DEFAULT_RIDGE, align
from .errors import AnchorDepthError, CapabilityError, EmptyMaskError
from .field import DepthMap
from .generator import build_input, embed
from .synth import scene_anchors

log = logging.getLogger(__name__)

DELTA_THRESHOLD = 1.25
METHODS = ("global", "piecewise", "lwlr", "grid", "region", "basis")


@dataclass(frozen=True)
class Metrics:
    abs_rel: float
    delta1: float
    invalid_fraction: float


def _joint(pred: DepthMap, gt: DepthMap, mask=None):
    base = gt.mask if mask is None else (gt.mask & np.asarray(mask, dtype=bool))
    joint = base & pred.mask
    if not joint.any():
        raise EmptyMaskError("no jointly valid pixels")
    return base, joint


def depth_metrics(pred: DepthMap, gt: DepthMap, mask=None) -> Metrics:
    base, joint = _joint(pred, gt, mask)
    p = pred.values[joint]
    g = gt.values[joint]
    ratio = np.maximum(p / g, g / p)
    invalid = 1.0 - joint.sum() / base.sum()
    return Metrics(float(np.mean(np.abs(p - g) / g)), float(np.mean(ratio < DELTA_THRESHOLD)),
                   float(invalid))


def abs_rel(pred: DepthMap, gt: DepthMap, mask=None) -> float:
    return depth_metrics(pred, gt, mask).abs_rel


def delta1(pred: DepthMap, gt: DepthMap, mask=None) -> float:
    return depth_metrics(pred, gt, mask).delta1


@dataclass(frozen=True)
class MethodSpec:
    """A method id plus its settings. ``model`` is ``(params, GeneratorConfig)`` for ``basis``."""

    name: str
    options: dict = field(default_factory=dict)
    model: Optional[tuple] = None
    label: Optional[str] = None

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; valid methods: {', '.join(METHODS)}")

    @property
    def id(self) -> str:
        return self.label or self.name


def run_method(method: MethodSpec, scene, anchors: AnchorSet) -> DepthMap:
    d = scene.depth_mde
    opt = method.options
    if method.name == "global":
        return baselines.global_align(d, anchors)
    if method.name == "piecewise":
        return baselines.apply_piecewise(d, baselines.fit_piecewise(d, anchors, opt.get("n_bins_max", 4)))
    if method.name == "lwlr":
        return baselines.fit_lwlr(d, anchors, opt.get("lwlr", baselines.LwlrConfig()))
    if method.name == "grid":
        return baselines.fit_grid(d, anchors, opt.get("grid_rows", 8), opt.get("grid_cols", 8),
                                  opt.get("mu", 0.1))[1]
    if method.name == "region":
        if scene.regions is None:
            raise CapabilityError(f"scene {scene.scene_id} has no region labels")
        return baselines.fit_region(d, anchors, scene.regions)[1]
    if method.model is None:
        raise CapabilityError("basis method needs trained generator parameters")
    params, gcfg = method.model
    x = build_input(scene.features, d, gcfg.n_features, opt.get("ablate_features", False))
    return align(embed(params, x), d, anchors, opt.get("ridge", DEFAULT_RIDGE))[0]


@dataclass(frozen=True)
class EvalRecord:
    scene_id: str
    method: str
    regime: str
    n_anchors: int
    abs_rel: float
    delta1: float
    invalid_fraction: float
    anchor_hash: str


def evaluate_method(method: MethodSpec, scene, anchors: AnchorSet, regime: str = "") -> EvalRecord:
    pred = run_method(method, scene, anchors)
    m = depth_metrics(pred, scene.depth_gt, scene.mask)
    return EvalRecord(scene.scene_id, method.id, regime, len(anchors), m.abs_rel, m.delta1,
                      m.invalid_fraction, anchors.digest())


@dataclass
class BenchmarkReport:
    records: list
    failures: list = field(default_factory=list)  # (scene_id, method, regime, message)
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> list:
        """Rows ``(method, regime, metric, mean, median, weight)`` in sorted key order."""
        groups = {}
        for r in self.records:
            groups.setdefault((r.method, r.regime), []).append(r)
        out = []
        for key in sorted(groups, key=lambda k: (k[0], _regime_key(k[1]))):
            recs = groups[key]
            for metric in ("abs_rel", "delta1", "invalid_fraction"):
                vals = np.array([getattr(r, metric) for r in recs])
                out.append(key + (metric, float(vals.mean()), float(np.median(vals)), len(recs)))
        return out

    def metric(self, method: str, regime: str, metric: str = "abs_rel", stat: str = "mean") -> float:
        for m, rg, name, mean, median, _ in self.aggregates():
            if (m, rg, name) == (method, regime, metric):
                return mean if stat == "mean" else median
        raise KeyError((method, regime, metric))


def _regime_key(regime: str):
    try:
        return (0, int(regime))
    except ValueError:
        return (1, {"low": 0, "med": 1, "high": 2}.get(regime, 3), regime)


def _safe_eval(method, scene, anchors, regime):
    try:
        return evaluate_method(method, scene, anchors, regime), None
    except AnchorDepthError as exc:
        return None, (scene.scene_id, method.id, regime, str(exc))


def _collect(jobs, workers):
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        results = list(ex.map(lambda j: _safe_eval(*j), jobs))
    records = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]
    for f in failures:
        log.warning("record failed: %s/%s/%s: %s", *f)
    return records, failures


def regime_anchors(scene, regime: str, seed: int) -> AnchorSet:
    return scene_anchors(scene, regime, seed)


def run_benchmark(corpus: Sequence, methods: Sequence[MethodSpec], regimes: Sequence[str],
                  seed: int = 0, workers: int = 1) -> BenchmarkReport:
    """Every method sees the same anchors for a given (scene, regime)."""
    if not corpus:
        raise ValueError("empty corpus")
    jobs = []
    for scene in corpus:
        for regime in regimes:
            anchors = regime_anchors(scene, regime, seed)
            for m in methods:
                jobs.append((m, scene, anchors, regime))
    records, failures = _collect(jobs, workers)
    return BenchmarkReport(records, failures, {"seed": seed, "regimes": ",".join(regimes)})


DROP_SIZES = (9, 7, 5, 3, 1)


def drop_anchor_sets(scene, seed: int) -> dict:
    start = sample_anchors(scene.depth_gt, DROP_START, derive_seed(seed, scene.scene_id, "drop"))
    seq = drop_anchor_sequence(start)
    return {n: take_first_n(start, seq, n) for n in DROP_SIZES if n <= len(start)}


def run_drop_anchor(corpus: Sequence, method: MethodSpec, seed: int = 0,
                    workers: int = 1) -> BenchmarkReport:
    if not corpus:
        raise ValueError("empty corpus")
    jobs = []
    for scene in corpus:
        for n, anchors in drop_anchor_sets(scene, seed).items():
            jobs.append((method, scene, anchors, str(n)))
    records, failures = _collect(jobs, workers)
    return BenchmarkReport(records, failures, {"seed": seed, "protocol": "drop-anchor"})


def weighted_aggregate(values, weights) -> float:
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.size == 0:
        raise ValueError("nothing to aggregate")
    total = weights.sum()
    if not total > 0:
        raise ValueError("total weight must be positive")
    return float((values * weights).sum() / total)


def combine_reports(reports: Sequence[BenchmarkReport]) -> list:
    """Per (method, regime, metric): image-count weighted mean of each report's mean."""
    acc = {}
    for rep in reports:
        for m, rg, metric, mean, _, n in rep.aggregates():
            acc.setdefault((m, rg, metric), []).append((mean, n))
    out = []
    for key in sorted(acc, key=lambda k: (k[0], _regime_key(k[1]), k[2])):
        vals, wts = zip(*acc[key])
        out.append(key + (weighted_aggregate(vals, wts), float(sum(wts))))
    return out


# -- CSV ------------------------------------------------------------------


def _header(lines) -> str:
    return "".join(f"# {line}\n" for line in lines)


def records_csv(report: BenchmarkReport, header_lines=()) -> str:
    buf = io.StringIO()
    buf.write(_header(header_lines))
    buf.write("scene_id,method,regime,n_anchors,abs_rel,delta1,invalid_fraction,anchor_hash\n")
    for r in sorted(report.records, key=lambda r: (r.scene_id, r.method, _regime_key(r.regime))):
        buf.write(f"{r.scene_id},{r.method},{r.regime},{r.n_anchors},{r.abs_rel!r},{r.delta1!r},"
                  f"{r.invalid_fraction!r},{r.anchor_hash}\n")
    if report.failures:
        buf.write(f"# failed_records={len(report.failures)}\n")
        for f in report.failures:
            buf.write("# failed " + ",".join(f[:3]) + f": {f[3]}\n")
    return buf.getvalue()


def aggregate_csv(report: BenchmarkReport, header_lines=(), digits: Optional[int] = 2) -> str:
    """Aggregate table; ``digits`` rounds like the published tables, ``None`` keeps full precision."""
    buf = io.StringIO()
    buf.write(_header(header_lines))
    buf.write("method,regime,metric,mean,median,weight\n")
    for m, rg, metric, mean, median, n in report.aggregates():
        if digits is None:
            buf.write(f"{m},{rg},{metric},{mean!r},{median!r},{n}\n")
        else:
            buf.write(f"{m},{rg},{metric},{mean:.{digits}f},{median:.{digits}f},{n}\n")
    return buf.getvalue()
