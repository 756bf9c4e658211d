"""Adam training of the basis map generator, checkpoint selection and model files."""
from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .anchors import AnchorRegime, REGIMES, derive_seed, sample_anchors
from .errors import FormatError, ShapeError, TrainingError
from .generator import (
    GeneratorConfig, LossConfig, build_input, check_params, evaluate, flatten_params,
    init_params, loss_and_grad, make_problem, param_shapes, unflatten_params,
)
from .tensorio import atomic_write_bytes, read_tensor, write_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    regime: AnchorRegime = REGIMES["low"]
    epochs: int = 25
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    workers: int = 1
    ablate_features: bool = False
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class TrainResult:
    params: dict
    log_rows: list  # (epoch, split, dense, anchor, decor, gate, total)
    best_epoch: int
    best_val: float
    adam_state: Optional[dict] = None


def scene_problem(scene, gcfg: GeneratorConfig, regime: AnchorRegime, seed: int,
                  ablate_features: bool = False):
    x = build_input(scene.features, scene.depth_mde, gcfg.n_features, ablate_features)
    anchors = sample_anchors(scene.depth_gt, regime, seed)
    return make_problem(x, scene.depth_mde, scene.depth_gt, anchors)


class Adam:
    def __init__(self, params: dict, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _val_loss(params, problems, lcfg, pool):
    rows = list(pool.map(lambda p: evaluate(params, p, lcfg)[0].row(), problems))
    if not rows:
        return (float("nan"),) * 5
    return tuple(float(v) for v in np.mean(np.array(rows), axis=0))


def train(train_scenes: Sequence, val_scenes: Sequence, gcfg: GeneratorConfig,
          cfg: TrainConfig = TrainConfig(), init: Optional[dict] = None) -> TrainResult:
    """Adam on the total loss; returns the parameters with the lowest validation loss.

    Epoch 0 is the starting point, so zero epochs return ``init`` unchanged.
    Anchors for training scenes are redrawn every epoch from ``cfg.regime``;
    validation anchors are fixed per scene.
    """
    if not train_scenes:
        raise ValueError("need at least one training scene")
    train_ids = {s.scene_id for s in train_scenes}
    if train_ids & {s.scene_id for s in val_scenes}:
        raise ValueError("train and validation scenes overlap")
    params = init_params(gcfg, derive_seed(cfg.seed, "init")) if init is None else \
        {k: v.copy() for k, v in init.items()}
    check_params(params, gcfg)
    lcfg = cfg.loss
    val_problems = [scene_problem(s, gcfg, cfg.regime, derive_seed(cfg.seed, "val", s.scene_id),
                                  cfg.ablate_features) for s in val_scenes]
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rows = []
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        val = _val_loss(params, val_problems, lcfg, pool) if val_problems else None
        if val is not None:
            rows.append((0, "val") + val)
        best = (val[4] if val else float("inf"), 0, {k: v.copy() for k, v in params.items()})
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng(derive_seed(cfg.seed, "order", epoch)).permutation(
                len(train_scenes))
            epoch_rows = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_scenes[i] for i in order[start:start + cfg.batch_size]]

                def work(scene, params=params):
                    prob = scene_problem(scene, gcfg, cfg.regime,
                                         derive_seed(cfg.seed, "anchors", epoch, scene.scene_id),
                                         cfg.ablate_features)
                    try:
                        return loss_and_grad(params, prob, lcfg)
                    except ValueError as exc:  # overflowed parameters reach the ridge solve as inf
                        raise TrainingError(
                            f"loss failed at epoch {epoch}, scene {scene.scene_id}: {exc}") from exc

                results = list(pool.map(work, batch))
                for scene, (lb, _) in zip(batch, results):
                    if not np.isfinite(lb.total):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, scene {scene.scene_id}")
                    epoch_rows.append(lb.row())
                grads = {k: np.zeros_like(v) for k, v in params.items()}
                for _, g in results:
                    for k in grads:
                        grads[k] += g[k]
                for k in grads:
                    grads[k] /= len(batch)
                opt.step(params, grads)
            rows.append((epoch, "train") + tuple(float(v) for v in np.mean(epoch_rows, axis=0)))
            if val_problems:
                val = _val_loss(params, val_problems, lcfg, pool)
                if not np.isfinite(val[4]):
                    raise TrainingError(f"non-finite validation loss at epoch {epoch}")
                rows.append((epoch, "val") + val)
                if val[4] < best[0]:
                    best = (val[4], epoch, {k: v.copy() for k, v in params.items()})
            else:
                best = (float("nan"), epoch, {k: v.copy() for k, v in params.items()})
            log.info("epoch %d: train total %.5f val total %s", epoch, rows[-2 if val_problems else -1][6],
                     f"{val[4]:.5f}" if val_problems else "-")
    return TrainResult(best[2], rows, best[1], best[0])


def fine_tune(params: dict, train_scenes, val_scenes, gcfg: GeneratorConfig, cfg: TrainConfig,
              epochs: int = 5) -> TrainResult:
    """Continue training from ``params`` for ``epochs`` epochs (fresh optimizer state)."""
    check_params(params, gcfg)
    return train(train_scenes, val_scenes, gcfg, replace(cfg, epochs=epochs), init=params)


# -- files ----------------------------------------------------------------

LOG_HEADER = "epoch,split,dense,anchor,decor,gate,total"


def format_log(rows, header_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    buf.write(LOG_HEADER + "\n")
    for r in rows:
        buf.write(f"{r[0]},{r[1]}," + ",".join(repr(float(v)) for v in r[2:]) + "\n")
    return buf.getvalue()


def save_model(directory, params: dict, gcfg: GeneratorConfig, extra: Optional[dict] = None) -> None:
    """``params.anch`` (flat float64 vector) plus ``manifest.txt`` (name shape offset)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "params.anch", flatten_params(params, gcfg))
    lines = [f"n_features={gcfg.n_features}", f"hidden={gcfg.hidden}", f"layers={gcfg.layers}",
             f"k={gcfg.k}"]
    for k in sorted(extra or {}):
        lines.append(f"{k}={extra[k]}")
    off = 0
    for name, shape in param_shapes(gcfg):
        lines.append(f"param {name} {'x'.join(map(str, shape)) or '0'} {off}")
        off += int(np.prod(shape))
    atomic_write_bytes(d / "manifest.txt", ("\n".join(lines) + "\n").encode())


def load_model(directory):
    """Returns ``(params, GeneratorConfig, extra)``."""
    d = Path(directory)
    cfg_vals, extra = {}, {}
    declared = []
    for lineno, line in enumerate((d / "manifest.txt").read_text().splitlines(), start=1):
        if line.startswith("param "):
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"bad manifest line {line!r}", offset=lineno)
            declared.append((parts[1], int(parts[3])))
        elif "=" in line:
            k, v = line.split("=", 1)
            if k in ("n_features", "hidden", "layers", "k"):
                cfg_vals[k] = int(v)
            else:
                extra[k] = v
    gcfg = GeneratorConfig(**cfg_vals)
    params = unflatten_params(read_tensor(d / "params.anch"), gcfg)
    off = 0
    for (name, shape), (dname, doff) in zip(param_shapes(gcfg), declared):
        if name != dname or off != doff:
            raise ShapeError(f"manifest entry {dname}@{doff} does not match {name}@{off}")
        off += int(np.prod(shape))
    return params, gcfg, extra
