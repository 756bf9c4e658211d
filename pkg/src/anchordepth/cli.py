"""Command-line pipelines: synth, train, align, eval, drop-anchor, spectral, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import io
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import baselines, evalbench
from .anchors import REGIME_ALIASES, REGIMES, AnchorSet, compute_targets, get_regime
from .basis import DEFAULT_RIDGE, align, write_weights_csv
from .errors import AnchorDepthError
from .generator import GeneratorConfig, LossConfig, build_input, forward
from .gradcheck import toy_gradcheck
from .spectral import spectral_report
from .synth import FAMILIES, ScenarioSpec, generate_dataset, load_scene, load_split, scene_anchors
from .tensorio import atomic_write_bytes, write_tensor
from .training import TrainConfig, format_log, load_model, save_model, train

log = logging.getLogger("anchordepth")

# settings that cannot change results; kept out of file headers so outputs
# compare byte-for-byte across worker counts and output locations
_NON_RESULT = {"out", "workers", "overwrite", "verbose"}
REGIME_NAMES = tuple(REGIMES) + tuple(REGIME_ALIASES)


class UsageError(Exception):
    pass


def _csv_list(kind, valid=None):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if kind == "regime":
            items = [REGIME_ALIASES.get(t, t) for t in items]
        if not items:
            raise argparse.ArgumentTypeError(f"empty {kind} list")
        if valid is not None:
            bad = [t for t in items if t not in valid]
            if bad:
                raise argparse.ArgumentTypeError(
                    f"unknown {kind} {', '.join(bad)}; valid: {', '.join(valid)}")
        return items
    return parse


def _ratios(text):
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split ratios {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated ratios")
    return vals


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def config_lines(args) -> list:
    """Effective configuration as ``key=value`` lines in sorted key order."""
    out = [f"command={args.command}"]
    for k in sorted(vars(args)):
        if k in ("func", "command"):
            continue
        v = getattr(args, k)
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        out.append(f"{k}={v}")
    return out


def header_lines(args) -> list:
    return [line for line in config_lines(args) if line.split("=", 1)[0] not in _NON_RESULT]


@contextlib.contextmanager
def staged_dir(out, overwrite: bool = True):
    """Yield a temp directory next to ``out``; it replaces ``out`` only on success."""
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise AnchorDepthError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise AnchorDepthError(f"output directory {out} exists; pass --overwrite to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _load_model_arg(path):
    if path is None:
        return None
    params, gcfg, _ = load_model(path)
    return params, gcfg


# -- subcommands ----------------------------------------------------------


def cmd_synth(args) -> int:
    spec = ScenarioSpec(args.bias, args.noise, args.height, args.width, args.regions, args.seed,
                        args.spatial_amplitude, args.noise_corr)
    splits = generate_dataset(args.out, spec, args.n_scenes, args.split, args.seed,
                              overwrite=args.overwrite, workers=args.workers,
                              anchor_regimes=args.anchor_regimes)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_train(args) -> int:
    train_scenes = load_split(args.data, "train")
    val_scenes = load_split(args.data, "val")
    if not train_scenes:
        raise AnchorDepthError(f"no training scenes under {args.data}")
    n_features = train_scenes[0].features.shape[0]
    init = None
    if args.init is not None:
        init, gcfg, _ = load_model(args.init)
    else:
        gcfg = GeneratorConfig(n_features=n_features, hidden=args.hidden, layers=args.layers,
                               k=args.k)
    lcfg = LossConfig(lambda_anchor=args.lambda_anchor, lambda_decor=args.lambda_decor,
                      lambda_gate=args.lambda_gate, ridge=args.ridge,
                      detach_solve=args.detach_solve)
    cfg = TrainConfig(regime=get_regime(args.regime), epochs=args.epochs, lr=args.lr,
                      batch_size=args.batch_size, seed=args.seed, workers=args.workers,
                      ablate_features=args.ablate_features, loss=lcfg)
    res = train(train_scenes, val_scenes, gcfg, cfg, init=init)
    header = header_lines(args)
    with staged_dir(args.out) as tmp:
        save_model(tmp, res.params, gcfg, {
            "ablate_features": int(args.ablate_features), "best_epoch": res.best_epoch,
            "regime": args.regime, "seed": args.seed, "ridge": repr(args.ridge),
        })
        _write_text(tmp / "train_log.csv", format_log(res.log_rows, header))
    print(f"best_epoch={res.best_epoch} best_val={res.best_val!r}")
    return 0


def _anchors_for(args, scene) -> AnchorSet:
    if args.anchors is not None:
        return AnchorSet.from_csv(args.anchors)
    path = Path(args.scene) / f"anchors_{args.regime}.csv"
    if path.exists():
        return AnchorSet.from_csv(path)
    return scene_anchors(scene, args.regime, args.seed)


def cmd_align(args) -> int:
    scene = load_scene(args.scene)
    anchors = _anchors_for(args, scene)
    d = scene.depth_mde
    header = header_lines(args)
    with staged_dir(args.out) as tmp:
        if args.method == "basis":
            model = _load_model_arg(args.model)
            if model is None:
                raise UsageError("--method basis needs --model")
            params, gcfg = model
            x = build_input(scene.features, d, gcfg.n_features, args.ablate_features)
            depth, w = align(forward(params, x).embedding, d, anchors, args.ridge)
            write_weights_csv(tmp / "weights.csv", w)
        elif args.method == "global":
            p = baselines.fit_global(d, anchors)
            depth = baselines.apply_affine(d, p)
            buf = io.StringIO()
            buf.writelines(f"# {line}\n" for line in header)
            buf.write(f"s,t\n{p.s!r},{p.t!r}\n")
            _write_text(tmp / "affine.csv", buf.getvalue())
        else:
            depth = evalbench.run_method(evalbench.MethodSpec(args.method), scene, anchors)
        write_tensor(tmp / "depth_hat.anch", depth.filled(0.0))
        if scene.depth_gt.mask.any():
            m = evalbench.depth_metrics(depth, scene.depth_gt, scene.mask)
            print(f"abs_rel={m.abs_rel!r} delta1={m.delta1!r} invalid_fraction={m.invalid_fraction!r}")
    return 0


def _method_specs(args) -> list:
    model = _load_model_arg(args.model)
    specs = []
    for name in args.methods:
        if name == "basis" and model is None:
            raise UsageError("method basis needs --model")
        specs.append(evalbench.MethodSpec(
            name, {"ablate_features": args.ablate_features, "ridge": args.ridge},
            model=model if name == "basis" else None))
    return specs


def _write_report(out, report, header):
    with staged_dir(out) as tmp:
        _write_text(tmp / "records.csv", evalbench.records_csv(report, header))
        _write_text(tmp / "aggregate.csv", evalbench.aggregate_csv(report, header))
        _write_text(tmp / "aggregate_full.csv", evalbench.aggregate_csv(report, header, digits=None))


def _print_aggregates(report):
    for m, rg, metric, mean, median, n in report.aggregates():
        if metric != "invalid_fraction":
            print(f"{m:10s} {rg:5s} {metric:8s} mean={mean:.4f} median={median:.4f} n={n}")
    if report.failures:
        print(f"failed_records={len(report.failures)}")


def cmd_eval(args) -> int:
    corpus = load_split(args.corpus, args.split)
    report = evalbench.run_benchmark(corpus, _method_specs(args), args.regimes, args.seed,
                                     args.workers)
    _write_report(args.out, report, header_lines(args))
    _print_aggregates(report)
    return 0


def cmd_drop_anchor(args) -> int:
    corpus = load_split(args.corpus, args.split)
    args.methods = [args.method]
    method = _method_specs(args)[0]
    report = evalbench.run_drop_anchor(corpus, method, args.seed, args.workers)
    _write_report(args.out, report, header_lines(args))
    _print_aggregates(report)
    return 0


SPECTRAL_HEADER = "scene_id,n_anchors,eta1,similarity,degenerate,g0_mean,g0_var,mu1"


def cmd_spectral(args) -> int:
    corpus = load_split(args.corpus, args.split)
    params, gcfg = _load_model_arg(args.model)
    from concurrent.futures import ThreadPoolExecutor

    def work(scene):
        anchors = scene_anchors(scene, args.regime, args.seed)
        x = build_input(scene.features, scene.depth_mde, gcfg.n_features, args.ablate_features)
        fwd = forward(params, x)
        m = fwd.embedding[:, anchors.rows, anchors.cols].T
        rep = spectral_report(m, compute_targets(anchors, scene.depth_mde), fwd.gating,
                              scene.mask, args.ridge)
        return (f"{scene.scene_id},{len(anchors)},{rep.eta1!r},{rep.similarity!r},"
                f"{int(rep.degenerate)},{rep.g0_mean!r},{rep.g0_var!r},{rep.mu1!r}\n"), rep

    with ThreadPoolExecutor(max_workers=args.workers) as ex:
        rows = list(ex.map(work, corpus))
    buf = io.StringIO()
    buf.writelines(f"# {line}\n" for line in header_lines(args))
    buf.write(SPECTRAL_HEADER + "\n")
    buf.writelines(r for r, _ in rows)
    with staged_dir(args.out) as tmp:
        _write_text(tmp / "spectral.csv", buf.getvalue())
    eta = np.array([r.eta1 for _, r in rows])
    sim = np.array([r.similarity for _, r in rows])
    print(f"scenes={len(rows)} eta1_median={np.median(eta):.4f} similarity_median={np.median(sim):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = toy_gradcheck(args.seed, args.n_probe, args.h, args.detach_solve)
    for r in results:
        print(f"{r.term:7s} probed={r.n_probed} skipped={r.n_skipped} rel_error={r.rel_error:.3e}")
    worst = max(r.rel_error for r in results)
    print(f"max_rel_error={worst:.3e} tol={args.tol:g}")
    return 0 if worst <= args.tol else 1


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchordepth", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--workers", type=_positive_int, default=1)
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--n-scenes", type=_positive_int, default=10)
    s.add_argument("--bias", choices=FAMILIES, default="mixed")
    s.add_argument("--noise", type=float, default=0.0, help="std of multiplicative log-noise")
    s.add_argument("--height", type=_positive_int, default=96)
    s.add_argument("--width", type=_positive_int, default=128)
    s.add_argument("--regions", type=_positive_int, default=3)
    s.add_argument("--noise-corr", type=float, default=0.0,
                   help="correlation length of the log-noise in pixels (0 = white)")
    s.add_argument("--spatial-amplitude", type=float, default=0.25)
    s.add_argument("--split", type=_ratios, default=(0.6, 0.2, 0.2))
    s.add_argument("--anchor-regimes", type=_csv_list("regime", REGIME_NAMES),
                   default=["low", "med", "high"])
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    def loss_opts(sp):
        sp.add_argument("--ridge", type=float, default=DEFAULT_RIDGE)

    t = sub.add_parser("train", help="train the basis map generator")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--k", type=_positive_int, default=8)
    t.add_argument("--hidden", type=_positive_int, default=32)
    t.add_argument("--layers", type=_positive_int, default=3)
    t.add_argument("--regime", choices=REGIME_NAMES, default="low")
    t.add_argument("--epochs", type=int, default=25)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=_positive_int, default=1)
    t.add_argument("--lambda-anchor", type=float, default=0.1)
    t.add_argument("--lambda-decor", type=float, default=1e-4)
    t.add_argument("--lambda-gate", type=float, default=1e-4)
    t.add_argument("--ablate-features", action="store_true")
    t.add_argument("--detach-solve", action="store_true")
    t.add_argument("--init", help="model directory to fine-tune from")
    loss_opts(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("align", help="align one scene with one method")
    common(a)
    a.add_argument("--scene", required=True)
    a.add_argument("--method", choices=evalbench.METHODS, default="basis")
    a.add_argument("--model")
    a.add_argument("--anchors", help="anchor CSV (row,col,depth_m)")
    a.add_argument("--regime", choices=REGIME_NAMES, default="low",
                   help="anchor file/regime used when --anchors is absent")
    a.add_argument("--ablate-features", action="store_true")
    loss_opts(a)
    a.set_defaults(func=cmd_align)

    def corpus_opts(sp):
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--split", default="test")
        sp.add_argument("--model")
        sp.add_argument("--ablate-features", action="store_true")
        loss_opts(sp)

    e = sub.add_parser("eval", help="paired benchmark across methods and anchor regimes")
    common(e)
    corpus_opts(e)
    e.add_argument("--methods", type=_csv_list("method", evalbench.METHODS),
                   default=["global", "piecewise", "lwlr", "grid"])
    e.add_argument("--regimes", type=_csv_list("regime", REGIME_NAMES), default=["low", "med", "high"])
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("drop-anchor", help="drop-anchor robustness evaluation")
    common(d)
    corpus_opts(d)
    d.add_argument("--method", choices=evalbench.METHODS, default="basis")
    d.set_defaults(func=cmd_drop_anchor)

    sp = sub.add_parser("spectral", help="per-scene spectral statistics of the anchor embedding")
    common(sp)
    corpus_opts(sp)
    sp.set_defaults(func=cmd_spectral)
    sp.add_argument("--regime", choices=REGIME_NAMES, default="low")

    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-probe", type=_positive_int, default=200)
    g.add_argument("--h", type=float, default=1e-6)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--detach-solve", action="store_true")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "regime"):
        args.regime = REGIME_ALIASES.get(args.regime, args.regime)
    if getattr(args, "command", None) == "spectral" and args.model is None:
        parser.error("spectral needs --model")
    for line in config_lines(args):
        print(f"# {line}")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (AnchorDepthError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
