"""Finite-difference checks of the generator's analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .anchors import AnchorRegime, derive_seed, sample_anchors
from .generator import (
    GeneratorConfig, LossConfig, activation_pattern, build_input, evaluate, init_params,
    loss_and_grad, make_problem, param_shapes,
)

TERMS = ("dense", "anchor", "decor", "gate", "total")
TOY_CONFIG = GeneratorConfig(n_features=2, hidden=4, layers=2, k=4)


@dataclass(frozen=True)
class GradCheckResult:
    term: str
    n_probed: int
    n_skipped: int  # probes whose step crossed a ReLU kink
    rel_error: float  # ||analytic - numeric|| / max(||analytic||, ||numeric||) over probes
    max_abs_error: float


def toy_problem(seed: int = 0, size: int = 16, n_anchors: int = 5, param_std: float = 0.5):
    """Small scene, toy generator config and random (non-initial) parameters.

    Random heads make every loss term and the ridge path active.
    """
    from .synth import ScenarioSpec, generate_scene

    scene = generate_scene(ScenarioSpec("mixed", 0.05, size, size, seed=seed), "toy")
    gcfg = TOY_CONFIG
    x = build_input(scene.features[:gcfg.n_features], scene.depth_mde, gcfg.n_features)
    anchors = sample_anchors(scene.depth_gt, AnchorRegime(n_anchors, n_anchors, 3, 3),
                             derive_seed(seed, "toy-anchors"))
    prob = make_problem(x, scene.depth_mde, scene.depth_gt, anchors)
    rng = np.random.default_rng(derive_seed(seed, "toy-params"))
    params = {k: rng.normal(0.0, param_std, v.shape) for k, v in init_params(gcfg, seed).items()}
    return params, prob, gcfg


def _weights(term: str, lcfg: LossConfig) -> dict:
    if term == "total":
        return {"dense": 1.0, "anchor": lcfg.lambda_anchor, "decor": lcfg.lambda_decor,
                "gate": lcfg.lambda_gate}
    return {term: 1.0}


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(params: dict, prob, gcfg: GeneratorConfig, lcfg: LossConfig = LossConfig(),
                    terms=TERMS, n_probe: int = 200, h: float = 1e-6, seed: int = 0) -> list:
    """Compare analytic gradients with central differences on randomly probed parameters.

    With ``lcfg.detach_solve`` the finite-difference oracle holds the ridge
    weights at their value for ``params``, which is what the detached gradient
    differentiates.
    """
    names = [n for n, _ in param_shapes(gcfg)]
    index = [(n, i) for n in names for i in np.ndindex(params[n].shape)]
    rng = np.random.default_rng(seed)
    n_probe = min(n_probe, len(index))
    probes = [index[j] for j in rng.choice(len(index), size=n_probe, replace=False)]
    base_pattern = activation_pattern(params, prob.x)
    fixed_w = evaluate(params, prob, lcfg)[1]["w"] if lcfg.detach_solve else None

    # numeric derivatives of every loss part share the same perturbed evaluations
    numeric, skipped = {}, []
    for name, idx in probes:
        parts = []
        for sign in (1.0, -1.0):
            pp = dict(params)
            pp[name] = params[name].copy()
            pp[name][idx] += sign * h
            if not _same_pattern(activation_pattern(pp, prob.x), base_pattern):
                parts = None
                break
            parts.append(evaluate(pp, prob, lcfg, fixed_w=fixed_w)[0])
        if parts is None:
            skipped.append((name, idx))
            continue
        numeric[(name, idx)] = parts

    kept = [p for p in probes if p in numeric]
    results = []
    for term in terms:
        wts = _weights(term, lcfg)
        _, grads = loss_and_grad(params, prob, lcfg, wts)
        ana = np.array([grads[n][i] for n, i in kept])
        num = np.array([
            sum(wt * (getattr(numeric[p][0], k) - getattr(numeric[p][1], k)) for k, wt in wts.items())
            / (2.0 * h)
            for p in kept
        ])
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        err = float(np.linalg.norm(ana - num) / scale) if scale > 0 else 0.0
        results.append(GradCheckResult(term, len(kept), len(skipped), err,
                                       float(np.max(np.abs(ana - num))) if kept else 0.0))
    return results


def toy_gradcheck(seed: int = 0, n_probe: int = 200, h: float = 1e-6, detach_solve: bool = False):
    params, prob, gcfg = toy_problem(seed)
    lcfg = replace(LossConfig(), detach_solve=detach_solve)
    return check_gradients(params, prob, gcfg, lcfg, n_probe=n_probe, h=h, seed=seed)
