"""Basis map generator: input assembly, conv trunk, basis and gating heads, losses, gradients.

Everything is plain numpy in float64. The backward pass is written by hand
and covers the path through the closed-form ridge solve: with
``A = M^T M + lam I`` and ``A w = M^T y``, an upstream gradient ``g_w`` on the
weights maps to ``dL/dM = r v^T - (M v) w^T`` where ``v = A^-1 g_w`` and
``r = y - M w``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve

from .basis import DEFAULT_RIDGE, ridge_factor
from .errors import EmptyMaskError, ShapeError
from .field import DepthMap, normalized_coords, spatial_gradient


@dataclass(frozen=True)
class GeneratorConfig:
    n_features: int = 8
    hidden: int = 32
    layers: int = 3
    k: int = 8

    @property
    def in_channels(self) -> int:
        # features, log depth, 2 gradient channels, 2 coordinates, validity
        return self.n_features + 6


@dataclass(frozen=True)
class LossConfig:
    lambda_anchor: float = 0.1
    lambda_decor: float = 1e-4
    lambda_gate: float = 1e-4
    ridge: float = DEFAULT_RIDGE
    smooth_beta: float = 1.0
    detach_solve: bool = False


@dataclass(frozen=True, eq=False)
class GeneratorInput:
    channels: np.ndarray  # (C_F + 5, H, W)
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.channels.shape[1:]


def build_input(features, d_mde: DepthMap, n_features: Optional[int] = None,
                ablate_features: bool = False) -> GeneratorInput:
    """Stack ``[F, log D, d/drow log D, d/dcol log D, row, col]``; invalid pixels are zeroed."""
    H, W = d_mde.shape
    if features is None or n_features == 0:  # a featureless model ignores whatever the scene has
        features = np.zeros((0, H, W))
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[1:] != (H, W):
        raise ShapeError(f"features {features.shape} do not match depth {(H, W)}")
    if n_features is not None and features.shape[0] != n_features:
        raise ShapeError(f"expected {n_features} feature channels, got {features.shape[0]}")
    valid = d_mde.mask
    logd = np.where(valid, np.log(d_mde.filled(1.0)), 0.0)
    grad = spatial_gradient(logd, valid)
    feats = np.zeros_like(features) if ablate_features else np.where(valid, features, 0.0)
    x = np.concatenate([feats, logd[None], grad, normalized_coords((H, W))], axis=0)
    x = x * valid
    return GeneratorInput(x, valid.copy())


# -- parameters -----------------------------------------------------------


def param_shapes(cfg: GeneratorConfig) -> list:
    shapes = []
    cin = cfg.in_channels
    for i in range(cfg.layers):
        shapes.append((f"conv{i}.weight", (cfg.hidden, cin, 3, 3)))
        shapes.append((f"conv{i}.bias", (cfg.hidden,)))
        cin = cfg.hidden
    shapes.append(("basis.weight", (cfg.k - 1, cfg.hidden)))
    shapes.append(("basis.bias", (cfg.k - 1,)))
    shapes.append(("gate.weight", (cfg.k, cfg.hidden)))
    shapes.append(("gate.bias", (cfg.k,)))
    return shapes


def param_count(cfg: GeneratorConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def init_params(cfg: GeneratorConfig, seed: int, basis_head_scale: float = 0.1) -> dict:
    """He-scaled trunk kernels, zero gating head and biases, small random basis head.

    An all-zero basis head is a stationary point: B_{m>0} = 0 makes those design
    columns and their ridge weights vanish, so no gradient ever reaches them.
    ``basis_head_scale=0`` gives B = (1, 0, ...) exactly. G always starts uniform.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.startswith("conv") and name.endswith("weight"):
            fan_in = shape[1] * 9
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name == "basis.weight":
            params[name] = rng.normal(0.0, basis_head_scale / np.sqrt(shape[1]), size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def flatten_params(params: dict, cfg: GeneratorConfig) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n, _ in param_shapes(cfg)])


def unflatten_params(vec: np.ndarray, cfg: GeneratorConfig) -> dict:
    out = {}
    off = 0
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        out[name] = np.asarray(vec[off:off + n], dtype=np.float64).reshape(shape).copy()
        off += n
    if off != len(vec):
        raise ShapeError(f"parameter vector has {len(vec)} entries, config needs {off}")
    return out


def check_params(params: dict, cfg: GeneratorConfig) -> None:
    for name, shape in param_shapes(cfg):
        if name not in params or params[name].shape != shape:
            got = None if name not in params else params[name].shape
            raise ShapeError(f"parameter {name}: expected {shape}, got {got}")


# -- forward --------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 3, 3, H, W))
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + H, j:j + W]
    return cols.reshape(C * 9, H * W)


def _col2im(cols: np.ndarray, C: int, H: int, W: int) -> np.ndarray:
    cols = cols.reshape(C, 3, 3, H, W)
    xp = np.zeros((C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            xp[:, i:i + H, j:j + W] += cols[:, i, j]
    return xp[:, 1:-1, 1:-1]


@dataclass(eq=False)
class Forward:
    basis: np.ndarray  # B, (K, H, W), B[0] == 1
    gating: np.ndarray  # G, (K, H, W), per-pixel simplex
    embedding: np.ndarray  # E = G * B
    cache: dict = field(default_factory=dict, repr=False)


def _softmax0(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


# callables run on every Forward result (diagnostics and invariant checks)
FORWARD_HOOKS: list = []


def forward(params: dict, x: GeneratorInput, keep_cache: bool = False) -> Forward:
    H, W = x.shape
    h = np.concatenate([x.channels, x.valid[None].astype(np.float64)], axis=0)
    cols_list, act_list = [], []
    i = 0
    while f"conv{i}.weight" in params:
        wt = params[f"conv{i}.weight"]
        cols = _im2col(h)
        z = wt.reshape(wt.shape[0], -1) @ cols + params[f"conv{i}.bias"][:, None]
        active = z > 0
        h = np.where(active, z, 0.0).reshape(wt.shape[0], H, W)
        if keep_cache:
            cols_list.append(cols)
            act_list.append(active)
        i += 1
    hf = h.reshape(h.shape[0], -1)
    k = params["gate.weight"].shape[0]
    b_rest = params["basis.weight"] @ hf + params["basis.bias"][:, None]
    B = np.concatenate([np.ones((1, H * W)), b_rest], axis=0)
    G = _softmax0(params["gate.weight"] @ hf + params["gate.bias"][:, None])
    E = G * B
    cache = {}
    if keep_cache:
        cache = {"cols": cols_list, "active": act_list, "hf": hf}
    out = Forward(B.reshape(k, H, W), G.reshape(k, H, W), E.reshape(k, H, W), cache)
    for hook in FORWARD_HOOKS:
        hook(out)
    return out


# -- losses ---------------------------------------------------------------


def smooth_l1(r, beta: float = 1.0):
    a = np.abs(r)
    return np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)


def smooth_l1_grad(r, beta: float = 1.0):
    return np.where(np.abs(r) < beta, r / beta, np.sign(r))


def loss_dense(d_hat: DepthMap, d_gt: DepthMap, beta: float = 1.0) -> float:
    """Mean SmoothL1 of the log-depth residual over jointly valid pixels."""
    if d_hat.shape != d_gt.shape:
        raise ShapeError(f"{d_hat.shape} != {d_gt.shape}")
    m = d_hat.mask & d_gt.mask
    if not m.any():
        raise EmptyMaskError("dense loss over an empty mask")
    r = np.log(d_hat.values[m]) - np.log(d_gt.values[m])
    return float(smooth_l1(r, beta).mean())


def loss_anchor(m, w, y) -> float:
    r = np.asarray(m) @ np.asarray(w) - np.asarray(y)
    return float(np.mean(r * r))


def _decor_parts(e: np.ndarray):
    k = e.shape[0]
    flat = e.reshape(k, -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    ok = norms > 0
    unit = np.zeros_like(flat)
    unit[ok] = flat[ok] / norms[ok, None]
    cos = unit @ unit.T
    np.fill_diagonal(cos, 0.0)
    return flat, norms, ok, unit, cos


def loss_decor(e) -> float:
    """Mean squared cosine between distinct flattened basis maps; zero-norm maps contribute 0."""
    e = np.asarray(e, dtype=np.float64)
    k = e.shape[0]
    if k < 2:
        return 0.0
    _, _, _, _, cos = _decor_parts(e)
    return float((cos * cos).sum() / (k * (k - 1)))


def zero_norm_channels(e) -> int:
    e = np.asarray(e)
    return int(np.count_nonzero(~np.any(e.reshape(e.shape[0], -1) != 0, axis=1)))


def loss_gate(g) -> float:
    """Per-pixel mean of ``sum_m G log G`` (negative entropy), with ``0 log 0 = 0``."""
    g = np.asarray(g, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(g > 0, g * np.log(g), 0.0)
    return float(t.sum() / (g.shape[1] * g.shape[2]))


@dataclass(frozen=True)
class LossBreakdown:
    dense: float
    anchor: float
    decor: float
    gate: float
    total: float
    lambda_anchor: float
    lambda_decor: float
    lambda_gate: float
    n_zero_norm: int = 0

    def row(self) -> tuple:
        return (self.dense, self.anchor, self.decor, self.gate, self.total)


# -- objective and gradient -----------------------------------------------


@dataclass(frozen=True, eq=False)
class Problem:
    """One training example: generator input, depths and anchor pixels with targets."""

    x: GeneratorInput
    d_mde: DepthMap
    d_gt: DepthMap
    rows: np.ndarray
    cols: np.ndarray
    y: np.ndarray

    @property
    def loss_mask(self) -> np.ndarray:
        return self.d_mde.mask & self.d_gt.mask


def make_problem(x: GeneratorInput, d_mde: DepthMap, d_gt: DepthMap, anchors) -> Problem:
    from .anchors import compute_targets

    return Problem(x, d_mde, d_gt, anchors.rows, anchors.cols, compute_targets(anchors, d_mde))


def _solve_weights(m, y, lam):
    c = ridge_factor(m, lam)
    return cho_solve(c, m.T @ y), c


def evaluate(params: dict, prob: Problem, cfg: LossConfig = LossConfig(),
             fixed_w: Optional[np.ndarray] = None, fwd: Optional[Forward] = None):
    """Loss breakdown plus intermediates. ``fixed_w`` bypasses the ridge solve."""
    if fwd is None:
        fwd = forward(params, prob.x)
    E = fwd.embedding
    M = E[:, prob.rows, prob.cols].T
    if fixed_w is None:
        w, _ = _solve_weights(M, prob.y, cfg.ridge)
    else:
        w = np.asarray(fixed_w, dtype=np.float64)
    ell = np.tensordot(w, E, axes=1)
    mask = prob.loss_mask
    if not mask.any():
        raise EmptyMaskError("problem has no valid pixels")
    r = ell[mask] + np.log(prob.d_mde.values[mask]) - np.log(prob.d_gt.values[mask])
    dense = float(smooth_l1(r, cfg.smooth_beta).mean())
    anchor = loss_anchor(M, w, prob.y)
    decor = loss_decor(E)
    gate = loss_gate(fwd.gating)
    total = dense + cfg.lambda_anchor * anchor + cfg.lambda_decor * decor + cfg.lambda_gate * gate
    lb = LossBreakdown(dense, anchor, decor, gate, total, cfg.lambda_anchor, cfg.lambda_decor,
                       cfg.lambda_gate, zero_norm_channels(E))
    return lb, {"w": w, "M": M, "ell": ell, "fwd": fwd, "resid": r}


def loss_and_grad(params: dict, prob: Problem, cfg: LossConfig = LossConfig(),
                  term_weights: Optional[dict] = None):
    """Total loss breakdown and its exact gradient with respect to ``params``.

    ``term_weights`` overrides the loss weights (keys ``dense``, ``anchor``,
    ``decor``, ``gate``) for isolating individual terms.
    """
    if term_weights is None:
        term_weights = {"dense": 1.0, "anchor": cfg.lambda_anchor,
                        "decor": cfg.lambda_decor, "gate": cfg.lambda_gate}
    fwd = forward(params, prob.x, keep_cache=True)
    lb, aux = evaluate(params, prob, cfg, fwd=fwd)
    E, G = fwd.embedding, fwd.gating
    K, H, W = E.shape
    w, M = aux["w"], aux["M"]
    mask = prob.loss_mask
    n_valid = int(mask.sum())

    dE = np.zeros_like(E)
    dG = np.zeros_like(G)
    gw = np.zeros(K)
    dM = np.zeros_like(M)

    a_dense = term_weights.get("dense", 0.0)
    if a_dense:
        g_ell = np.zeros((H, W))
        g_ell[mask] = smooth_l1_grad(aux["resid"], cfg.smooth_beta) * (a_dense / n_valid)
        dE += w[:, None, None] * g_ell[None]
        gw += np.tensordot(E, g_ell, axes=([1, 2], [0, 1]))

    a_anchor = term_weights.get("anchor", 0.0)
    if a_anchor:
        res = M @ w - prob.y
        n = len(prob.y)
        dM += (2.0 * a_anchor / n) * np.outer(res, w)
        gw += (2.0 * a_anchor / n) * (M.T @ res)

    if not cfg.detach_solve and np.any(gw):
        c = ridge_factor(M, cfg.ridge)
        v = cho_solve(c, gw)
        dM += np.outer(prob.y - M @ w, v) - np.outer(M @ v, w)

    np.add.at(dE, (slice(None), prob.rows, prob.cols), dM.T)

    a_decor = term_weights.get("decor", 0.0)
    if a_decor and K > 1:
        flat, norms, ok, unit, cos = _decor_parts(E)
        d_unit = (4.0 * a_decor / (K * (K - 1))) * (cos @ unit)
        d_flat = np.zeros_like(flat)
        proj = np.einsum("ij,ij->i", d_unit, unit)
        d_flat[ok] = (d_unit[ok] - proj[ok, None] * unit[ok]) / norms[ok, None]
        dE += d_flat.reshape(K, H, W)

    a_gate = term_weights.get("gate", 0.0)
    if a_gate:
        with np.errstate(divide="ignore"):
            lg = np.where(G > 0, np.log(G), 0.0)
        dG += (a_gate / (H * W)) * (lg + 1.0)

    grads = _backprop(params, fwd, dE, dG)
    return lb, grads


def _backprop(params: dict, fwd: Forward, dE: np.ndarray, dG: np.ndarray) -> dict:
    K, H, W = dE.shape
    B = fwd.basis.reshape(K, -1)
    G = fwd.gating.reshape(K, -1)
    dE = dE.reshape(K, -1)
    dG = dG.reshape(K, -1) + dE * B
    dB = dE * G
    dz = G * (dG - (G * dG).sum(axis=0, keepdims=True))
    db_rest = dB[1:]
    hf = fwd.cache["hf"]
    grads = {
        "gate.weight": dz @ hf.T,
        "gate.bias": dz.sum(axis=1),
        "basis.weight": db_rest @ hf.T,
        "basis.bias": db_rest.sum(axis=1),
    }
    dh = params["gate.weight"].T @ dz + params["basis.weight"].T @ db_rest
    n_layers = len(fwd.cache["cols"])
    for i in reversed(range(n_layers)):
        wt = params[f"conv{i}.weight"]
        dzl = np.where(fwd.cache["active"][i], dh, 0.0)
        cols = fwd.cache["cols"][i]
        grads[f"conv{i}.weight"] = (dzl @ cols.T).reshape(wt.shape)
        grads[f"conv{i}.bias"] = dzl.sum(axis=1)
        if i:
            dh = _col2im(wt.reshape(wt.shape[0], -1).T @ dzl, wt.shape[1], H, W).reshape(wt.shape[1], -1)
    return grads


def activation_pattern(params: dict, x: GeneratorInput) -> list:
    """ReLU on/off pattern of every trunk layer (used to skip kinks in finite differences)."""
    return [c for c in forward(params, x, keep_cache=True).cache["active"]]


def embed(params: dict, x: GeneratorInput) -> np.ndarray:
    return forward(params, x).embedding
