"""Analytic gradients of the operator and their finite-difference check.

The backward pass mirrors the forward recurrence in float64:

- reverse accumulation through ``y_t = eta_t - sum_i q_{t,i} y_{t-i}``
- the low-rank numerator (``U``, ``V``, mixing and gate heads)
- the polynomial product from factor coefficients to ``q``
- pole modulation through the exp-log radius path, the radius clamp and the
  angle clip (zero gradient on both plateaus)
- the sigmoid/tanh/softplus maps back to the unconstrained variables

Parameters are addressed by dotted names such as ``"pole.rho_hat_c"`` or
``"num.U"``; see :data:`PARAMETER_NAMES`.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .denominator import expand_stacked
from .errors import NonFiniteGradient, ShapeMismatch
from .models import OperatorParams, ReportModel, ScanRoute
from .modulation import head_preactivations, softplus
from .numerator import lagged_latents
from .pole_bank import HAT_LIMIT, constrain
from .scan import build_route, check_route_inputs, forward_multi_route

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Gradients = dict[str, FloatArray]

PARAMETER_NAMES = (
    "pole.rho_hat_c",
    "pole.theta_hat",
    "pole.rho_hat_r",
    "pole.s_hat",
    "heads.W_rho",
    "heads.b_rho",
    "heads.W_theta",
    "heads.b_theta",
    "num.V",
    "num.U",
    "num.W_alpha",
    "num.W_gamma",
    "D",
)


def get_param(p: OperatorParams, name: str) -> FloatArray:
    """Look up a trainable array by dotted name."""
    if name == "D":
        return p.D
    section, _, field = name.partition(".")
    return getattr(getattr(p, section), field)


def with_param(p: OperatorParams, name: str, value: FloatArray) -> OperatorParams:
    """Copy of ``p`` with one trainable array replaced (shape unchanged)."""
    if get_param(p, name).shape != value.shape:
        raise ShapeMismatch(f"{name} expects shape {get_param(p, name).shape}")
    if name == "D":
        return p.model_copy(update={"D": value})
    section, _, field = name.partition(".")
    sub = getattr(p, section).model_copy(update={field: value})
    return p.model_copy(update={section: sub})


def _clipped_sigmoid(hat: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Sigmoid of the clipped pre-activation and the mask where the clip is inactive."""
    live = (np.abs(hat) <= HAT_LIMIT).astype(np.float64)
    return expit(np.clip(hat, -HAT_LIMIT, HAT_LIMIT)), live


def _product(c1: FloatArray, c2: FloatArray) -> FloatArray:
    """Full coefficients of prod_j [1, c1_j, c2_j] in the given order."""
    n = c1.shape[-1]
    return expand_stacked(c1, c2, np.zeros_like(c1), 2 * n)


def backward_route(
    x: FloatArray, p: OperatorParams, route: ScanRoute, grad_out: FloatArray
) -> Gradients:
    """Gradients of ``sum(grad_out * o)`` for the output ``o`` of one route.

    Args:
        x: Tokens [B, M, E] in original order
        p: Operator parameters
        route: Traversal order
        grad_out: Upstream gradient [B, M, E] in original order

    Returns:
        Mapping from parameter name to gradient array (same shape as the
        parameter)
    """
    x = np.asarray(x, dtype=np.float64)
    check_route_inputs(x, p, route)
    if grad_out.shape != x.shape:
        raise ShapeMismatch(f"grad_out has shape {grad_out.shape}, expected {x.shape}")
    B, M, E = x.shape
    G, r, Eg = p.G, p.r, p.group_width
    L = p.pole_cfg.L
    heads, num = p.heads, p.num
    perm = route.perm
    xp = x[:, perm]
    go = np.asarray(grad_out, dtype=np.float64)[:, perm]

    bank = constrain(p.pole, p.pole_cfg)
    cap = 1.0 - bank.epsilon
    fixed = heads.mode == "fixed"

    # Forward pass with everything the backward pass needs.
    if fixed:
        s_rho = np.ones((B, M, G))
        s_th = np.ones((B, M, G))
    else:
        z_rho, z_th = head_preactivations(xp, heads)
        th = np.tanh(z_th)
        s_rho = np.broadcast_to((heads.delta_min + softplus(z_rho)) / heads.delta_0, (B, M, G))
        s_th = np.broadcast_to(1.0 + heads.lambda_theta * th, (B, M, G))

    log_rr = np.log(bank.rho_bar_r)
    mag_raw = np.exp(s_rho[..., None] * log_rr)
    act_r = mag_raw < cap if heads.clamp_radius else np.ones(mag_raw.shape, dtype=bool)
    mag = np.where(act_r, mag_raw, cap)
    a = bank.s_bar * mag

    log_rc = np.log(bank.rho_c)
    rho_raw = np.exp(s_rho[..., None] * log_rc)
    act_c = rho_raw < cap if heads.clamp_radius else np.ones(rho_raw.shape, dtype=bool)
    rho = np.where(act_c, rho_raw, cap)
    th_raw = s_th[..., None] * bank.theta_c
    inside = (th_raw > 0.0) & (th_raw < np.pi)
    theta = np.clip(th_raw, 0.0, np.pi)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    c1 = np.concatenate([-a, -2.0 * rho * cos_t], axis=-1)
    c2 = np.concatenate([np.zeros_like(a), rho * rho], axis=-1)
    nf = c1.shape[-1]
    q = _product(c1, c2)[..., 1 : r + 1]

    phi = xp @ num.V
    alpha = xp @ num.W_alpha.T
    gamma = expit(xp @ num.W_gamma.T)
    phil = lagged_latents(phi, r)
    psi = np.einsum("btif,bti->btf", phil, alpha)
    gated = gamma * psi
    eta = gated @ num.U.T

    y = np.zeros((B, M, G, Eg))
    eta_g = eta.reshape(B, M, G, Eg)
    for t in range(M):
        acc = eta_g[:, t].copy()
        for i in range(1, min(r, t) + 1):
            acc -= q[:, t, :, i - 1, None] * y[:, t - i]
        y[:, t] = acc

    # Reverse accumulation through the recurrence.
    gy = go.reshape(B, M, G, Eg).copy()
    gq = np.zeros((B, M, G, r))
    for t in range(M - 1, -1, -1):
        gy_t = gy[:, t]
        for i in range(1, min(r, t) + 1):
            gq[:, t, :, i - 1] = -np.sum(gy_t * y[:, t - i], axis=-1)
            gy[:, t - i] -= q[:, t, :, i - 1, None] * gy_t
    geta = gy.reshape(B, M, E)

    grads: Gradients = {"D": np.sum(go * xp, axis=(0, 1))}

    # Numerator.
    grads["num.U"] = np.einsum("bte,btf->ef", geta, gated)
    gmix = geta @ num.U
    ggamma = gmix * psi
    gpsi = gmix * gamma
    grads["num.W_gamma"] = np.einsum("btf,bte->fe", ggamma * gamma * (1.0 - gamma), xp)
    galpha = np.einsum("btf,btif->bti", gpsi, phil)
    grads["num.W_alpha"] = np.einsum("bti,bte->ie", galpha, xp)
    gphil = np.einsum("btf,bti->btif", gpsi, alpha)
    gphi = np.zeros_like(phi)
    for i in range(1, min(r, M - 1) + 1):
        gphi[:, : M - i] += gphil[:, i:, i - 1]
    grads["num.V"] = np.einsum("bte,btf->ef", xp, gphi)

    # Polynomial product: d P[n] / d f_j[m] = R_j[n - m], R_j the other factors.
    gcoef = np.zeros((*q.shape[:-1], 2 * nf + 1))
    gcoef[..., 1 : r + 1] = gq
    n_rest = 2 * nf - 1
    gc1 = np.empty_like(c1)
    gc2 = np.empty_like(c2)
    for j in range(nf):
        keep = [k for k in range(nf) if k != j]
        rest = _product(c1[..., keep], c2[..., keep])
        gc1[..., j] = np.sum(gcoef[..., 1 : 1 + n_rest] * rest, axis=-1)
        gc2[..., j] = np.sum(gcoef[..., 2 : 2 + n_rest] * rest, axis=-1)

    ga = -gc1[..., :L]
    grho = gc1[..., L:] * (-2.0 * cos_t) + gc2[..., L:] * (2.0 * rho)
    gtheta = gc1[..., L:] * (2.0 * rho * sin_t)

    # Modulation of the real poles.
    gs_bar = np.sum(ga * mag, axis=(0, 1))
    gmag_raw = ga * bank.s_bar * act_r
    gs_rho = np.sum(gmag_raw * mag_raw * log_rr, axis=-1)
    g_rho_bar_r = np.sum(gmag_raw * s_rho[..., None] * mag_raw / bank.rho_bar_r, axis=(0, 1))

    # Complex poles.
    grho_raw = grho * act_c
    gs_rho = gs_rho + np.sum(grho_raw * rho_raw * log_rc, axis=-1)
    g_rho_c = np.sum(grho_raw * s_rho[..., None] * rho_raw / bank.rho_c, axis=(0, 1))
    gth_raw = gtheta * inside
    gs_th = np.sum(gth_raw * bank.theta_c, axis=-1)
    g_theta_c = np.sum(gth_raw * s_th[..., None], axis=(0, 1))

    # Heads.
    if fixed:
        for name in ("heads.W_rho", "heads.b_rho", "heads.W_theta", "heads.b_theta"):
            grads[name] = np.zeros_like(get_param(p, name))
    else:
        if heads.C == 1:
            gs_rho = gs_rho.sum(axis=-1, keepdims=True)
            gs_th = gs_th.sum(axis=-1, keepdims=True)
        gz_rho = gs_rho * expit(z_rho) / heads.delta_0
        gz_th = gs_th * heads.lambda_theta * (1.0 - th * th)
        grads["heads.W_rho"] = np.einsum("btc,bte->ce", gz_rho, xp)
        grads["heads.b_rho"] = gz_rho.sum(axis=(0, 1))
        grads["heads.W_theta"] = np.einsum("btc,bte->ce", gz_th, xp)
        grads["heads.b_theta"] = gz_th.sum(axis=(0, 1))

    # Unconstrained pole variables.
    eps = bank.epsilon
    sig_c, live_c = _clipped_sigmoid(p.pole.rho_hat_c)
    sig_t, live_t = _clipped_sigmoid(p.pole.theta_hat)
    sig_r, live_r = _clipped_sigmoid(p.pole.rho_hat_r)
    grads["pole.rho_hat_c"] = g_rho_c * (1.0 - eps) * sig_c * (1.0 - sig_c) * live_c
    grads["pole.theta_hat"] = g_theta_c * np.pi * sig_t * (1.0 - sig_t) * live_t
    grads["pole.rho_hat_r"] = g_rho_bar_r * (1.0 - eps) * sig_r * (1.0 - sig_r) * live_r
    grads["pole.s_hat"] = gs_bar * (1.0 - bank.s_bar**2)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    return grads


def squared_loss(
    x: FloatArray, p: OperatorParams, routes: Sequence[ScanRoute], threads: int = 1
) -> tuple[float, FloatArray]:
    """``sum(o**2)`` of the float64 multi-route output, and the output."""
    o = forward_multi_route(x, p, routes, precision="f64", threads=threads)
    return float(np.sum(o * o)), o


def operator_gradients(
    x: FloatArray,
    p: OperatorParams,
    routes: Sequence[ScanRoute],
    threads: int = 1,
) -> tuple[float, Gradients]:
    """Loss ``sum(o**2)`` over the route-averaged output and its gradients."""
    loss, o = squared_loss(x, p, routes, threads)
    go = 2.0 * o / len(routes)

    def run(route: ScanRoute) -> Gradients:
        return backward_route(x, p, route, go)

    workers = max(1, min(threads, len(routes)))
    if workers == 1:
        per_route = [run(route) for route in routes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_route = list(pool.map(run, routes))

    total = {name: g.copy() for name, g in per_route[0].items()}
    for g in per_route[1:]:
        for name in total:
            total[name] += g[name]
    return loss, total


class GradCheckReport(ReportModel):
    """Worst relative error between analytic and central-difference gradients."""

    kind: str = "grad_check"
    step: float
    loss: float
    max_rel_error: float
    per_parameter: dict[str, float]


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    x: FloatArray,
    p: OperatorParams,
    routes: Sequence[ScanRoute] | None = None,
    step: float = 1e-6,
    names: Sequence[str] = PARAMETER_NAMES,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Errors are relative to ``max(|analytic|, |numeric|, 1e-4 * max(1, |loss|))``
    so entries whose true gradient is zero are judged against the loss scale.
    """
    x = np.asarray(x, dtype=np.float64)
    routes = list(routes) if routes else [build_route("fwd", x.shape[1])]
    loss, grads = operator_gradients(x, p, routes)
    floor = 1e-4 * max(1.0, abs(loss))

    per_parameter: dict[str, float] = {}
    for name in names:
        base = np.array(get_param(p, name), dtype=np.float64)
        worst = 0.0
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            lp, _ = squared_loss(x, with_param(p, name, plus), routes)
            lm, _ = squared_loss(x, with_param(p, name, minus), routes)
            numeric = (lp - lm) / (2.0 * step)
            worst = max(worst, relative_error(float(grads[name][idx]), numeric, floor))
        per_parameter[name] = worst
        logger.debug("Gradient check", extra={"parameter": name, "max_rel_error": worst})

    return GradCheckReport(
        step=step,
        loss=loss,
        max_rel_error=max(per_parameter.values(), default=0.0),
        per_parameter=per_parameter,
    )
