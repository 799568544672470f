"""The TCP-SSM forward operator.

Per token, in route order::

    scales -> modulated poles -> q_{t,g,:} -> eta_t
    y_t[g] = eta_t[g] - sum_{i=1..r} q_{t,g,i} y_{t-i}[g]
    o_t    = y_t + D * x_t

with zero initial state. Two implementations share this contract:

- :func:`forward_route` precomputes all token coefficients vectorised (always
  in float64) and runs the recurrence over ring buffers in float32 or float64
- :func:`reference_forward` is a deliberately naive float64 loop that rebuilds
  every factor product and causal window per token, used as an oracle

Multi-route application averages the per-route outputs.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import companion

from .denominator import expand_factors, expand_token_denominators
from .errors import (
    ConfigError,
    MismatchBeyondTolerance,
    NonFiniteDetected,
    ShapeMismatch,
)
from .models import OperatorParams, ReportModel, ScanRoute
from .modulation import token_poles
from .numerator import causal_window, driving_signal, mixing_and_gates, project_tokens
from .pole_bank import base_denominator, constrain

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Precision = Literal["f32", "f64"]

_DTYPES: dict[str, type[np.floating]] = {"f32": np.float32, "f64": np.float64}

ROUTE_IDS = ("fwd", "bwd", "col_fwd", "col_bwd")
DEFAULT_ROUTES = "fwd,bwd"


def build_route(route_id: str, M: int, grid: tuple[int, int] | None = None) -> ScanRoute:
    """Build a named route over ``M`` tokens.

    ``fwd``/``bwd`` traverse the row-major flattening forwards and backwards;
    ``col_fwd``/``col_bwd`` traverse an H x W grid column by column and need
    ``grid``.

    Raises:
        ConfigError: For an unknown id or a grid that does not cover ``M``
    """
    if route_id == "fwd":
        return ScanRoute(id=route_id, perm=np.arange(M))
    if route_id == "bwd":
        return ScanRoute(id=route_id, perm=np.arange(M)[::-1])
    if route_id in ("col_fwd", "col_bwd"):
        if grid is None:
            raise ConfigError(f"Route {route_id} needs the H x W grid")
        h, w = grid
        if h * w != M:
            raise ConfigError(f"Grid {h}x{w} does not cover {M} tokens")
        perm = np.arange(M).reshape(h, w).T.reshape(-1)
        return ScanRoute(id=route_id, perm=perm if route_id == "col_fwd" else perm[::-1])
    raise ConfigError(f"Unknown route {route_id!r}; expected one of {', '.join(ROUTE_IDS)}")


def parse_routes(
    spec: str, M: int, grid: tuple[int, int] | None = None
) -> list[ScanRoute]:
    """Parse a comma-separated route list such as ``"fwd,bwd"``."""
    ids = [s.strip() for s in spec.split(",") if s.strip()]
    if not ids:
        raise ConfigError("At least one route is required")
    return [build_route(i, M, grid) for i in ids]


class HistoryRing:
    """The last ``depth`` pushed vectors, zero before anything is pushed."""

    def __init__(self, depth: int, shape: tuple[int, ...], dtype: type[np.floating]) -> None:
        self._buf = np.zeros((depth, *shape), dtype=dtype)
        self._depth = depth
        self._head = depth - 1

    def push(self, v: NDArray[np.floating]) -> None:
        self._head = (self._head + 1) % self._depth
        self._buf[self._head] = v

    def lags(self) -> NDArray[np.floating]:
        """Stacked history ``[depth, ...]``, row ``i - 1`` pushed ``i`` steps ago."""
        idx = (self._head - np.arange(self._depth)) % self._depth
        return self._buf[idx]


@dataclass
class ScanState:
    """Recurrent memory of one route: output and latent histories."""

    y: HistoryRing
    phi: HistoryRing

    @classmethod
    def zeros(
        cls, B: int, E: int, r: int, r_f: int, dtype: type[np.floating]
    ) -> ScanState:
        return cls(y=HistoryRing(r, (B, E), dtype), phi=HistoryRing(r, (B, r_f), dtype))


def check_route_inputs(x: FloatArray, p: OperatorParams, route: ScanRoute) -> None:
    if x.ndim != 3:
        raise ShapeMismatch(f"Expected tokens [B, M, E], got shape {x.shape}")
    if x.shape[2] != p.E:
        raise ShapeMismatch(f"Token width {x.shape[2]} does not match E={p.E}")
    if route.perm.size != x.shape[1]:
        raise ShapeMismatch(
            f"Route {route.id} covers {route.perm.size} tokens, input has {x.shape[1]}"
        )


def _check_eta(eta: FloatArray | None, x: FloatArray) -> None:
    if eta is not None and eta.shape != x.shape:
        raise ShapeMismatch(f"Injected eta has shape {eta.shape}, expected {x.shape}")


def _raise_first_nonfinite(y: NDArray[np.floating], route: ScanRoute) -> None:
    bad = ~np.isfinite(y).all(axis=(0, 2))
    if bad.any():
        t = int(np.argmax(bad))
        token = int(route.perm[t])
        logger.error(
            "Non-finite output", extra={"route": route.id, "position": t, "token_index": token}
        )
        raise NonFiniteDetected(token, route.id)


def forward_route(
    x: FloatArray,
    p: OperatorParams,
    route: ScanRoute,
    precision: Precision = "f32",
    eta: FloatArray | None = None,
) -> FloatArray:
    """Apply the operator along one route.

    Args:
        x: Tokens [B, M, E] in original order
        p: Operator parameters
        route: Traversal order
        precision: Recurrence dtype; coefficients are always expanded in float64
        eta: Optional driving signal [B, M, E] (original order) replacing the
            numerator; coefficients still come from ``x``

    Returns:
        Output [B, M, E] in original token order, dtype of ``precision``

    Raises:
        ShapeMismatch: On inconsistent shapes
        NonFiniteDetected: With the first token whose output is not finite
    """
    x = np.asarray(x)
    check_route_inputs(x, p, route)
    _check_eta(eta, x)
    dtype = _DTYPES[precision]
    B, M, E = x.shape
    G, r, Eg = p.G, p.r, p.group_width
    perm = route.perm

    x64 = x[:, perm].astype(np.float64)
    _, poles = token_poles(x64, p)
    q = expand_token_denominators(poles).q.astype(dtype)
    xs = x64.astype(dtype)

    if eta is None:
        phi = project_tokens(xs, p.num.V.astype(dtype))
        alpha, gamma = mixing_and_gates(xs.astype(np.float64), p.num)
        alpha, gamma = alpha.astype(dtype), gamma.astype(dtype)
        U = p.num.U.astype(dtype)
    else:
        eta_route = np.asarray(eta)[:, perm].astype(dtype)

    state = ScanState.zeros(B, E, r, p.num.r_f, dtype)
    y = np.empty((B, M, E), dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(M):
            if eta is None:
                psi = np.einsum("ibf,bi->bf", state.phi.lags(), alpha[:, t])
                eta_t = (gamma[:, t] * psi) @ U.T
                state.phi.push(phi[:, t])
            else:
                eta_t = eta_route[:, t]
            hist = state.y.lags().reshape(r, B, G, Eg)
            feedback = np.einsum("ibgc,bgi->bgc", hist, q[:, t])
            y_t = eta_t - feedback.reshape(B, E)
            state.y.push(y_t)
            y[:, t] = y_t
    _raise_first_nonfinite(y, route)

    return (y + p.D.astype(dtype) * xs)[:, route.inverse]


def reference_forward(
    x: FloatArray,
    p: OperatorParams,
    route: ScanRoute,
    eta: FloatArray | None = None,
) -> FloatArray:
    """Naive float64 oracle with the same contract as :func:`forward_route`."""
    x = np.asarray(x, dtype=np.float64)
    check_route_inputs(x, p, route)
    _check_eta(eta, x)
    B, M, E = x.shape
    G, r, Eg = p.G, p.r, p.group_width
    heads, num = p.heads, p.num
    bank = constrain(p.pole, p.pole_cfg)
    cap = 1.0 - bank.epsilon
    perm = route.perm
    xr = x[:, perm]
    eta_r = None if eta is None else np.asarray(eta, dtype=np.float64)[:, perm]
    y = np.zeros((B, M, E))

    for b in range(B):
        phi = xr[b] @ num.V
        for t in range(M):
            xt = xr[b, t]
            if heads.mode == "fixed":
                s_rho, s_theta = np.ones(G), np.ones(G)
            else:
                z_rho = heads.W_rho @ xt + heads.b_rho
                z_theta = heads.W_theta @ xt + heads.b_theta
                s_rho = np.broadcast_to(
                    (heads.delta_min + np.log1p(np.exp(-np.abs(z_rho))) + np.maximum(z_rho, 0.0))
                    / heads.delta_0,
                    (G,),
                )
                s_theta = np.broadcast_to(1.0 + heads.lambda_theta * np.tanh(z_theta), (G,))

            if eta_r is None:
                alpha = num.W_alpha @ xt
                gamma = 1.0 / (1.0 + np.exp(-(num.W_gamma @ xt)))
                window = causal_window(phi, t, r)
                eta_t = driving_signal(window, alpha, gamma, num.U)
            else:
                eta_t = eta_r[b, t]

            for g in range(G):
                factors = []
                for ell in range(bank.a.shape[1]):
                    mag = bank.rho_bar_r[g, ell] ** s_rho[g]
                    if heads.clamp_radius:
                        mag = min(mag, cap)
                    factors.append([1.0, -bank.s_bar[g, ell] * mag])
                for k in range(bank.rho_c.shape[1]):
                    rho = bank.rho_c[g, k] ** s_rho[g]
                    if heads.clamp_radius:
                        rho = min(rho, cap)
                    theta = min(max(s_theta[g] * bank.theta_c[g, k], 0.0), np.pi)
                    factors.append([1.0, -2.0 * rho * np.cos(theta), rho * rho])
                q = expand_factors(factors)[1:]
                sl = slice(g * Eg, (g + 1) * Eg)
                acc = eta_t[sl].copy()
                for i in range(1, r + 1):
                    if t - i >= 0:
                        acc -= q[i - 1] * y[b, t - i, sl]
                y[b, t, sl] = acc
    _raise_first_nonfinite(y, route)

    return (y + p.D * xr)[:, route.inverse]


def forward_multi_route(
    x: FloatArray,
    p: OperatorParams,
    routes: Sequence[ScanRoute],
    precision: Precision = "f32",
    threads: int = 1,
    eta: FloatArray | None = None,
) -> FloatArray:
    """Mean of the per-route outputs.

    Routes run on up to ``threads`` workers; results are combined in route
    order so the output does not depend on the worker count.

    Raises:
        ConfigError: If ``routes`` is empty
    """
    if not routes:
        raise ConfigError("At least one route is required")

    def run(route: ScanRoute) -> FloatArray:
        return forward_route(x, p, route, precision=precision, eta=eta)

    workers = max(1, min(threads, len(routes)))
    if workers == 1:
        outputs = [run(route) for route in routes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run, routes))

    total = outputs[0].copy()
    for o in outputs[1:]:
        total += o
    logger.debug(
        "Multi-route forward",
        extra={"routes": [r.id for r in routes], "workers": workers, "tokens": x.shape[1]},
    )
    return total / len(outputs)


class LtiReport(ReportModel):
    """Operator output vs companion-form state-space simulation."""

    kind: str = "lti_crosscheck"
    M: int
    max_abs_error: float
    tolerance: float
    passed: bool


def _is_identity_modulation(p: OperatorParams) -> bool:
    h = p.heads
    if h.mode == "fixed":
        return True
    return (
        not np.any(h.W_rho)
        and not np.any(h.b_rho)
        and not np.any(h.W_theta)
        and not np.any(h.b_theta)
        and abs(h.delta_0 - (h.delta_min + np.log(2.0))) <= 1e-15
    )


def companion_simulation(
    q: FloatArray, taps: FloatArray, d: FloatArray, u: FloatArray
) -> FloatArray:
    """Simulate ``h_{t+1} = A h_t + e_1 u_t``, ``y_t = b . h_t + d u_t``.

    ``A`` is the companion matrix of ``[1, q]``; ``u`` is [M, C] with all
    channels sharing the same dynamics and ``d`` [C] per channel.
    """
    A = companion(np.concatenate([[1.0], q]))
    r = q.size
    h = np.zeros((r, u.shape[1]))
    y = np.empty_like(u)
    for t in range(u.shape[0]):
        y[t] = taps @ h + d * u[t]
        h = A @ h
        h[0] += u[t]
    return y


def lti_crosscheck(
    p: OperatorParams, taps: FloatArray, M: int = 256, tol: float = 1e-10
) -> LtiReport:
    """Cross-check the recurrence against a companion-form LTI simulation.

    Modulation must be the identity, so every token sees the base poles. The
    numerator is replaced by per-lag scalar taps, ``eta_t = sum_i b_i x_{t-i}``,
    injected through ``forward_route``'s ``eta``.

    Raises:
        ConfigError: If modulation is not the identity or ``taps`` has the
            wrong length
        MismatchBeyondTolerance: If the two simulations disagree beyond ``tol``
    """
    if not _is_identity_modulation(p):
        raise ConfigError("LTI cross-check needs identity modulation (zero heads)")
    taps = np.asarray(taps, dtype=np.float64)
    if taps.shape != (p.r,):
        raise ConfigError(f"Expected {p.r} numerator taps, got shape {taps.shape}")

    E, r = p.E, p.r
    x = np.zeros((1, M, E))
    x[0, 0, :] = 1.0
    eta = np.zeros_like(x)
    for i in range(1, r + 1):
        eta[:, i:, :] += taps[i - 1] * x[:, :-i, :]
    route = build_route("fwd", M)
    out = forward_route(x, p, route, precision="f64", eta=eta)[0]

    bank = constrain(p.pole, p.pole_cfg)
    expected = np.empty((M, E))
    Eg = p.group_width
    for g in range(p.G):
        sl = slice(g * Eg, (g + 1) * Eg)
        q = base_denominator(bank, g)[1:]
        expected[:, sl] = companion_simulation(q, taps, p.D[sl], x[0, :, sl])

    err = float(np.max(np.abs(out - expected)))
    report = LtiReport(M=M, max_abs_error=err, tolerance=tol, passed=err <= tol)
    if not report.passed:
        raise MismatchBeyondTolerance("lti_crosscheck", err, tol)
    return report
