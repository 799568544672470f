"""Property suite behind ``tcp-ssm verify``.

Checks are registered by name with :func:`check` and run in registration
order. Each receives a :class:`VerifyContext` and returns a
:class:`CheckResult`; sizes shrink with ``quick``. Every check draws from its
own seeded stream, so results depend only on the settings.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .analysis import (
    FlopModel,
    dominant_bin,
    envelope_slope,
    flop_report,
    impulse_response,
    memory_horizon,
    reduction_percent,
    transfer_function,
)
from .config import TcpSettings
from .denominator import expand_stacked, expand_token_denominators
from .distill import distill_loss, distill_loss_and_grad
from .errors import ConfigError, MismatchBeyondTolerance
from .gradients import grad_check
from .models import ModulationHeads, PoleBankConfig, ReportModel
from .modulation import TokenScales, modulate, softplus, token_poles
from .numerator import causal_window, dense_equivalent_B, driving_signal
from .params import random_operator_params, zero_heads
from .pole_bank import (
    base_denominator,
    certify_denominators,
    certify_poles,
    constrain,
    constrain_arrays,
)
from .scan import (
    build_route,
    forward_multi_route,
    forward_route,
    lti_crosscheck,
    reference_forward,
)
from .tensor_io import Rng, randn, uniform

logger = logging.getLogger(__name__)

SABOTAGES = ("epsilon-zero",)


@dataclass(frozen=True)
class VerifyContext:
    settings: TcpSettings
    quick: bool = False
    sabotage: frozenset[str] = field(default_factory=frozenset)

    def rng(self, name: str) -> Rng:
        """Seeded stream private to one check."""
        key = sum((i + 1) * b for i, b in enumerate(name.encode("ascii")))
        return Rng(self.settings.seed).split(key)

    def size(self, full: int, quick: int) -> int:
        return quick if self.quick else full


class CheckResult(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    passed: bool
    metric: float
    threshold: float
    detail: str
    seconds: float = Field(default=0.0, exclude=True)


CheckFn = Callable[[VerifyContext], CheckResult]
CHECKS: dict[str, CheckFn] = {}


def check(name: str) -> Callable[[CheckFn], CheckFn]:
    """Register a named property check."""

    def register(fn: CheckFn) -> CheckFn:
        if name in CHECKS:
            raise ValueError(f"Duplicate check {name!r}")
        CHECKS[name] = fn
        return fn

    return register


def _result(name: str, metric: float, threshold: float, detail: str) -> CheckResult:
    return CheckResult(
        name=name,
        passed=bool(metric <= threshold),
        metric=float(metric),
        threshold=threshold,
        detail=detail,
    )


def _random_config(rng: Rng, max_E: int = 64) -> tuple[int, PoleBankConfig, int]:
    """Draw (E, pole config, r_f) within the suite's size limits."""
    u = uniform(rng, (6,))
    G = (1, 4, 8)[int(u[0] * 3)]
    L = int(u[1] * 3)
    K = int(u[2] * 3)
    if L + 2 * K == 0:
        L = 1
    width = max(1, int(u[3] * (max_E // G)) + 1)
    E = min(G * width, max_E)
    r_f = min(E, 1 + int(u[4] * 8))
    return E, PoleBankConfig(G=G, L=L, K=K), r_f


@check("stability_fuzz")
def check_stability_fuzz(ctx: VerifyContext) -> CheckResult:
    """Base and token-modulated denominators stay inside 1 - eps + tol.

    Base denominators go through the root oracle; modulated ones are read off
    their factor moduli, which stay exact when the clamp makes poles repeat.
    """
    draws = ctx.size(ctx.settings.stability_draws, 500)
    eps_target = ctx.settings.epsilon
    eps_used = 0.0 if "epsilon-zero" in ctx.sabotage else eps_target
    rng = ctx.rng("stability_fuzz")
    G, L, K = 4, 2, 2
    r = L + 2 * K

    def wide(key: int, shape: tuple[int, ...]) -> np.ndarray:
        return 4.0 * randn(rng.split(key), shape)

    bank = constrain_arrays(
        wide(0, (draws, G, K)),
        wide(1, (draws, G, K)),
        wide(2, (draws, G, L)),
        wide(3, (draws, G, L)),
        eps_used,
    )
    c1 = np.concatenate([-bank.a, -2.0 * bank.rho_c * np.cos(bank.theta_c)], axis=-1)
    c2 = np.concatenate([np.zeros_like(bank.a), bank.rho_c**2], axis=-1)
    moduli = np.concatenate([np.abs(bank.a), bank.rho_c], axis=-1)
    q_base = expand_stacked(c1, c2, moduli, r)[..., 1:]

    delta_0 = ctx.settings.delta_0
    scales = TokenScales(
        s_rho=(ctx.settings.delta_min + softplus(wide(4, (draws, G)))) / delta_0,
        s_theta=1.0 + ctx.settings.lambda_theta * np.tanh(wide(5, (draws, G))),
    )
    # One token per draw; the bank's leading draw axis broadcasts with the scales.
    poles = modulate(bank, scales, clamp=ctx.settings.clamp_radius)
    base = certify_denominators(q_base, eps_target)
    modulated = certify_poles(poles, eps_target)
    worst_base = max(g.max_modulus for g in base.groups)
    worst_mod = max(g.max_modulus for g in modulated.groups)
    bound = 1.0 - eps_target + ctx.settings.root_tol
    worst = max(worst_base, worst_mod)
    return CheckResult(
        name="stability_fuzz",
        passed=worst <= bound,
        metric=worst,
        threshold=bound,
        detail=f"{draws} draws x {G} groups; max |root| base {worst_base:.12f}, "
        f"modulated {worst_mod:.12f}",
    )


@check("identity_recovery")
def check_identity_recovery(ctx: VerifyContext) -> CheckResult:
    """Zero heads reproduce the base denominators."""
    n = ctx.size(100, 10)
    root = ctx.rng("identity_recovery")
    worst = 0.0
    for i in range(n):
        rng = root.split(i)
        E, cfg, r_f = _random_config(rng.split(0))
        p = random_operator_params(E, cfg, r_f, rng.split(1), scale=2.0)
        p = p.replace(heads=zero_heads(E, delta_min=ctx.settings.delta_min))
        x = randn(rng.split(2), (1, 8, E))
        _, poles = token_poles(x, p)
        q = expand_token_denominators(poles).q
        bank = constrain(p.pole, p.pole_cfg)
        for g in range(cfg.G):
            base = base_denominator(bank, g)[1:]
            scale = max(float(np.max(np.abs(base))), 1e-300)
            worst = max(worst, float(np.max(np.abs(q[..., g, :] - base))) / scale)
    return _result("identity_recovery", worst, 1e-12, f"{n} configs, max rel error {worst:.3e}")


@check("oracle_equivalence")
def check_oracle_equivalence(ctx: VerifyContext) -> CheckResult:
    """Optimised kernel against the naive float64 reference."""
    n = ctx.size(100, 8)
    max_M = ctx.size(1024, 64)
    root = ctx.rng("oracle_equivalence")
    precision = ctx.settings.precision
    tol64, tol = ctx.settings.oracle_tol_f64, ctx.settings.oracle_tol
    worst64 = worst = 0.0
    for i in range(n):
        rng = root.split(i)
        E, cfg, r_f = _random_config(rng.split(0))
        M = 1 + int(uniform(rng.split(1), (1,))[0] * max_M)
        p = random_operator_params(E, cfg, r_f, rng.split(2), scale=0.5)
        x = 2.0 * uniform(rng.split(3), (1, M, E)) - 1.0
        route = build_route("fwd" if i % 2 == 0 else "bwd", M)
        ref = reference_forward(x, p, route)
        err64 = float(np.max(np.abs(forward_route(x, p, route, "f64") - ref)))
        err = err64
        if precision != "f64":
            err = float(np.max(np.abs(forward_route(x, p, route, precision) - ref)))
        worst64 = max(worst64, err64)
        worst = max(worst, err)
    return CheckResult(
        name="oracle_equivalence",
        passed=worst64 <= tol64 and worst <= tol,
        metric=max(worst64 / tol64, worst / tol),
        threshold=1.0,
        detail=f"{n} configs; f64 {worst64:.3e} (tol {tol64:.0e}), "
        f"{precision} {worst:.3e} (tol {tol:.0e})",
    )


@check("low_rank_identity")
def check_low_rank_identity(ctx: VerifyContext) -> CheckResult:
    """Dense taps applied to the window equal the low-rank driving signal."""
    n = ctx.size(1000, 100)
    root = ctx.rng("low_rank_identity")
    worst = 0.0
    for i in range(n):
        rng = root.split(i)
        u = uniform(rng.split(0), (3,))
        E = 2 + int(u[0] * 31)
        r = 1 + int(u[1] * 8)
        r_f = 1 + int(u[2] * min(E, 8))
        U = randn(rng.split(1), (E, r_f))
        V = randn(rng.split(2), (E, r_f))
        alpha = randn(rng.split(3), (r,))
        gamma = uniform(rng.split(4), (r_f,))
        xs = randn(rng.split(5), (r + 1, E))
        phi = xs @ V
        eta = driving_signal(causal_window(phi, r, r), alpha, gamma, U)
        dense = dense_equivalent_B(alpha, gamma, U, V)
        direct = sum(dense[j] @ xs[r - (j + 1)] for j in range(r))
        scale = max(float(np.max(np.abs(direct))), 1e-300)
        worst = max(worst, float(np.max(np.abs(eta - direct))) / scale)
    return _result("low_rank_identity", worst, 1e-12, f"{n} cases, max rel error {worst:.3e}")


@check("lti_crosscheck")
def check_lti(ctx: VerifyContext) -> CheckResult:
    """Identity-modulated operator against companion-form simulation."""
    n = ctx.size(50, 5)
    root = ctx.rng("lti_crosscheck")
    worst = 0.0
    tol = ctx.settings.oracle_tol_f64
    for i in range(n):
        rng = root.split(i)
        E, cfg, r_f = _random_config(rng.split(0), max_E=16)
        p = random_operator_params(E, cfg, r_f, rng.split(1))
        p = p.replace(heads=zero_heads(E))
        taps = randn(rng.split(2), (cfg.r,))
        try:
            report = lti_crosscheck(p, taps, M=256, tol=tol)
            worst = max(worst, report.max_abs_error)
        except MismatchBeyondTolerance as e:
            worst = max(worst, e.max_error)
    return _result("lti_crosscheck", worst, tol, f"{n} systems, max abs error {worst:.3e}")


@check("grad_check")
def check_gradients(ctx: VerifyContext) -> CheckResult:
    """Analytic backward against central differences; distill teacher gets zero."""
    n = ctx.size(20, 2)
    root = ctx.rng("grad_check")
    worst = 0.0
    for i in range(n):
        rng = root.split(i)
        u = uniform(rng.split(0), (4,))
        G = (1, 2)[int(u[0] * 2)]
        E = G * (1 + int(u[1] * (8 // G)))
        E = min(E, 8)
        cfg = PoleBankConfig(G=G, L=1, K=1)
        r_f = 1 + int(u[2] * min(E, 3))
        mode = ("shared", "group_specific", "fixed")[i % 3]
        p = random_operator_params(E, cfg, r_f, rng.split(1), mode=mode)
        M = 4 + int(u[3] * 12)
        x = 2.0 * uniform(rng.split(2), (1, M, E)) - 1.0
        routes = [build_route("fwd", M), build_route("bwd", M)][: 1 + i % 2]
        worst = max(worst, grad_check(x, p, routes).max_rel_error)

    rng = root.split(n)
    student = [randn(rng.split(0), (1, 4, 3)), randn(rng.split(1), (2, 2, 2))]
    teacher = [randn(rng.split(2), (1, 4, 3)), randn(rng.split(3), (2, 2, 2))]
    _, s_grads, t_grads = distill_loss_and_grad(student, teacher)
    teacher_zero = all(not np.any(g) for g in t_grads)
    fd_err = 0.0
    h = 1e-6
    for layer, s in enumerate(student):
        for idx in np.ndindex(s.shape):
            plus = [a.copy() for a in student]
            minus = [a.copy() for a in student]
            plus[layer][idx] += h
            minus[layer][idx] -= h
            numeric = (distill_loss(plus, teacher) - distill_loss(minus, teacher)) / (2 * h)
            fd_err = max(fd_err, abs(numeric - s_grads[layer][idx]))
    passed = worst <= 1e-4 and teacher_zero and fd_err <= 1e-6
    return CheckResult(
        name="grad_check",
        passed=passed,
        metric=worst,
        threshold=1e-4,
        detail=f"{n} configs, max rel error {worst:.3e}; distill teacher gradient "
        f"{'zero' if teacher_zero else 'NONZERO'}, student FD error {fd_err:.1e}",
    )


@check("flop_model")
def check_flops(ctx: VerifyContext) -> CheckResult:
    """Integer cost formulas and the quoted reduction arithmetic."""
    failures = []
    for r, r_f, N in [(4, 8, 16), (2, 4, 16), (6, 8, 8), (16, 1, 1)]:
        m = FlopModel(r=r, r_f=r_f, N=N, E=192, M=196, routes=2)
        rep = flop_report(m)
        if m.tcp_cost != 2 * r + 3 * r_f or m.baseline_cost != 7 * N:
            failures.append(f"per-token cost r={r} r_f={r_f} N={N}")
        if rep.tcp_total != (2 * r + 3 * r_f) * 196 * 192 * 2:
            failures.append(f"total r={r}")
        doubled = flop_report(m.model_copy(update={"M": 392}))
        if doubled.tcp_total != 2 * rep.tcp_total:
            failures.append("linearity in M")
    worst = 0.0
    for ours, base, expected in [(295.3, 497.5, 40.6), (129.9, 233.0, 44.2), (32, 112, 71.4)]:
        worst = max(worst, abs(reduction_percent(ours, base) - expected))
    if worst > 0.1:
        failures.append("reduction arithmetic")
    return CheckResult(
        name="flop_model",
        passed=not failures,
        metric=worst,
        threshold=0.1,
        detail="ok" if not failures else "; ".join(failures),
    )


@check("impulse_physics")
def check_impulse(ctx: VerifyContext) -> CheckResult:
    """Envelope decay and dominant frequency of a single pole pair."""
    rho, theta, n = 0.9, math.pi / 3, 1024
    tf = transfer_function([1.0, 0.0], [-2 * rho * math.cos(theta), rho * rho])
    h = impulse_response(tf, n)
    slope = envelope_slope(h[:201])
    slope_err = abs(slope - math.log(rho)) / abs(math.log(rho))
    bin_err = abs(dominant_bin(h) - theta / (2 * math.pi) * n)
    return CheckResult(
        name="impulse_physics",
        passed=slope_err <= 0.02 and bin_err <= 1.0,
        metric=slope_err,
        threshold=0.02,
        detail=f"envelope slope {slope:.5f} vs ln(rho) {math.log(rho):.5f}; "
        f"dominant bin off by {bin_err:.2f}",
    )


def two_region_trial(rng: Rng, H: int = 8, W: int = 8, E: int = 4) -> tuple[bool, bool, bool]:
    """One synthetic memory-map trial.

    Region A (left columns) drives the radius head strongly positive, region B
    strongly negative, so A has the larger radius scale.

    Returns:
        (every tau in A below every tau in B, T2 in A, T1 in B)
    """
    u = uniform(rng.split(0), (2,))
    split = 1 + int(u[0] * (W - 1))
    amp = 2.0 + 3.0 * u[1]
    cfg = PoleBankConfig(G=1, L=1, K=1)
    p = random_operator_params(E, cfg, 1, rng.split(1))
    w_rho = np.zeros((1, E))
    w_rho[0, 0] = 1.0
    heads = ModulationHeads(
        W_rho=w_rho,
        b_rho=np.zeros(1),
        W_theta=np.zeros((1, E)),
        b_theta=np.zeros(1),
    )
    p = p.replace(heads=heads)
    grid = np.zeros((H, W, E))
    grid[:, :split, 0] = amp
    grid[:, split:, 0] = -amp
    grid += 0.01 * randn(rng.split(2), (H, W, E))
    x = grid.reshape(1, H * W, E)
    _, poles = token_poles(x, p)
    mmap = memory_horizon(poles, (H, W))
    in_a = np.zeros((H, W), dtype=bool)
    in_a[:, :split] = True
    separated = bool(mmap.tau[in_a].max() < mmap.tau[~in_a].min())
    markers = mmap.markers()
    t2 = markers["T2"]
    t1 = markers["T1"]
    return separated, bool(in_a[t2["row"], t2["col"]]), bool(not in_a[t1["row"], t1["col"]])


@check("memmap_monotonicity")
def check_memmap(ctx: VerifyContext) -> CheckResult:
    """Larger radius scale means strictly shorter memory, markers land right."""
    n = ctx.size(100, 10)
    root = ctx.rng("memmap_monotonicity")
    failures = sum(not all(two_region_trial(root.split(i))) for i in range(n))
    return _result("memmap_monotonicity", failures, 0, f"{n - failures}/{n} trials passed")


@check("determinism")
def check_determinism(ctx: VerifyContext) -> CheckResult:
    """Multi-route output is byte-identical across runs and worker counts."""
    rng = ctx.rng("determinism")
    cfg = PoleBankConfig(G=4, L=1, K=1)
    p = random_operator_params(16, cfg, 4, rng.split(0))
    M = ctx.size(256, 32)
    x = randn(rng.split(1), (2, M, 16))
    routes = [build_route(i, M, (M // 16, 16)) for i in ("fwd", "bwd", "col_fwd", "col_bwd")]
    runs = [
        forward_multi_route(x, p, routes, precision=ctx.settings.precision, threads=t).tobytes()
        for t in (1, 4, 1)
    ]
    same = runs[0] == runs[1] == runs[2]
    return _result("determinism", 0.0 if same else 1.0, 0.0, "identical" if same else "differs")


class VerifyReport(ReportModel):
    kind: str = "verify"
    seed: int
    quick: bool
    sabotage: list[str]
    results: list[CheckResult]
    passed: bool

    @property
    def failed(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def matrix(self) -> str:
        width = max(len(name) for name in CHECKS)
        lines = []
        for r in self.results:
            mark = "PASS" if r.passed else "FAIL"
            lines.append(f"{r.name:<{width}}  {mark}  {r.detail}")
        return "\n".join(lines)


def run_suite(
    settings: TcpSettings,
    quick: bool = False,
    sabotage: frozenset[str] = frozenset(),
    only: list[str] | None = None,
) -> VerifyReport:
    """Run the registered checks (or the ``only`` subset) in order."""
    unknown = sorted(sabotage - set(SABOTAGES))
    if unknown:
        raise ConfigError(f"Unknown sabotage {unknown}; expected one of {SABOTAGES}")
    names = list(CHECKS) if only is None else only
    missing = [n for n in names if n not in CHECKS]
    if missing:
        raise ConfigError(f"Unknown checks: {', '.join(missing)}")

    ctx = VerifyContext(settings=settings, quick=quick, sabotage=sabotage)
    results = []
    for name in names:
        start = time.perf_counter()
        result = CHECKS[name](ctx)
        result.seconds = round(time.perf_counter() - start, 3)
        logger.info(
            "Check finished",
            extra={"check": name, "passed": result.passed, "seconds": result.seconds},
        )
        results.append(result)
    return VerifyReport(
        seed=settings.seed,
        quick=quick,
        sabotage=sorted(sabotage),
        results=results,
        passed=all(r.passed for r in results),
    )
