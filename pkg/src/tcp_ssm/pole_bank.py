"""Stable grouped base pole bank.

Unconstrained trainables are squashed into valid pole ranges with a margin
``epsilon``::

    rho   = (1 - eps) * sigmoid(rho_hat)        complex radius
    theta = pi * sigmoid(theta_hat)             complex angle
    |a|   = (1 - eps) * sigmoid(rho_hat_r)      real magnitude
    sign  = tanh(s_hat)                         real sign, a = sign * |a|

so every base denominator is Schur stable by construction.
:func:`certify_schur` checks that numerically with the companion-matrix root
oracle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict
from scipy.special import expit, logit

from .denominator import batched_roots, dominant_modulus, expand_factors, roots
from .errors import IndexOutOfRange, ShapeMismatch
from .models import PoleBankConfig, PoleBankParams, ReportModel

if TYPE_CHECKING:
    from .modulation import ModulatedPoles

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

# Pre-activation range keeping sigmoid radii and their logs finite and positive.
HAT_LIMIT = 700.0


@dataclass(frozen=True)
class ConstrainedPoleBank:
    """Mapped stable poles per group.

    Attributes:
        a: Real poles [G, L], a = s_bar * rho_bar_r
        s_bar: Real-pole signs in (-1, 1) [G, L]
        rho_bar_r: Real-pole magnitudes in (0, 1 - eps) [G, L]
        rho_c: Complex radii in (0, 1 - eps) [G, K]
        theta_c: Complex angles in (0, pi) [G, K]
        epsilon: Stability margin used by the mapping
    """

    a: FloatArray
    s_bar: FloatArray
    rho_bar_r: FloatArray
    rho_c: FloatArray
    theta_c: FloatArray
    epsilon: float

    @property
    def G(self) -> int:
        return int(self.rho_c.shape[-2])

    @property
    def r(self) -> int:
        return int(self.a.shape[-1] + 2 * self.rho_c.shape[-1])


def constrain_arrays(
    rho_hat_c: FloatArray,
    theta_hat: FloatArray,
    rho_hat_r: FloatArray,
    s_hat: FloatArray,
    epsilon: float,
) -> ConstrainedPoleBank:
    """Array-level mapping; accepts any leading batch dimensions.

    Radius and angle pre-activations are clipped to ``[-HAT_LIMIT, HAT_LIMIT]``.
    """
    rho_hat_c = np.clip(rho_hat_c, -HAT_LIMIT, HAT_LIMIT)
    theta_hat = np.clip(theta_hat, -HAT_LIMIT, HAT_LIMIT)
    rho_hat_r = np.clip(rho_hat_r, -HAT_LIMIT, HAT_LIMIT)
    rho_c = (1.0 - epsilon) * expit(rho_hat_c)
    theta_c = np.pi * expit(theta_hat)
    rho_bar_r = (1.0 - epsilon) * expit(rho_hat_r)
    s_bar = np.tanh(s_hat)
    return ConstrainedPoleBank(
        a=s_bar * rho_bar_r,
        s_bar=s_bar,
        rho_bar_r=rho_bar_r,
        rho_c=rho_c,
        theta_c=theta_c,
        epsilon=epsilon,
    )


def constrain(params: PoleBankParams, cfg: PoleBankConfig) -> ConstrainedPoleBank:
    """Map unconstrained pole variables into the stable bank.

    Raises:
        ShapeMismatch: If any array disagrees with ``cfg``
    """
    try:
        params.check_against(cfg)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    return constrain_arrays(
        params.rho_hat_c, params.theta_hat, params.rho_hat_r, params.s_hat, cfg.epsilon
    )


def init_pole_params(cfg: PoleBankConfig) -> PoleBankParams:
    """Documented initialisation giving a spread of timescales.

    Complex angles are equispaced inside (0, pi); complex radii and real
    magnitudes are log-spaced in [0.5, 0.99 * (1 - eps)]; real signs start at
    tanh(0.5). Every group starts from the same bank.
    """
    eps = cfg.epsilon
    top = 0.99 * (1.0 - eps)

    def radii(n: int) -> FloatArray:
        if n == 0:
            return np.zeros(0)
        return np.geomspace(0.5, top, n) if n > 1 else np.array([0.5])

    k = np.arange(1, cfg.K + 1)
    theta_targets = k / (cfg.K + 1)
    rho_hat_c = logit(radii(cfg.K) / (1.0 - eps))
    theta_hat = logit(theta_targets)
    rho_hat_r = logit(radii(cfg.L) / (1.0 - eps))

    def rows(v: FloatArray) -> FloatArray:
        return np.tile(v, (cfg.G, 1))

    return PoleBankParams(
        rho_hat_c=rows(rho_hat_c),
        theta_hat=rows(theta_hat),
        rho_hat_r=rows(rho_hat_r),
        s_hat=np.full((cfg.G, cfg.L), 0.5),
    )


def base_factors(bank: ConstrainedPoleBank, g: int) -> list[FloatArray]:
    """Factor coefficient arrays of the base denominator of group ``g``.

    Returns L first-order factors ``[1, -a]`` followed by K second-order
    factors ``[1, -2 rho cos(theta), rho**2]``.

    Raises:
        IndexOutOfRange: If ``g`` is not a valid group index
    """
    if not 0 <= g < bank.G:
        raise IndexOutOfRange(f"Group {g} outside 0..{bank.G - 1}")
    factors = [np.array([1.0, -a]) for a in bank.a[g]]
    for rho, theta in zip(bank.rho_c[g], bank.theta_c[g], strict=True):
        factors.append(np.array([1.0, -2.0 * rho * math.cos(theta), rho * rho]))
    return factors


def base_denominator(bank: ConstrainedPoleBank, g: int) -> FloatArray:
    """Monic expanded base denominator ``[1, q_1, ..., q_r]`` of group ``g``."""
    return expand_factors(base_factors(bank, g))


class GroupStability(BaseModel):
    model_config = ConfigDict(extra="forbid")

    group: int
    max_modulus: float
    stable: bool


class StabilityReport(ReportModel):
    """Per-group maximum root modulus against the bound ``1 - eps + tol``."""

    kind: str = "stability"
    scope: Literal["base", "modulated"] = "base"
    epsilon: float
    tol: float
    bound: float
    groups: list[GroupStability]
    stable: bool

    def summary(self) -> str:
        lines = [
            f"{self.scope} pole bank: bound {self.bound:.12f} "
            f"({'certified' if self.stable else 'VIOLATED'})"
        ]
        for g in self.groups:
            mark = "ok" if g.stable else "FAIL"
            lines.append(f"  group {g.group}: max |root| = {g.max_modulus:.12f} [{mark}]")
        return "\n".join(lines)


def _report(
    maxima: list[float], epsilon: float, tol: float, scope: Literal["base", "modulated"]
) -> StabilityReport:
    bound = 1.0 - epsilon + tol
    groups = [
        GroupStability(group=g, max_modulus=m, stable=m <= bound)
        for g, m in enumerate(maxima)
    ]
    report = StabilityReport(
        scope=scope,
        epsilon=epsilon,
        tol=tol,
        bound=bound,
        groups=groups,
        stable=all(g.stable for g in groups),
    )
    if not report.stable:
        logger.error(
            "Stability certification failed",
            extra={"scope": scope, "bound": bound, "max_modulus": max(maxima)},
        )
    return report


def certify_schur(bank: ConstrainedPoleBank, tol: float = 1e-9) -> StabilityReport:
    """Certify every base denominator via its numerically computed roots.

    Raises:
        RootFindingDiverged: If the root oracle fails for some group
    """
    maxima = [
        float(dominant_modulus(roots(c), c[1:]))
        for c in (base_denominator(bank, g) for g in range(bank.G))
    ]
    return _report(maxima, bank.epsilon, tol, "base")


def certify_denominators(
    q: FloatArray, epsilon: float, tol: float = 1e-9
) -> StabilityReport:
    """Certify token-conditioned denominators ``q`` [..., G, r] per group."""
    moduli = dominant_modulus(batched_roots(q), q)
    per_group = moduli.reshape(-1, q.shape[-2]).max(axis=0)
    return _report([float(m) for m in per_group], epsilon, tol, "modulated")


def certify_poles(
    poles: ModulatedPoles, epsilon: float, tol: float = 1e-9
) -> StabilityReport:
    """Certify token-conditioned poles per group from their factor moduli.

    Every factor's roots are known in closed form (``a`` for a real factor,
    ``rho * exp(+-j theta)`` for a pair), so the modulus needs no root finding
    and stays exact when clamped poles repeat.
    """
    G = poles.a_t.shape[-2]
    moduli = np.concatenate([np.abs(poles.a_t), poles.rho_t], axis=-1)
    per_group = moduli.reshape(-1, G, moduli.shape[-1]).max(axis=(0, 2))
    return _report([float(m) for m in per_group], epsilon, tol, "modulated")
