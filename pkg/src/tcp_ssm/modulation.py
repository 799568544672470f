"""Token-conditioned scaling of the base poles.

Each token produces a positive radius scale and a bounded angle scale::

    s_rho   = (delta_min + softplus(W_rho x + b_rho)) / delta_0
    s_theta = 1 + lambda * tanh(W_theta x + b_theta)

which act on the base bank as ``a_t = s_bar * rho_bar_r ** s_rho`` and
``rho_t = rho_c ** s_rho``, ``theta_t = clip(s_theta * theta_c, 0, pi)``.
With ``clamp`` on, modulated magnitudes are capped at ``1 - eps`` so scales
below one can never push a pole past the margin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ShapeMismatch
from .models import ModulationHeads, OperatorParams
from .pole_bank import ConstrainedPoleBank, constrain

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]


@dataclass(frozen=True)
class TokenScales:
    """Per-token scales broadcast to groups, each [..., G]."""

    s_rho: FloatArray
    s_theta: FloatArray


@dataclass(frozen=True)
class ModulatedPoles:
    """Token-conditioned poles.

    Attributes:
        a_t: Real poles [..., G, L]
        rho_t: Complex radii [..., G, K]
        theta_t: Complex angles in [0, pi] [..., G, K]
    """

    a_t: FloatArray
    rho_t: FloatArray
    theta_t: FloatArray


def softplus(z: FloatArray) -> FloatArray:
    return np.logaddexp(0.0, z)


def head_preactivations(
    x: FloatArray, heads: ModulationHeads
) -> tuple[FloatArray, FloatArray]:
    """Raw head outputs ``(W_rho x + b_rho, W_theta x + b_theta)``, each [..., C]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != heads.W_rho.shape[1]:
        raise ShapeMismatch(
            f"Token width {x.shape[-1]} does not match head width {heads.W_rho.shape[1]}"
        )
    return x @ heads.W_rho.T + heads.b_rho, x @ heads.W_theta.T + heads.b_theta


def compute_scales(x: FloatArray, heads: ModulationHeads, G: int) -> TokenScales:
    """Radius and angle scales for tokens ``x`` [..., E].

    Raises:
        ShapeMismatch: On a token-width mismatch, or group-specific heads whose
            row count differs from ``G``
    """
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    if heads.mode == "fixed":
        if x.shape[-1] != heads.W_rho.shape[1]:
            raise ShapeMismatch(
                f"Token width {x.shape[-1]} does not match head width {heads.W_rho.shape[1]}"
            )
        ones = np.ones((*lead, G))
        return TokenScales(s_rho=ones, s_theta=ones.copy())
    if heads.mode == "group_specific" and heads.C != G:
        raise ShapeMismatch(f"Group-specific heads have C={heads.C}, expected G={G}")

    z_rho, z_theta = head_preactivations(x, heads)
    s_rho = (heads.delta_min + softplus(z_rho)) / heads.delta_0
    s_theta = 1.0 + heads.lambda_theta * np.tanh(z_theta)
    shape = (*lead, G)
    return TokenScales(
        s_rho=np.broadcast_to(s_rho, shape).copy(),
        s_theta=np.broadcast_to(s_theta, shape).copy(),
    )


def modulate(
    bank: ConstrainedPoleBank, scales: TokenScales, clamp: bool = True
) -> ModulatedPoles:
    """Apply token scales to the base poles."""
    if scales.s_rho.shape[-1] != bank.G:
        raise ShapeMismatch(
            f"Scales cover {scales.s_rho.shape[-1]} groups, bank has {bank.G}"
        )
    cap = 1.0 - bank.epsilon
    s_rho = scales.s_rho[..., None]

    mag = np.exp(s_rho * np.log(bank.rho_bar_r))
    rho_t = np.exp(s_rho * np.log(bank.rho_c))
    if clamp:
        mag = np.minimum(mag, cap)
        rho_t = np.minimum(rho_t, cap)
    theta_t = np.clip(scales.s_theta[..., None] * bank.theta_c, 0.0, np.pi)
    return ModulatedPoles(a_t=bank.s_bar * mag, rho_t=rho_t, theta_t=theta_t)


def token_poles(x: FloatArray, p: OperatorParams) -> tuple[TokenScales, ModulatedPoles]:
    """Scales and modulated poles of an operator for tokens ``x`` [..., E]."""
    bank = constrain(p.pole, p.pole_cfg)
    scales = compute_scales(x, p.heads, p.G)
    return scales, modulate(bank, scales, clamp=p.heads.clamp_radius)
