"""Low-rank, strictly causal numerator.

Tokens are projected to a latent ``phi_t = V^T x_t`` of width ``r_f``. The
driving signal of the recurrence is::

    psi_t = sum_{i=1..r} alpha_{t,i} phi_{t-i}
    eta_t = U (gamma_t * psi_t)

with per-token mixing ``alpha_t = W_alpha x_t`` and gate
``gamma_t = sigmoid(W_gamma x_t)``. It equals applying the dense taps
``B_{t,i} = alpha_{t,i} U diag(gamma_t) V^T`` to the previous ``r`` tokens,
at O(r_f (E + r)) instead of O(r E^2) per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .errors import ShapeMismatch
from .models import NumeratorParams

FloatArray = NDArray[np.float64]


@dataclass(frozen=True)
class CausalWindow:
    """Latent history ``Phi`` [..., r_f, r]; column ``i - 1`` holds phi_{t-i}."""

    Phi: FloatArray

    @property
    def r(self) -> int:
        return int(self.Phi.shape[-1])


def project_tokens(x: FloatArray, V: FloatArray) -> FloatArray:
    """Latent projection ``phi = V^T x`` for tokens [..., E] -> [..., r_f]."""
    if x.shape[-1] != V.shape[0]:
        raise ShapeMismatch(f"Token width {x.shape[-1]} does not match V rows {V.shape[0]}")
    return x @ V


def mixing_and_gates(x: FloatArray, num: NumeratorParams) -> tuple[FloatArray, FloatArray]:
    """Per-token lag mixing ``alpha`` [..., r] and gate ``gamma`` [..., r_f]."""
    if x.shape[-1] != num.W_alpha.shape[1]:
        raise ShapeMismatch(
            f"Token width {x.shape[-1]} does not match W_alpha width {num.W_alpha.shape[1]}"
        )
    return x @ num.W_alpha.T, expit(x @ num.W_gamma.T)


def causal_window(phi: FloatArray, t: int, r: int) -> CausalWindow:
    """Window of the ``r`` latents strictly before position ``t``.

    ``phi`` is [..., M, r_f] in scan order; lags before the first token are
    zero.
    """
    m = phi.shape[-2]
    if not 0 <= t < m:
        raise ShapeMismatch(f"Position {t} outside 0..{m - 1}")
    Phi = np.zeros((*phi.shape[:-2], phi.shape[-1], r), dtype=phi.dtype)
    for i in range(1, min(r, t) + 1):
        Phi[..., :, i - 1] = phi[..., t - i, :]
    return CausalWindow(Phi=Phi)


def driving_signal(
    window: CausalWindow, alpha: FloatArray, gamma: FloatArray, U: FloatArray
) -> FloatArray:
    """``eta_t = U (gamma * Phi alpha)`` for one position, [..., E]."""
    psi = np.einsum("...fr,...r->...f", window.Phi, alpha)
    return (gamma * psi) @ U.T


def dense_equivalent_B(
    alpha: FloatArray, gamma: FloatArray, U: FloatArray, V: FloatArray
) -> FloatArray:
    """Dense taps ``B_i = alpha_i U diag(gamma) V^T`` stacked as [r, E, E]."""
    core = (U * gamma) @ V.T
    return alpha[:, None, None] * core[None, :, :]


def lagged_latents(phi: FloatArray, r: int) -> FloatArray:
    """All causal windows at once: [..., M, r_f] -> [..., M, r, r_f]."""
    out = np.zeros((*phi.shape[:-1], r, phi.shape[-1]), dtype=phi.dtype)
    m = phi.shape[-2]
    for i in range(1, min(r, m - 1) + 1):
        out[..., i:, i - 1, :] = phi[..., :-i, :]
    return out
