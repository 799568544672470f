"""Expansion of factored denominators into monic coefficients.

A denominator ``Q(z^-1) = 1 + sum_i q_i z^-i`` is stored as the coefficient
array ``[1, q_1, ..., q_r]``. Read as a polynomial in ``z`` (highest power
first) the same array has exactly the poles of the filter as roots, which is
what :func:`roots` computes.

Expansion always runs in float64, multiplying factors in ascending order of
root modulus.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import companion

from .errors import ConfigError, EmptyFactorList, RootFindingDiverged, ShapeMismatch
from .models import MAX_ORDER

if TYPE_CHECKING:
    from .modulation import ModulatedPoles

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
ComplexArray = NDArray[np.complex128]

_DK_MAX_ITER = 500
_EPS = float(np.finfo(np.float64).eps)
# Slack on the rounding-level test for merging computed roots.
SCATTER_GAIN = 1e4


@dataclass(frozen=True)
class DenominatorCoeffs:
    """Expanded token-conditioned coefficients q [B, M, G, r] (leading 1 implicit)."""

    q: FloatArray

    @property
    def r(self) -> int:
        return int(self.q.shape[-1])

    def monic(self) -> FloatArray:
        """Coefficients with the leading 1 restored, [..., r + 1]."""
        ones = np.ones((*self.q.shape[:-1], 1))
        return np.concatenate([ones, self.q], axis=-1)


def _factor_modulus(f: FloatArray) -> float:
    return float(abs(f[1]) if f.size == 2 else np.sqrt(abs(f[2])))


def expand_factors(factors: Sequence[ArrayLike]) -> FloatArray:
    """Multiply first/second-order factors into one monic coefficient array.

    Raises:
        EmptyFactorList: If ``factors`` is empty
        ShapeMismatch: If a factor is not ``[1, c1]`` or ``[1, c1, c2]``
        ConfigError: If the total degree exceeds the supported maximum
    """
    if not factors:
        raise EmptyFactorList("Cannot expand an empty factor list")
    arrays = [np.asarray(f, dtype=np.float64) for f in factors]
    for f in arrays:
        if f.ndim != 1 or f.size not in (2, 3) or f[0] != 1.0:
            raise ShapeMismatch(f"Factor must be [1, c1] or [1, c1, c2], got {f}")
    degree = sum(f.size - 1 for f in arrays)
    if degree > MAX_ORDER:
        raise ConfigError(f"Order {degree} exceeds the supported maximum {MAX_ORDER}")

    out = np.ones(1)
    for f in sorted(arrays, key=_factor_modulus):
        out = np.convolve(out, f)
    out[0] = 1.0
    return out


def expand_stacked(c1: FloatArray, c2: FloatArray, moduli: FloatArray, r: int) -> FloatArray:
    """Vectorised product of factors ``[1, c1, c2]`` along the last axis.

    First-order factors are passed with ``c2 == 0``; their padding only adds
    exact zeros past degree ``r``, which are dropped.

    Returns:
        ``[..., r + 1]`` monic coefficients
    """
    order = np.argsort(moduli, axis=-1, kind="stable")
    c1 = np.take_along_axis(c1, order, axis=-1)
    c2 = np.take_along_axis(c2, order, axis=-1)
    n = c1.shape[-1]
    out = np.zeros((*c1.shape[:-1], 2 * n + 1))
    out[..., 0] = 1.0
    for j in range(n):
        prev = out.copy()
        out[..., 1:] += c1[..., j, None] * prev[..., :-1]
        out[..., 2:] += c2[..., j, None] * prev[..., :-2]
    return out[..., : r + 1]


def expand_token_denominators(poles: ModulatedPoles) -> DenominatorCoeffs:
    """Expand every token's grouped denominator into coefficients q."""
    a_t = poles.a_t
    rho_t = poles.rho_t
    theta_t = poles.theta_t
    r = a_t.shape[-1] + 2 * rho_t.shape[-1]
    if r > MAX_ORDER:
        raise ConfigError(f"Order {r} exceeds the supported maximum {MAX_ORDER}")
    c1 = np.concatenate([-a_t, -2.0 * rho_t * np.cos(theta_t)], axis=-1)
    c2 = np.concatenate([np.zeros_like(a_t), rho_t * rho_t], axis=-1)
    moduli = np.concatenate([np.abs(a_t), rho_t], axis=-1)
    coeffs = expand_stacked(
        c1.astype(np.float64), c2.astype(np.float64), moduli.astype(np.float64), r
    )
    return DenominatorCoeffs(q=coeffs[..., 1:])


def _residual_ok(coeffs: FloatArray, z: ComplexArray) -> bool:
    if not np.all(np.isfinite(z)):
        return False
    scale = 1.0 + float(np.sum(np.abs(coeffs[1:])))
    return bool(np.max(np.abs(np.polyval(coeffs, z))) <= 1e-8 * scale)


def _durand_kerner(coeffs: FloatArray) -> ComplexArray:
    n = coeffs.size - 1
    z = (0.4 + 0.9j) ** np.arange(n)
    for _ in range(_DK_MAX_ITER):
        diffs = z[:, None] - z[None, :]
        np.fill_diagonal(diffs, 1.0)
        step = np.polyval(coeffs, z) / np.prod(diffs, axis=1)
        z = z - step
        if np.max(np.abs(step)) < 1e-15:
            break
    return z


def roots(coeffs: ArrayLike) -> ComplexArray:
    """All roots of a monic denominator ``[1, q_1, ..., q_r]``.

    Companion-matrix eigenvalues (LAPACK QR iteration) with a Durand-Kerner
    fallback; every returned root satisfies
    ``|Q(root)| <= 1e-8 * (1 + sum |q_i|)``.

    Raises:
        ShapeMismatch: If the array is not monic of degree >= 1
        RootFindingDiverged: If neither method meets the residual bound
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 1 or c.size < 2 or c[0] != 1.0:
        raise ShapeMismatch(f"Expected monic coefficients of degree >= 1, got {c}")
    z = np.linalg.eigvals(companion(c)).astype(np.complex128)
    if _residual_ok(c, z):
        return z
    logger.debug("Companion eigenvalues missed the residual bound; trying Durand-Kerner")
    z = _durand_kerner(c)
    if _residual_ok(c, z):
        return z
    raise RootFindingDiverged(f"Root finding did not converge for {c.tolist()}")


def companion_stack(q: FloatArray) -> FloatArray:
    """Companion matrices for stacked coefficients q [..., r] -> [..., r, r]."""
    r = q.shape[-1]
    mats = np.zeros((*q.shape[:-1], r, r))
    mats[..., 0, :] = -q
    idx = np.arange(1, r)
    mats[..., idx, idx - 1] = 1.0
    return mats


def batched_roots(q: FloatArray) -> ComplexArray:
    """Roots of many denominators q [..., r] at once (companion eigenvalues)."""
    return np.linalg.eigvals(companion_stack(np.asarray(q, dtype=np.float64)))


def dominant_modulus(z: ArrayLike, q: ArrayLike) -> FloatArray:
    """Largest root modulus per row of ``z`` [..., r], roots of ``q`` [..., r].

    Computed roots of an m-fold root scatter around it by about
    ``(u * N / g) ** (1 / m)`` while their centroid stays accurate to rounding
    (``N`` is the coefficient scale at the root, ``g`` the product of distances
    to the remaining roots). Each root is measured at the centroid of the
    largest set of its nearest neighbours whose elementary symmetric
    functions about that centroid are at rounding level, i.e. which is
    numerically indistinguishable from one multiple root. Well-separated roots
    are never merged.

    Raises:
        ShapeMismatch: If ``z`` and ``q`` disagree in shape
    """
    z = np.asarray(z, dtype=np.complex128)
    q = np.asarray(q, dtype=np.float64)
    if z.shape != q.shape:
        raise ShapeMismatch(f"Roots {z.shape} and coefficients {q.shape} disagree")
    r = z.shape[-1]
    mags = np.abs(np.concatenate([np.ones((*q.shape[:-1], 1)), q], axis=-1))
    powers = np.arange(r, -1, -1)
    zj = z[..., None, :]
    order = np.argsort(np.abs(z[..., :, None] - zj), axis=-1, kind="stable")
    member = np.zeros((*z.shape, r), dtype=bool)
    best = np.abs(z)
    for m in range(1, r + 1):
        np.put_along_axis(member, order[..., m - 1 : m], True, axis=-1)
        if m == 1:
            continue
        c = np.where(member, zj, 0.0).sum(axis=-1) / m
        d = c[..., None] - zj
        g = np.prod(np.where(member, 1.0, np.abs(d)), axis=-1)
        e = np.zeros((*c.shape, m + 1), dtype=np.complex128)
        e[..., 0] = 1.0
        for j in range(r):
            dj = np.where(member[..., j], d[..., j], 0.0)[..., None]
            e[..., 1:] = e[..., 1:] + dj * e[..., :-1]
        n = np.sum(mags[..., None, :] * np.abs(c)[..., None] ** powers, axis=-1)
        limit = SCATTER_GAIN * r * _EPS * n
        merged = np.all(np.abs(e[..., 2:]) * g[..., None] <= limit[..., None], axis=-1)
        best = np.where(merged, np.abs(c), best)
    return np.asarray(best.max(axis=-1), dtype=np.float64)
