"""Tests for denominator expansion and the root oracle."""

import itertools
import math

import numpy as np
import pytest

from tcp_ssm.denominator import (
    DenominatorCoeffs,
    batched_roots,
    companion_stack,
    dominant_modulus,
    expand_factors,
    expand_stacked,
    expand_token_denominators,
    roots,
)
from tcp_ssm.errors import ConfigError, EmptyFactorList, ShapeMismatch
from tcp_ssm.modulation import ModulatedPoles
from tcp_ssm.tensor_io import Rng, randn, uniform


class TestExpandFactors:
    """Test multiplying factors into monic coefficients."""

    def test_repeated_real_factor(self) -> None:
        np.testing.assert_allclose(expand_factors([[1, -0.5], [1, -0.5]]), [1, -1, 0.25])

    def test_single_factor_identity(self) -> None:
        np.testing.assert_array_equal(expand_factors([[1, 0, 0.25]]), [1, 0, 0.25])

    def test_mixed_orders(self) -> None:
        out = expand_factors([[1, -0.5], [1, -0.9, 0.81]])
        np.testing.assert_allclose(out, [1, -1.4, 1.26, -0.405], rtol=1e-14)
        np.testing.assert_allclose(out, np.convolve([1, -0.5], [1, -0.9, 0.81]), rtol=1e-14)

    def test_order_invariant(self) -> None:
        factors = [[1, -0.3], [1, 0.2, 0.5], [1, -1.1, 0.64], [1, 0.7]]
        reference = expand_factors(factors)
        for perm in itertools.permutations(factors):
            np.testing.assert_allclose(expand_factors(list(perm)), reference, rtol=1e-12, atol=1e-15)

    def test_degree_is_additive(self) -> None:
        out = expand_factors([[1, 0.1], [1, 0.2, 0.3], [1, 0.4, 0.5]])
        assert out.size - 1 == 5

    def test_empty(self) -> None:
        with pytest.raises(EmptyFactorList):
            expand_factors([])

    @pytest.mark.parametrize("bad", [[2.0, 1.0], [1.0], [1.0, 2.0, 3.0, 4.0]])
    def test_malformed_factor(self, bad: list[float]) -> None:
        with pytest.raises(ShapeMismatch):
            expand_factors([bad])

    def test_order_limit(self) -> None:
        with pytest.raises(ConfigError, match="exceeds"):
            expand_factors([[1, -0.1]] * 17)


class TestExpandStacked:
    def test_matches_factor_product(self) -> None:
        rng = Rng(11)
        c1 = randn(rng.split(0), (5, 4))
        c2 = randn(rng.split(1), (5, 4))
        c2[:, 0] = 0.0  # one first-order factor per row
        moduli = uniform(rng.split(2), (5, 4))
        out = expand_stacked(c1, c2, moduli, r=7)
        for b in range(5):
            factors = [[1.0, c1[b, 0]]] + [[1.0, c1[b, j], c2[b, j]] for j in range(1, 4)]
            np.testing.assert_allclose(out[b], expand_factors(factors), rtol=1e-10, atol=1e-12)


class TestTokenDenominators:
    def test_first_order(self) -> None:
        poles = ModulatedPoles(
            a_t=np.full((1, 1, 1, 1), 0.5),
            rho_t=np.zeros((1, 1, 1, 0)),
            theta_t=np.zeros((1, 1, 1, 0)),
        )
        coeffs = expand_token_denominators(poles)
        assert coeffs.r == 1
        np.testing.assert_allclose(coeffs.q[0, 0, 0], [-0.5])
        np.testing.assert_allclose(coeffs.monic()[0, 0, 0], [1.0, -0.5])

    def test_roots_reproduce_poles(self) -> None:
        rng = Rng(5)
        a = 1.8 * uniform(rng.split(0), (20, 2)) - 0.9
        rho = 0.2 + 0.7 * uniform(rng.split(1), (20, 2))
        theta = 0.1 + 2.9 * uniform(rng.split(2), (20, 2))
        poles = ModulatedPoles(a_t=a[:, None, None], rho_t=rho[:, None, None], theta_t=theta[:, None, None])
        q = expand_token_denominators(poles).q[:, 0, 0]
        z = batched_roots(q)
        for i in range(20):
            expected = np.concatenate([a[i], rho[i] * np.exp(1j * theta[i]), rho[i] * np.exp(-1j * theta[i])])
            gaps = np.abs(z[i][:, None] - expected[None, :]).min(axis=0)
            assert gaps.max() < 1e-5

    def test_data_class_is_frozen(self) -> None:
        coeffs = DenominatorCoeffs(q=np.zeros((1, 1, 1, 2)))
        with pytest.raises(AttributeError):
            coeffs.q = np.ones(1)  # type: ignore[misc]


class TestRoots:
    """Test the companion-matrix root oracle."""

    def test_double_root(self) -> None:
        z = roots([1, -1, 0.25])
        np.testing.assert_allclose(z, [0.5, 0.5], atol=1e-7)

    def test_imaginary_pair(self) -> None:
        z = np.sort_complex(roots([1, 0, 0.25]))
        np.testing.assert_allclose(z, [-0.5j, 0.5j], atol=1e-12)

    def test_rejects_non_monic(self) -> None:
        with pytest.raises(ShapeMismatch):
            roots([2, 1])
        with pytest.raises(ShapeMismatch):
            roots([1])

    def test_residual_bound(self) -> None:
        c = expand_factors([[1, -0.95], [1, 1.2, 0.81], [1, -0.4, 0.9]])
        z = roots(c)
        scale = 1 + np.sum(np.abs(c[1:]))
        assert np.max(np.abs(np.polyval(c, z))) <= 1e-8 * scale

    def test_companion_stack_eigenvalues(self) -> None:
        q = np.array([[-1.4, 1.26, -0.405]])
        mats = companion_stack(q)
        assert mats.shape == (1, 3, 3)
        np.testing.assert_allclose(np.sort(np.abs(np.linalg.eigvals(mats[0]))), [0.5, 0.9, 0.9], atol=1e-9)


def _coeffs(z: np.ndarray) -> np.ndarray:
    """Monic coefficients after the leading 1 of conjugate-closed root rows."""
    return np.stack([np.poly(row)[1:].real for row in np.atleast_2d(z)])


class TestDominantModulus:
    def test_distinct_roots(self) -> None:
        z = np.array([[0.5 + 0j, -0.9 + 0j, 0.3j, -0.3j]])
        assert dominant_modulus(z, _coeffs(z))[0] == pytest.approx(0.9)

    def test_computed_repeated_root_measured_at_centroid(self) -> None:
        """Eigenvalue scatter of a clamped 4-fold pole does not read as instability."""
        q = expand_factors([[1.0, 0.99]] * 4)[1:]
        z = roots(np.concatenate([[1.0], q]))
        assert dominant_modulus(z[None, :], q[None, :])[0] == pytest.approx(0.99, abs=1e-10)

    def test_close_distinct_roots_are_not_merged(self) -> None:
        q = expand_factors([[1.0, -0.994], [1.0, -0.985]])[1:]
        z = roots(np.concatenate([[1.0], q]))
        assert dominant_modulus(z[None, :], q[None, :])[0] == pytest.approx(0.994, abs=1e-12)

    def test_synthetic_scatter_far_above_rounding_is_kept(self) -> None:
        center = -0.99
        z = (center + 6e-3 * np.exp(1j * (np.pi / 4 + np.arange(4) * np.pi / 2)))[None, :]
        assert dominant_modulus(z, _coeffs(z))[0] == pytest.approx(np.abs(z).max())

    def test_conjugate_pair_kept_apart_at_large_angle(self) -> None:
        z = np.array([[0.9j, -0.9j, 0.1 + 0j]])
        assert dominant_modulus(z, _coeffs(z))[0] == pytest.approx(0.9)

    def test_batched_rows_independent(self) -> None:
        z = np.array([[0.5 + 0j, 0.2 + 0j], [0.1 + 0j, -0.95 + 0j]])
        np.testing.assert_allclose(dominant_modulus(z, _coeffs(z)), [0.5, 0.95])

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ShapeMismatch):
            dominant_modulus(np.zeros((1, 3), dtype=complex), np.zeros((1, 2)))


@pytest.mark.slow
def test_random_stable_banks_roots_within_margin() -> None:
    rng = Rng(21)
    eps = 0.01
    for i in range(1000):
        r = rng.split(i)
        a = (1 - eps) * np.tanh(3 * randn(r.split(0), (2,)))
        rho = (1 - eps) / (1 + np.exp(-3 * randn(r.split(1), (2,))))
        theta = math.pi / (1 + np.exp(-3 * randn(r.split(2), (2,))))
        factors = [[1.0, -v] for v in a] + [
            [1.0, -2 * p * math.cos(t), p * p] for p, t in zip(rho, theta, strict=True)
        ]
        c = expand_factors(factors)
        assert dominant_modulus(roots(c)[None, :], c[None, 1:])[0] <= 1 - eps + 1e-9
