"""Tests for token-conditioned pole modulation."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import OperatorFactory, pole_params
from tcp_ssm.denominator import expand_token_denominators
from tcp_ssm.errors import ShapeMismatch
from tcp_ssm.models import ModulationHeads
from tcp_ssm.modulation import (
    TokenScales,
    compute_scales,
    modulate,
    softplus,
    token_poles,
)
from tcp_ssm.params import zero_heads
from tcp_ssm.pole_bank import base_denominator, constrain, constrain_arrays
from tcp_ssm.tensor_io import Rng, randn


def heads_with_bias(b_rho: float, b_theta: float = 0.0, E: int = 2) -> ModulationHeads:
    return ModulationHeads(
        W_rho=np.zeros((1, E)),
        b_rho=[b_rho],
        W_theta=np.zeros((1, E)),
        b_theta=[b_theta],
    )


class TestScales:
    """Test the radius and angle scale heads."""

    def test_zero_heads_give_unit_scales(self) -> None:
        x = randn(Rng(0), (2, 5, 3))
        scales = compute_scales(x, zero_heads(3), G=4)
        assert scales.s_rho.shape == (2, 5, 4)
        np.testing.assert_allclose(scales.s_rho, 1.0, rtol=0, atol=1e-15)
        np.testing.assert_array_equal(scales.s_theta, 1.0)

    def test_large_preactivation(self) -> None:
        heads = heads_with_bias(20.0)
        s = compute_scales(np.zeros((1, 2)), heads, G=1).s_rho
        expected = (0.1 + 20.0 + math.log1p(math.exp(-20.0))) / (0.1 + math.log(2.0))
        assert s[0, 0] == pytest.approx(expected, rel=1e-14)

    def test_softplus_is_stable(self) -> None:
        out = softplus(np.array([-800.0, 0.0, 800.0]))
        assert np.all(np.isfinite(out))
        assert out[1] == pytest.approx(math.log(2.0))
        assert out[2] == pytest.approx(800.0)

    def test_angle_scale_bounded(self) -> None:
        s = compute_scales(np.zeros((1, 2)), heads_with_bias(0.0, b_theta=50.0), G=1).s_theta
        assert s[0, 0] == pytest.approx(1.5)

    def test_fixed_mode_ignores_heads(self) -> None:
        heads = heads_with_bias(5.0).model_copy(update={"mode": "fixed"})
        scales = compute_scales(np.ones((3, 2)), heads, G=2)
        np.testing.assert_array_equal(scales.s_rho, 1.0)
        np.testing.assert_array_equal(scales.s_theta, 1.0)

    def test_group_specific_rows_per_group(self) -> None:
        heads = ModulationHeads(
            W_rho=np.zeros((2, 1)),
            b_rho=[0.0, 3.0],
            W_theta=np.zeros((2, 1)),
            b_theta=[0.0, 0.0],
            mode="group_specific",
        )
        s = compute_scales(np.zeros((1, 1)), heads, G=2).s_rho
        assert s[0, 0] == pytest.approx(1.0)
        assert s[0, 1] > 1.0

    def test_group_specific_needs_G_rows(self) -> None:
        heads = ModulationHeads(
            W_rho=np.zeros((2, 1)),
            b_rho=[0.0, 0.0],
            W_theta=np.zeros((2, 1)),
            b_theta=[0.0, 0.0],
            mode="group_specific",
        )
        with pytest.raises(ShapeMismatch):
            compute_scales(np.zeros((1, 1)), heads, G=3)

    def test_width_mismatch(self) -> None:
        with pytest.raises(ShapeMismatch):
            compute_scales(np.zeros((1, 5)), zero_heads(3), G=1)


class TestModulate:
    """Test applying scales to the base poles."""

    def test_unit_scales_recover_base(self) -> None:
        cfg, pole = pole_params(real=[0.5, -0.3], complex_pairs=[(0.9, 1.0)], groups=2)
        bank = constrain(pole, cfg)
        ones = np.ones((4, 2))
        poles = modulate(bank, TokenScales(s_rho=ones, s_theta=ones))
        np.testing.assert_allclose(poles.a_t, np.broadcast_to(bank.a, (4, 2, 2)), rtol=1e-15)
        np.testing.assert_allclose(poles.rho_t, np.broadcast_to(bank.rho_c, (4, 2, 1)), rtol=1e-15)
        np.testing.assert_array_equal(poles.theta_t, np.broadcast_to(bank.theta_c, (4, 2, 1)))

    def test_radius_scale_squares_and_keeps_sign(self) -> None:
        cap = 0.99
        bank = constrain_arrays(
            np.zeros((1, 0)),
            np.zeros((1, 0)),
            np.full((1, 1), math.log((0.9 / cap) / (1 - 0.9 / cap))),
            np.full((1, 1), -40.0),
            0.01,
        )
        scales = TokenScales(s_rho=np.full((1, 1), 2.0), s_theta=np.ones((1, 1)))
        a_t = modulate(bank, scales).a_t
        assert a_t[0, 0, 0] == pytest.approx(-0.81, rel=1e-12)

    def test_angle_clip_at_pi(self) -> None:
        cfg, pole = pole_params(complex_pairs=[(0.5, 3 * math.pi / 4)])
        bank = constrain(pole, cfg)
        scales = TokenScales(s_rho=np.ones((1, 1)), s_theta=np.full((1, 1), 1.5))
        assert modulate(bank, scales).theta_t[0, 0, 0] == math.pi

    def test_clamp_caps_radius(self) -> None:
        cfg, pole = pole_params(complex_pairs=[(0.985, 1.0)])
        bank = constrain(pole, cfg)
        scales = TokenScales(s_rho=np.full((1, 1), 0.1), s_theta=np.ones((1, 1)))
        assert modulate(bank, scales, clamp=True).rho_t[0, 0, 0] == pytest.approx(0.99)
        unclamped = modulate(bank, scales, clamp=False).rho_t[0, 0, 0]
        assert 0.99 < unclamped < 1.0
        assert unclamped == pytest.approx(0.985**0.1)

    def test_group_count_mismatch(self) -> None:
        cfg, pole = pole_params(real=[0.5], groups=2)
        with pytest.raises(ShapeMismatch):
            modulate(constrain(pole, cfg), TokenScales(np.ones((1, 3)), np.ones((1, 3))))

    @settings(max_examples=100, deadline=None)
    @given(base=st.floats(0.05, 0.95), s1=st.floats(0.05, 10.0), s2=st.floats(0.05, 10.0))
    def test_radius_strictly_decreasing_in_scale(self, base: float, s1: float, s2: float) -> None:
        assume(abs(s1 - s2) >= 1e-6)
        cfg, pole = pole_params(complex_pairs=[(base, 1.0)])
        bank = constrain(pole, cfg)
        lo, hi = min(s1, s2), max(s1, s2)
        scales = TokenScales(s_rho=np.array([[lo], [hi]]), s_theta=np.ones((2, 1)))
        rho = modulate(bank, scales, clamp=False).rho_t[:, 0, 0]
        assert rho[1] < rho[0]

    def test_stability_preserved_over_random_draws(self) -> None:
        rng = Rng(9)
        draws = 2000
        bank = constrain_arrays(
            4 * randn(rng.split(0), (draws, 3, 2)),
            4 * randn(rng.split(1), (draws, 3, 2)),
            4 * randn(rng.split(2), (draws, 3, 1)),
            4 * randn(rng.split(3), (draws, 3, 1)),
            0.01,
        )
        s_rho = (0.1 + softplus(4 * randn(rng.split(4), (draws, 3)))) / (0.1 + math.log(2))
        s_theta = 1 + 0.5 * np.tanh(4 * randn(rng.split(5), (draws, 3)))
        poles = modulate(bank, TokenScales(s_rho=s_rho, s_theta=s_theta))
        assert np.all(np.abs(poles.a_t) <= 0.99)
        assert np.all(poles.rho_t <= 0.99)
        assert np.all((poles.theta_t >= 0) & (poles.theta_t <= math.pi))
        # signs of real poles never flip
        assert np.all(np.sign(poles.a_t) == np.sign(bank.a))


class TestTokenPoles:
    def test_zero_heads_recover_base_denominator(self, make_operator: OperatorFactory) -> None:
        p = make_operator(E=8, G=2, L=2, K=1, scale=2.0)
        p = p.replace(heads=zero_heads(8))
        x = randn(Rng(3), (2, 6, 8))
        _, poles = token_poles(x, p)
        q = expand_token_denominators(poles).q
        bank = constrain(p.pole, p.pole_cfg)
        for g in range(p.G):
            base = base_denominator(bank, g)[1:]
            expected = np.broadcast_to(base, q.shape[:2] + base.shape)
            np.testing.assert_allclose(q[..., g, :], expected, rtol=1e-12, atol=1e-13)
