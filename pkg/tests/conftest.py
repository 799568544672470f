"""
Shared test configuration and fixtures for the TCP-SSM package.

This module provides:
- A per-test timeout with faulthandler diagnostics
- Isolation from TCP_* environment variables and stray .env files
- Seeded random streams and small operator factories
- Helpers that build operators with hand-picked poles
"""

import faulthandler
import math
import os
import signal
import sys
import threading
from collections.abc import Callable, Generator, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from tcp_ssm.models import (
    ModulationHeads,
    ModulationMode,
    NumeratorParams,
    OperatorParams,
    PoleBankConfig,
    PoleBankParams,
)
from tcp_ssm.params import random_operator_params, zero_heads
from tcp_ssm.tensor_io import Rng, uniform

# Enable faulthandler for debugging hanging tests
faulthandler.enable(file=sys.stderr)


def _get_timeout_seconds() -> int:
    """Get timeout configuration from environment variables."""
    try:
        return int(
            os.getenv(
                "PYTEST_PER_TEST_TIMEOUT",
                os.getenv("PYTEST_TIMEOUT", "120"),
            )
        )
    except ValueError:
        return 120


@pytest.fixture(autouse=True)
def per_test_timeout(request: pytest.FixtureRequest) -> Generator[None, None, None]:
    """
    Enforce a per-test timeout without external plugins.

    Uses SIGALRM on Unix main thread to fail fast after N seconds.
    Configure via PYTEST_PER_TEST_TIMEOUT environment variable.
    """
    timeout = _get_timeout_seconds()
    if request.node.get_closest_marker("slow") is not None:
        timeout *= 10
    if timeout <= 0:
        yield
        return

    if request.config.pluginmanager.hasplugin("timeout"):
        # Plugin handles timeout, we just provide diagnostics
        faulthandler.dump_traceback_later(timeout, repeat=False)
        try:
            yield
        finally:
            faulthandler.cancel_dump_traceback_later()
        return

    use_alarm = hasattr(signal, "SIGALRM") and (
        threading.current_thread() is threading.main_thread()
    )
    if not use_alarm:
        faulthandler.dump_traceback_later(timeout, repeat=False)
        try:
            yield
        finally:
            faulthandler.cancel_dump_traceback_later()
        return

    def _on_timeout(signum: int, frame: Any) -> None:  # noqa: ARG001
        faulthandler.dump_traceback(file=sys.stderr)
        pytest.fail(f"Test timed out after {timeout}s", pytrace=False)

    old_handler = signal.getsignal(signal.SIGALRM)
    signal.signal(signal.SIGALRM, _on_timeout)
    signal.setitimer(signal.ITIMER_REAL, float(timeout))
    try:
        yield
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, old_handler)


@pytest.fixture(autouse=True)
def clean_tcp_env(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    """Drop TCP_* variables and run from an empty directory (no .env)."""
    for key in list(os.environ):
        if key.startswith("TCP_"):
            monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)


# Core Test Fixtures


@pytest.fixture
def rng() -> Rng:
    return Rng(1234)


@pytest.fixture
def small_cfg() -> PoleBankConfig:
    """Two groups with one real pole and one complex pair each (r = 3)."""
    return PoleBankConfig(G=2, L=1, K=1)


OperatorFactory = Callable[..., OperatorParams]


@pytest.fixture
def make_operator(rng: Rng) -> OperatorFactory:
    """Factory for fully random operators with every parameter drawn."""

    def _make(
        E: int = 8,
        G: int = 2,
        L: int = 1,
        K: int = 1,
        r_f: int = 2,
        mode: ModulationMode = "shared",
        scale: float = 1.0,
        key: int = 0,
    ) -> OperatorParams:
        cfg = PoleBankConfig(G=G, L=L, K=K)
        return random_operator_params(E, cfg, r_f, rng.split(key), mode=mode, scale=scale)

    return _make


@pytest.fixture
def make_tokens(rng: Rng) -> Callable[..., np.ndarray]:
    """Factory for tokens uniform in [-1, 1) with shape [B, M, E]."""

    def _make(B: int, M: int, E: int, key: int = 100) -> np.ndarray:
        return 2.0 * uniform(rng.split(key), (B, M, E)) - 1.0

    return _make


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def pole_params(
    real: Sequence[float] = (),
    complex_pairs: Sequence[tuple[float, float]] = (),
    groups: int = 1,
    epsilon: float = 0.01,
) -> tuple[PoleBankConfig, PoleBankParams]:
    """Unconstrained variables that map onto the given poles in every group.

    Real poles use magnitude 0.9 scaled by a sign factor in (-1, 1), so any
    ``|a| < 0.9`` is reachable.
    """
    cap = 1.0 - epsilon
    rho_hat_r, s_hat = [], []
    for a in real:
        mag = 0.9
        rho_hat_r.append(_logit(mag / cap))
        s_hat.append(math.atanh(a / mag))
    rho_hat_c = [_logit(rho / cap) for rho, _ in complex_pairs]
    theta_hat = [_logit(theta / math.pi) for _, theta in complex_pairs]
    cfg = PoleBankConfig(G=groups, L=len(real), K=len(complex_pairs), epsilon=epsilon)

    def rows(v: list[float], n: int) -> np.ndarray:
        return np.tile(np.asarray(v, dtype=np.float64).reshape(1, n), (groups, 1))

    pole = PoleBankParams(
        rho_hat_c=rows(rho_hat_c, cfg.K),
        theta_hat=rows(theta_hat, cfg.K),
        rho_hat_r=rows(rho_hat_r, cfg.L),
        s_hat=rows(s_hat, cfg.L),
    )
    return cfg, pole


def operator_with_poles(
    real: Sequence[float] = (),
    complex_pairs: Sequence[tuple[float, float]] = (),
    E: int = 1,
    groups: int = 1,
    D: float = 0.0,
    heads: ModulationHeads | None = None,
) -> OperatorParams:
    """Operator with fixed base poles, a silent numerator and constant ``D``."""
    cfg, pole = pole_params(real, complex_pairs, groups)
    r_f = 1
    return OperatorParams(
        E=E,
        pole_cfg=cfg,
        pole=pole,
        heads=heads if heads is not None else zero_heads(E),
        num=NumeratorParams(
            V=np.zeros((E, r_f)),
            U=np.zeros((E, r_f)),
            W_alpha=np.zeros((cfg.r, E)),
            W_gamma=np.zeros((r_f, E)),
            r_f=r_f,
        ),
        D=np.full(E, D),
    )


def impulse(M: int, E: int = 1) -> np.ndarray:
    x = np.zeros((1, M, E))
    x[0, 0, :] = 1.0
    return x
