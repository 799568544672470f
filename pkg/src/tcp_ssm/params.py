"""Operator initialisation and parameter files.

A parameter file is UTF-8 JSON holding either a single operator object::

    {"config": {...}, "pole": {...}, "heads": {...}, "numerator": {...}, "D": [...]}

or a stack of them, ``{"layers": [<operator>, ...]}``, from which one layer is
selected by index.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, IndexOutOfRange, IoFailure
from .models import (
    ModulationHeads,
    ModulationMode,
    NumeratorParams,
    OperatorParams,
    PoleBankConfig,
)
from .pole_bank import init_pole_params
from .tensor_io import Rng, randn

logger = logging.getLogger(__name__)


def zero_heads(
    E: int,
    C: int = 1,
    mode: ModulationMode = "shared",
    delta_min: float = 0.1,
    lambda_theta: float = 0.5,
    clamp_radius: bool = True,
) -> ModulationHeads:
    """Heads whose scales are exactly one for every token."""
    return ModulationHeads(
        W_rho=np.zeros((C, E)),
        b_rho=np.zeros(C),
        W_theta=np.zeros((C, E)),
        b_theta=np.zeros(C),
        delta_min=delta_min,
        delta_0=delta_min + math.log(2.0),
        lambda_theta=lambda_theta,
        mode=mode,
        clamp_radius=clamp_radius,
    )


def init_operator_params(
    E: int,
    cfg: PoleBankConfig,
    r_f: int,
    rng: Rng,
    mode: ModulationMode = "shared",
    delta_min: float = 0.1,
    lambda_theta: float = 0.5,
    clamp_radius: bool = True,
) -> OperatorParams:
    """Documented initialisation used by ``gen-params``.

    The pole bank gets its deterministic timescale spread, modulation heads and
    the mixing/gate weights start at zero, ``U``/``V`` are ``N(0, 1/E)`` and
    ``D`` is one, so the operator starts as the identity map.
    """
    C = cfg.G if mode == "group_specific" else 1
    return OperatorParams(
        E=E,
        pole_cfg=cfg,
        pole=init_pole_params(cfg),
        heads=zero_heads(E, C, mode, delta_min, lambda_theta, clamp_radius),
        num=NumeratorParams(
            V=randn(rng.split(0), (E, r_f)) / math.sqrt(E),
            U=randn(rng.split(1), (E, r_f)) / math.sqrt(E),
            W_alpha=np.zeros((cfg.r, E)),
            W_gamma=np.zeros((r_f, E)),
            r_f=r_f,
        ),
        D=np.ones(E),
    )


def random_operator_params(
    E: int,
    cfg: PoleBankConfig,
    r_f: int,
    rng: Rng,
    mode: ModulationMode = "shared",
    scale: float = 1.0,
) -> OperatorParams:
    """Fully random operator for property tests and the verification suite.

    Every trainable is drawn, including the heads, so all code paths carry
    nonzero signal. ``scale`` widens the unconstrained pole draws.
    """
    C = cfg.G if mode == "group_specific" else 1
    G, L, K = cfg.G, cfg.L, cfg.K
    s = 1.0 / math.sqrt(E)

    def draw(key: int, shape: tuple[int, ...], std: float) -> np.ndarray:
        return std * randn(rng.split(key), shape)

    return OperatorParams(
        E=E,
        pole_cfg=cfg,
        pole={
            "rho_hat_c": draw(0, (G, K), scale),
            "theta_hat": draw(1, (G, K), scale),
            "rho_hat_r": draw(2, (G, L), scale),
            "s_hat": draw(3, (G, L), scale),
        },
        heads=ModulationHeads(
            W_rho=draw(4, (C, E), 0.5 * s),
            b_rho=draw(5, (C,), 0.5),
            W_theta=draw(6, (C, E), 0.5 * s),
            b_theta=draw(7, (C,), 0.5),
            mode=mode,
        ),
        num=NumeratorParams(
            V=draw(8, (E, r_f), s),
            U=draw(9, (E, r_f), s),
            W_alpha=draw(10, (cfg.r, E), 0.5 * s),
            W_gamma=draw(11, (r_f, E), s),
            r_f=r_f,
        ),
        D=draw(12, (E,), 1.0),
    )


def _read_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot read parameter file {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Parameter file {path} is not valid JSON: {e}") from e


def load_operator_stack(path: str | Path) -> list[OperatorParams]:
    """Load every operator held by a parameter file.

    Raises:
        IoFailure: If the file cannot be read
        ConfigError: If the content is not a valid operator or layer stack
    """
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"Parameter file {path} must hold a JSON object")
    layers = doc["layers"] if "layers" in doc else [doc]
    if not isinstance(layers, list) or not layers:
        raise ConfigError(f"Parameter file {path} has no layers")
    stack = [OperatorParams.from_document(layer) for layer in layers]
    logger.debug("Loaded parameters", extra={"path": str(path), "layers": len(stack)})
    return stack


def load_operator_params(path: str | Path, layer: int | None = None) -> OperatorParams:
    """Load one operator, selecting ``layer`` from a stacked file.

    Raises:
        IndexOutOfRange: If ``layer`` does not exist in the file
    """
    stack = load_operator_stack(path)
    idx = 0 if layer is None else layer
    if not 0 <= idx < len(stack):
        raise IndexOutOfRange(f"Layer {idx} outside 0..{len(stack) - 1}")
    return stack[idx]


def save_operator_params(
    path: str | Path, params: OperatorParams | Sequence[OperatorParams]
) -> None:
    """Write one operator, or a ``{"layers": [...]}`` stack, as JSON."""
    if isinstance(params, OperatorParams):
        doc: dict[str, Any] = params.to_document()
    else:
        doc = {"layers": [p.to_document() for p in params]}
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot write parameter file {path}: {e}") from e
