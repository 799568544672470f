"""Pydantic models for TCP-SSM parameters, routes and reports.

This module provides strongly-typed, validated data models for:
- The pole bank configuration and its unconstrained trainables
- Token-modulation heads and the low-rank numerator
- The full operator parameter set and its JSON parameter-file layout
- Scan routes (token permutations)
- JSON reports emitted by the CLI

Array fields hold read-only float64 numpy arrays. They accept nested lists on
input and serialise back to nested lists, so a parameter file round-trips
through ``to_document``/``from_document``.
"""

from __future__ import annotations

import logging
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    ValidationError,
    field_validator,
    model_validator,
)

from .errors import ConfigError

logger = logging.getLogger(__name__)

MAX_ORDER = 16
PARAMS_SCHEMA = "tcp-params/1"
REPORT_SCHEMA = "tcp-report/1"

ModulationMode = Literal["shared", "group_specific", "fixed"]


def _as_float_array(v: Any) -> np.ndarray:
    arr = np.array(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("array values must be finite")
    arr.setflags(write=False)
    return arr


def _as_index_array(v: Any) -> np.ndarray:
    arr = np.array(v, dtype=np.int64)
    arr.setflags(write=False)
    return arr


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_float_array),
    PlainSerializer(lambda a: a.tolist(), return_type=list),
]
IndexArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_index_array),
    PlainSerializer(lambda a: a.tolist(), return_type=list),
]


class _ArrayModel(BaseModel):
    model_config = ConfigDict(
        extra="forbid",
        frozen=True,
        arbitrary_types_allowed=True,
    )


def _check_shape(name: str, arr: np.ndarray, expected: tuple[int, ...]) -> None:
    if arr.shape != expected:
        raise ValueError(f"{name} has shape {arr.shape}, expected {expected}")


class PoleBankConfig(_ArrayModel):
    """Structure of the grouped pole bank.

    Attributes:
        G: Number of channel groups sharing one denominator
        L: Real poles per group
        K: Complex-conjugate pairs per group
        epsilon: Stability margin, strictly inside (0, 1)
    """

    G: int = Field(ge=1)
    L: int = Field(ge=0)
    K: int = Field(ge=0)
    epsilon: float = Field(default=0.01, gt=0.0, lt=1.0)

    @property
    def r(self) -> int:
        """Denominator order L + 2K."""
        return self.L + 2 * self.K

    @model_validator(mode="after")
    def validate_order(self) -> PoleBankConfig:
        if self.r < 1:
            raise ValueError("pole bank needs L + 2K >= 1")
        if self.r > MAX_ORDER:
            raise ValueError(f"order r={self.r} exceeds the supported maximum {MAX_ORDER}")
        return self


class PoleBankParams(_ArrayModel):
    """Unconstrained trainable pole variables, one row per group."""

    rho_hat_c: FloatArray
    theta_hat: FloatArray
    rho_hat_r: FloatArray
    s_hat: FloatArray

    def check_against(self, cfg: PoleBankConfig) -> None:
        """Raise ValueError unless every array matches ``cfg``."""
        _check_shape("rho_hat_c", self.rho_hat_c, (cfg.G, cfg.K))
        _check_shape("theta_hat", self.theta_hat, (cfg.G, cfg.K))
        _check_shape("rho_hat_r", self.rho_hat_r, (cfg.G, cfg.L))
        _check_shape("s_hat", self.s_hat, (cfg.G, cfg.L))


class ModulationHeads(_ArrayModel):
    """Token-conditioned radius/angle scale heads.

    ``W_rho``/``W_theta`` are [C, E] and the biases [C], with C == 1 for the
    shared and fixed modes and C == G for group-specific modulation. In fixed
    mode the heads are ignored and every scale is exactly one.
    """

    W_rho: FloatArray
    b_rho: FloatArray
    W_theta: FloatArray
    b_theta: FloatArray
    delta_min: float = Field(default=0.1, ge=0.0)
    delta_0: float = Field(default=0.1 + float(np.log(2.0)), gt=0.0)
    lambda_theta: float = Field(default=0.5, ge=0.0, lt=1.0)
    mode: ModulationMode = "shared"
    clamp_radius: bool = True

    @property
    def C(self) -> int:
        return int(self.W_rho.shape[0])

    @model_validator(mode="after")
    def validate_head_shapes(self) -> ModulationHeads:
        if self.W_rho.ndim != 2:
            raise ValueError(f"W_rho must be 2-D, got shape {self.W_rho.shape}")
        c, e = self.W_rho.shape
        _check_shape("W_theta", self.W_theta, (c, e))
        _check_shape("b_rho", self.b_rho, (c,))
        _check_shape("b_theta", self.b_theta, (c,))
        if self.mode in ("shared", "fixed") and c != 1:
            raise ValueError(f"{self.mode} modulation needs C == 1, got C={c}")
        return self


class NumeratorParams(_ArrayModel):
    """Low-rank strictly causal numerator factors."""

    V: FloatArray
    U: FloatArray
    W_alpha: FloatArray
    W_gamma: FloatArray
    r_f: int = Field(ge=1)

    @model_validator(mode="after")
    def validate_factor_shapes(self) -> NumeratorParams:
        if self.V.ndim != 2:
            raise ValueError(f"V must be 2-D, got shape {self.V.shape}")
        e = self.V.shape[0]
        _check_shape("V", self.V, (e, self.r_f))
        _check_shape("U", self.U, (e, self.r_f))
        _check_shape("W_gamma", self.W_gamma, (self.r_f, e))
        if self.W_alpha.ndim != 2 or self.W_alpha.shape[1] != e:
            raise ValueError(f"W_alpha has shape {self.W_alpha.shape}, expected (r, {e})")
        if self.r_f > e:
            raise ValueError(f"r_f={self.r_f} exceeds the channel count E={e}")
        if self.r_f == e:
            logger.warning(
                "Numerator rank equals the channel count; low-rank premise violated",
                extra={"r_f": self.r_f, "E": e},
            )
        return self


class OperatorParams(_ArrayModel):
    """Complete TCP-SSM parameter set for one operator (one layer)."""

    E: int = Field(ge=1)
    pole_cfg: PoleBankConfig
    pole: PoleBankParams
    heads: ModulationHeads
    num: NumeratorParams
    D: FloatArray

    @property
    def G(self) -> int:
        return self.pole_cfg.G

    @property
    def r(self) -> int:
        return self.pole_cfg.r

    @property
    def group_width(self) -> int:
        """Channels per group, E / G."""
        return self.E // self.pole_cfg.G

    @model_validator(mode="after")
    def validate_consistency(self) -> OperatorParams:
        cfg = self.pole_cfg
        if self.E % cfg.G:
            raise ValueError(f"E={self.E} is not divisible by G={cfg.G}")
        self.pole.check_against(cfg)
        c = cfg.G if self.heads.mode == "group_specific" else 1
        _check_shape("W_rho", self.heads.W_rho, (c, self.E))
        _check_shape("V", self.num.V, (self.E, self.num.r_f))
        _check_shape("W_alpha", self.num.W_alpha, (cfg.r, self.E))
        _check_shape("D", self.D, (self.E,))
        return self

    def replace(self, **updates: Any) -> OperatorParams:
        """Return a validated copy with top-level fields replaced."""
        data = {name: getattr(self, name) for name in type(self).model_fields}
        data.update(updates)
        return type(self).model_validate(data)

    def to_document(self) -> dict[str, Any]:
        """Render the operator JSON parameter-file object."""
        pole = self.pole_cfg.model_dump(mode="json") | self.pole.model_dump(mode="json")
        return {
            "config": {"schema": PARAMS_SCHEMA, "E": self.E, "r": self.r},
            "pole": pole,
            "heads": self.heads.model_dump(mode="json"),
            "numerator": self.num.model_dump(mode="json"),
            "D": self.D.tolist(),
        }

    @classmethod
    def from_document(cls, doc: dict[str, Any]) -> OperatorParams:
        """Build parameters from a parameter-file object.

        Raises:
            ConfigError: If the document is malformed or fails validation
        """
        try:
            pole = dict(doc["pole"])
            cfg = {k: pole.pop(k) for k in ("G", "L", "K", "epsilon") if k in pole}
            return cls.model_validate(
                {
                    "E": doc["config"]["E"],
                    "pole_cfg": cfg,
                    "pole": pole,
                    "heads": doc["heads"],
                    "num": doc["numerator"],
                    "D": doc["D"],
                }
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Malformed parameter document: missing {e}") from e
        except ValidationError as e:
            raise ConfigError(describe_validation_error(e)) from None


class ScanRoute(_ArrayModel):
    """A named permutation of token indices 0..M-1."""

    id: str = Field(min_length=1)
    perm: IndexArray

    @field_validator("perm")
    @classmethod
    def validate_bijection(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 1:
            raise ValueError("route permutation must be 1-D")
        if not np.array_equal(np.sort(v), np.arange(v.size)):
            raise ValueError("route permutation is not a bijection of 0..M-1")
        return v

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv


class ReportModel(BaseModel):
    """Base for JSON reports carrying the versioned report schema."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    report_schema: str = Field(default=REPORT_SCHEMA, alias="schema")
    kind: str

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


def describe_validation_error(e: ValidationError) -> str:
    """Summarise the first pydantic error as ``field.path: message``."""
    errors = e.errors()
    if not errors:
        return "Invalid parameters"
    first = errors[0]
    field = ".".join(str(p) for p in first["loc"]) or "parameters"
    return f"Invalid value for {field}: {first['msg']}"
