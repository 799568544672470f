"""Configuration management using Pydantic BaseSettings.

This module provides the process-wide settings for the TCP-SSM tooling
(seeds, precision, worker count, default hyperparameters and tolerances)
using Pydantic BaseSettings for validation and automatic environment
variable loading.
"""

import logging
import math
from collections.abc import Callable
from typing import Any, Literal, TypeVar, cast

from annotated_types import Ge, Le
from pydantic import Field, ValidationInfo, field_validator, model_validator
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

# Type variable for numeric clamping (int or float)
T = TypeVar("T", int, float)

Precision = Literal["f32", "f64"]


def _clamp_numeric_value(
    v: Any,
    field_info: FieldInfo,
    cast_fn: Callable[[Any], T],
    validity_check: Callable[[T], bool] = lambda x: True,
) -> T:
    """Clamp a numeric value to the ge/le constraints declared on its field.

    Args:
        v: The value to validate and clamp
        field_info: Field metadata containing default and constraints
        cast_fn: Function to cast value to target type (int or float)
        validity_check: Optional predicate to check validity (e.g., math.isfinite)

    Returns:
        Clamped numeric value within field constraints
    """
    ge = _get_ge_constraint(field_info)
    le = _get_le_constraint(field_info)

    if v is None:
        default_val: T = field_info.default
        return default_val

    try:
        numeric_val = cast_fn(v)
    except (TypeError, ValueError):
        default_val = field_info.default
        return default_val

    if not validity_check(numeric_val):
        default_val = field_info.default
        return default_val

    if ge is not None:
        numeric_val = max(cast_fn(ge), numeric_val)
    if le is not None:
        numeric_val = min(cast_fn(le), numeric_val)

    return numeric_val


class TcpSettings(BaseSettings):
    """Settings with validation and clamping.

    All values load from ``TCP_``-prefixed environment variables (or a
    ``.env`` file). Out-of-range numeric values are clamped to their bounds,
    except ``epsilon`` whose open interval (0, 1) is a stability invariant and
    is rejected instead.

    Environment Variables:
        TCP_SEED: Root seed for every generated tensor (default: 0)
        TCP_PRECISION: Scan kernel precision, "f32" or "f64" (default: "f32")
        TCP_THREADS: Worker cap for route/batch parallelism (default: 1, 1-64)
        TCP_EPSILON: Stability margin of the pole bank (default: 0.01)
        TCP_DELTA_MIN: Radius-scale offset (default: 0.1, range: 0-10)
        TCP_LAMBDA_THETA: Angle-scale bound (default: 0.5, range: 0-0.99)
        TCP_CLAMP_RADIUS: Clamp modulated radii at 1-epsilon (default: true)
        TCP_ROOT_TOL: Root-modulus tolerance for certification (default: 1e-9)
        TCP_STABILITY_DRAWS: Draws in the stability fuzz (default: 10000)
        TCP_LOG_LEVEL: Logging level name (default: "info")
    """

    model_config = SettingsConfigDict(
        env_prefix="TCP_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_default=True,
        frozen=True,
    )

    # Reproducibility
    seed: int = Field(
        default=0,
        ge=0,
        le=2**63 - 1,
        description="Root seed for parameter and input generation",
    )
    precision: Precision = Field(
        default="f32",
        description="Scan kernel precision; coefficient expansion is always float64",
    )
    threads: int = Field(
        default=1,
        ge=1,
        le=64,
        description="Maximum worker threads across routes and batch rows",
    )

    # Operator hyperparameters
    epsilon: float = Field(
        default=0.01,
        gt=0.0,
        lt=1.0,
        description="Pole bank stability margin",
    )
    delta_min: float = Field(
        default=0.1,
        ge=0.0,
        le=10.0,
        description="Offset of the radius scale; delta_0 defaults to delta_min + ln 2",
    )
    lambda_theta: float = Field(
        default=0.5,
        ge=0.0,
        le=0.99,
        description="Bound of the angle scale around one",
    )
    clamp_radius: bool = Field(
        default=True,
        description="Clamp modulated radii to 1 - epsilon",
    )

    # Verification tolerances
    root_tol: float = Field(
        default=1e-9,
        ge=1e-15,
        le=1e-3,
        description="Slack on root moduli during stability certification",
    )
    stability_draws: int = Field(
        default=10000,
        ge=10,
        le=1_000_000,
        description="Random parameter draws in the stability fuzz",
    )
    oracle_tol_f64: float = Field(
        default=1e-10,
        ge=1e-15,
        le=1e-2,
        description="Kernel vs reference tolerance when both run float64",
    )
    oracle_tol_f32: float = Field(
        default=1e-4,
        ge=1e-8,
        le=1e-1,
        description="Kernel vs reference tolerance for the float32 kernel",
    )

    log_level: Literal["debug", "info", "warning", "error"] = Field(
        default="info",
        description="Logging verbosity for the CLI",
    )

    @field_validator("precision", mode="before")
    @classmethod
    def normalize_precision(cls, v: Any) -> Any:
        """Accept float32/float64 spellings alongside f32/f64."""
        if isinstance(v, str):
            aliases = {"float32": "f32", "float64": "f64"}
            v = v.strip().lower()
            return aliases.get(v, v)
        return v

    @field_validator("log_level", mode="before")
    @classmethod
    def normalize_log_level(cls, v: Any) -> Any:
        return v.strip().lower() if isinstance(v, str) else v

    @field_validator("seed", "threads", "stability_draws", mode="before")
    @classmethod
    def clamp_int_values(cls, v: Any, info: ValidationInfo) -> int:
        """Clamp integer values to their field constraints.

        Raises:
            RuntimeError: If field_name is missing from ValidationInfo
        """
        field_name = info.field_name
        if field_name is None:
            msg = "Missing field_name in ValidationInfo"
            raise RuntimeError(msg)
        field_info = cls.model_fields[field_name]
        return _clamp_numeric_value(v, field_info, int)

    @field_validator(
        "delta_min",
        "lambda_theta",
        "root_tol",
        "oracle_tol_f64",
        "oracle_tol_f32",
        mode="before",
    )
    @classmethod
    def clamp_float_values(cls, v: Any, info: ValidationInfo) -> float:
        """Clamp float values to their field constraints.

        NaN and infinite values are replaced with the field default.

        Raises:
            RuntimeError: If field_name is missing from ValidationInfo
        """
        field_name = info.field_name
        if field_name is None:
            msg = "Missing field_name in ValidationInfo"
            raise RuntimeError(msg)
        field_info = cls.model_fields[field_name]
        return _clamp_numeric_value(v, field_info, float, math.isfinite)

    @model_validator(mode="after")
    def validate_tolerance_order(self) -> "TcpSettings":
        """Keep the float32 oracle tolerance no tighter than the float64 one."""
        if self.oracle_tol_f32 < self.oracle_tol_f64:
            old = self.oracle_tol_f32
            object.__setattr__(self, "oracle_tol_f32", self.oracle_tol_f64)
            logger.warning(
                "oracle_tol_f32 (%s) was below oracle_tol_f64 (%s); raised to %s",
                old,
                self.oracle_tol_f64,
                self.oracle_tol_f64,
            )
        return self

    @property
    def delta_0(self) -> float:
        """Radius-scale normalisation giving unit scale for zero heads."""
        return self.delta_min + math.log(2.0)

    @property
    def oracle_tol(self) -> float:
        """Oracle tolerance matching the configured kernel precision."""
        return self.oracle_tol_f32 if self.precision == "f32" else self.oracle_tol_f64

    def with_overrides(self, **overrides: Any) -> "TcpSettings":
        """Create a new settings instance with override values.

        ``None`` overrides are ignored so CLI flags that were not given keep
        the environment value.

        Returns:
            New TcpSettings instance with overridden values
        """
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return self.__class__.model_validate(data)


def _get_ge_constraint(field_info: FieldInfo) -> int | float | None:
    """Extract the >= constraint value from field metadata.

    Pydantic v2 stores Field(ge=...) constraints as annotated-types metadata.
    """
    for meta in field_info.metadata:
        if isinstance(meta, Ge):
            return cast(float | int | None, meta.ge)
    return None


def _get_le_constraint(field_info: FieldInfo) -> int | float | None:
    """Extract the <= constraint value from field metadata."""
    for meta in field_info.metadata:
        if isinstance(meta, Le):
            return cast(float | int | None, meta.le)
    return None
