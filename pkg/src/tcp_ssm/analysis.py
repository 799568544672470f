"""z-domain and memory diagnostics.

- :class:`TransferFunction` evaluation, impulse and frequency responses
- dominant-pole memory-horizon maps over an H x W token grid
- the per-token-channel FLOP model

The memory horizon of a token is the dominant-pole time constant
``tau = -1 / ln(rho_max)``, with ``rho_max`` the largest pole radius (real
``|a_t|`` or complex ``rho_t``) over the selected groups, capped at
``1 - 1e-9``; ``tau`` is floored at ``1e-6``. The oscillation score is
``rho_max * theta / pi`` when a complex pole attains ``rho_max`` and 0 when a
real pole does.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, computed_field
from scipy import signal

from .denominator import dominant_modulus, roots
from .errors import ConfigError, InstabilityError, IoFailure, PoleEvaluation, ShapeMismatch
from .models import ReportModel
from .modulation import ModulatedPoles

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

RHO_CAP = 1.0 - 1e-9
TAU_FLOOR = 1e-6
POLE_TOL = 1e-12
MAP_FIELDS = ("tau", "osc", "rho_max")


@dataclass(frozen=True)
class TransferFunction:
    """``H(z) = d + P(z^-1) / Q(z^-1)``.

    Attributes:
        taps: Numerator taps ``b_1..b_n`` (lags 1..n; the numerator is strictly
            causal)
        q: Denominator coefficients ``q_1..q_r`` of the monic ``Q``
        d: Direct term
    """

    taps: FloatArray
    q: FloatArray
    d: float = 0.0

    @property
    def order(self) -> int:
        return max(self.taps.size, self.q.size)

    def ba(self) -> tuple[FloatArray, FloatArray]:
        """Filter coefficients ``(b, a)`` in increasing powers of ``z^-1``."""
        n = self.order
        b = np.zeros(n + 1)
        b[1 : self.taps.size + 1] = self.taps
        a = np.zeros(n + 1)
        a[0] = 1.0
        a[1 : self.q.size + 1] = self.q
        # d + P/Q = (d Q + P) / Q
        return b + self.d * a, a

    def poles(self) -> NDArray[np.complex128]:
        if self.q.size == 0:
            return np.zeros(0, dtype=np.complex128)
        return roots(np.concatenate([[1.0], self.q]))

    def max_pole_modulus(self) -> float:
        p = self.poles()
        return float(dominant_modulus(p, self.q)) if p.size else 0.0


def transfer_function(taps: ArrayLike, q: ArrayLike, d: float = 0.0) -> TransferFunction:
    return TransferFunction(
        taps=np.atleast_1d(np.asarray(taps, dtype=np.float64)),
        q=np.atleast_1d(np.asarray(q, dtype=np.float64)),
        d=float(d),
    )


def eval_H(tf: TransferFunction, z: complex) -> complex:
    """Evaluate the transfer function at ``z``.

    Evaluation on the unit circle first certifies that every pole lies
    strictly inside it.

    Raises:
        PoleEvaluation: If ``z`` is within 1e-12 of a pole
        InstabilityError: If evaluated on ``|z| = 1`` with a pole on or outside
            the unit circle
    """
    z = complex(z)
    if abs(abs(z) - 1.0) <= POLE_TOL and tf.max_pole_modulus() >= 1.0:
        raise InstabilityError(
            f"Denominator is not Schur stable (max |pole| = {tf.max_pole_modulus():.6f})"
        )
    n = tf.order
    # Multiply through by z^n to evaluate in positive powers, defined at z = 0.
    num = np.zeros(n + 1)
    num[1 : tf.taps.size + 1] = tf.taps
    den = np.zeros(n + 1)
    den[0] = 1.0
    den[1 : tf.q.size + 1] = tf.q
    poles = tf.poles()
    q_val = complex(np.polyval(den, z))
    if q_val == 0 or (poles.size and float(np.min(np.abs(z - poles))) < POLE_TOL):
        raise PoleEvaluation(z)
    return tf.d + complex(np.polyval(num, z)) / q_val


def impulse_response(tf: TransferFunction, length: int) -> FloatArray:
    """First ``length`` samples of the response to a unit impulse."""
    if length < 1:
        raise ConfigError(f"Impulse response length must be >= 1, got {length}")
    b, a = tf.ba()
    impulse = np.zeros(length)
    impulse[0] = 1.0
    return np.asarray(signal.lfilter(b, a, impulse), dtype=np.float64)


def frequency_response(
    tf: TransferFunction, n: int = 512
) -> tuple[FloatArray, NDArray[np.complex128]]:
    """``n`` samples of ``H(e^{jw})`` for w in [0, pi)."""
    b, a = tf.ba()
    w, h = signal.freqz(b, a, worN=n)
    return np.asarray(w), np.asarray(h)


def envelope_slope(h: FloatArray) -> float:
    """Slope of ``ln|h_k|`` fitted through the local peaks of ``|h|``.

    For a pole pair of radius ``rho`` this approaches ``ln(rho)``.
    """
    mag = np.abs(np.asarray(h, dtype=np.float64))
    peaks, _ = signal.find_peaks(mag)
    peaks = peaks[mag[peaks] > 0.0]
    if peaks.size < 2:
        peaks = np.flatnonzero(mag > 0.0)
    if peaks.size < 2:
        raise ConfigError("Need at least two nonzero samples to fit an envelope")
    slope, _ = np.polyfit(peaks.astype(np.float64), np.log(mag[peaks]), 1)
    return float(slope)


def dominant_bin(h: FloatArray) -> int:
    """Index of the largest non-DC magnitude in the one-sided DFT of ``h``."""
    spectrum = np.abs(np.fft.rfft(np.asarray(h, dtype=np.float64)))
    if spectrum.size < 2:
        return 0
    return int(np.argmax(spectrum[1:]) + 1)


def horizon_from_radius(rho_max: ArrayLike) -> FloatArray:
    """``tau = -1 / ln(rho_max)`` with the radius cap and the tau floor."""
    rho = np.minimum(np.asarray(rho_max, dtype=np.float64), RHO_CAP)
    with np.errstate(divide="ignore"):
        tau = -1.0 / np.log(rho)
    return np.maximum(tau, TAU_FLOOR)


@dataclass(frozen=True)
class MemoryMap:
    """Per-token memory diagnostics on an H x W grid.

    Attributes:
        tau: Memory horizon [H, W]
        osc: Radius-weighted oscillation in [0, 1) [H, W]
        rho_max: Dominant pole radius [H, W]
        groups: Groups the maps were reduced over
    """

    tau: FloatArray
    osc: FloatArray
    rho_max: FloatArray
    groups: tuple[int, ...]

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.tau.shape
        return int(h), int(w)

    def field(self, name: str) -> FloatArray:
        if name not in MAP_FIELDS:
            raise ConfigError(f"Unknown map field {name!r}")
        arr: FloatArray = getattr(self, name)
        return arr

    def markers(self) -> dict[str, dict[str, int]]:
        """T1 = argmax tau, T2 = argmin tau, T3 = argmax osc (lowest index on ties)."""
        w = self.grid[1]
        picks = {
            "T1": int(np.argmax(self.tau)),
            "T2": int(np.argmin(self.tau)),
            "T3": int(np.argmax(self.osc)),
        }
        return {
            k: {"token_index": i, "row": i // w, "col": i % w} for k, i in picks.items()
        }

    def to_csv(self, path: str | Path) -> None:
        h, w = self.grid
        try:
            with Path(path).open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["token_index", "row", "col", "tau", "osc", "rho_max"])
                for i in range(h * w):
                    row, col = divmod(i, w)
                    writer.writerow(
                        [
                            i,
                            row,
                            col,
                            repr(float(self.tau[row, col])),
                            repr(float(self.osc[row, col])),
                            repr(float(self.rho_max[row, col])),
                        ]
                    )
        except OSError as e:
            raise IoFailure(f"Cannot write {path}: {e}") from e

    def to_pgm(self, path: str | Path, name: str) -> None:
        """Write one field as an 8-bit binary PGM plus a ``.json`` sidecar.

        Values are scaled linearly from [min, max] to [0, 255]; the sidecar
        records min and max. A constant field maps to 0.
        """
        values = self.field(name)
        lo, hi = float(values.min()), float(values.max())
        if hi > lo:
            scaled = np.rint((values - lo) / (hi - lo) * 255.0)
        else:
            scaled = np.zeros_like(values)
        h, w = self.grid
        body = np.clip(scaled, 0, 255).astype(np.uint8).tobytes(order="C")
        sidecar = {"field": name, "min": lo, "max": hi, "width": w, "height": h}
        target = Path(path)
        try:
            target.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)
            target.with_name(target.name + ".json").write_text(
                json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
        except OSError as e:
            raise IoFailure(f"Cannot write {path}: {e}") from e


def memory_horizon(
    poles: ModulatedPoles,
    grid: tuple[int, int],
    batch: int = 0,
    group: int | None = None,
) -> MemoryMap:
    """Memory maps for one batch row of token-conditioned poles.

    Args:
        poles: Modulated poles with leading dims [B, M]
        grid: (H, W) with H * W == M, row-major flattening
        batch: Batch row to map
        group: Single group to map; ``None`` takes the max over all groups

    Raises:
        ShapeMismatch: If the grid does not cover the tokens
    """
    a_t, rho_t, theta_t = poles.a_t, poles.rho_t, poles.theta_t
    B, M, G = a_t.shape[0], a_t.shape[1], a_t.shape[2]
    h, w = grid
    if h * w != M:
        raise ShapeMismatch(f"Grid {h}x{w} does not cover {M} tokens")
    if not 0 <= batch < B:
        raise ShapeMismatch(f"Batch row {batch} outside 0..{B - 1}")
    groups = tuple(range(G)) if group is None else (group,)
    if group is not None and not 0 <= group < G:
        raise ShapeMismatch(f"Group {group} outside 0..{G - 1}")

    sel = list(groups)
    real = np.abs(a_t[batch][:, sel]).reshape(M, -1)
    cplx = rho_t[batch][:, sel].reshape(M, -1)
    angles = theta_t[batch][:, sel].reshape(M, -1)

    real_max = real.max(axis=1) if real.shape[1] else np.zeros(M)
    if cplx.shape[1]:
        k = np.argmax(cplx, axis=1)
        cplx_max = cplx[np.arange(M), k]
        theta_star = angles[np.arange(M), k]
    else:
        cplx_max = np.zeros(M)
        theta_star = np.zeros(M)

    complex_wins = cplx_max >= real_max
    rho_max = np.maximum(real_max, cplx_max)
    osc = np.where(complex_wins, np.minimum(rho_max, RHO_CAP) * theta_star / np.pi, 0.0)
    tau = horizon_from_radius(rho_max)
    return MemoryMap(
        tau=tau.reshape(h, w),
        osc=osc.reshape(h, w),
        rho_max=rho_max.reshape(h, w),
        groups=groups,
    )


class FlopModel(BaseModel):
    """Sizes entering the per-token-channel cost model.

    ``N`` is the state size of the diagonal selective-SSM baseline; ``C`` the
    number of modulation-head rows (1 shared, G group-specific).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    r: int = Field(ge=1)
    r_f: int = Field(ge=1)
    N: int = Field(ge=1)
    E: int = Field(ge=1)
    M: int = Field(ge=1)
    routes: int = Field(default=1, ge=1)
    C: int = Field(default=1, ge=1)

    @computed_field  # type: ignore[prop-decorator]
    @property
    def tcp_cost(self) -> int:
        """Dominant per-token-channel cost, 2r + 3r_f."""
        return 2 * self.r + 3 * self.r_f

    @computed_field  # type: ignore[prop-decorator]
    @property
    def baseline_cost(self) -> int:
        """Per-token-channel cost of the baseline scan, 7N."""
        return 7 * self.N


class FlopReport(ReportModel):
    kind: str = "flops"
    model: FlopModel
    tcp_total: int
    baseline_total: int
    tcp_total_mac2: int
    baseline_total_mac2: int
    projection_per_token: int
    reduction_percent: float
    notes: list[str]

    def summary(self) -> str:
        m = self.model
        return "\n".join(
            [
                f"per token-channel: TCP {m.tcp_cost} (2r+3r_f), baseline {m.baseline_cost} (7N)",
                f"totals (MAC=1): TCP {self.tcp_total}, baseline {self.baseline_total}",
                f"totals (MAC=2): TCP {self.tcp_total_mac2}, baseline {self.baseline_total_mac2}",
                f"projection per token (excluded): {self.projection_per_token}",
                f"reduction: {self.reduction_percent:.1f}%",
            ]
        )


def reduction_percent(ours: float, baseline: float) -> float:
    """Relative saving ``100 * (1 - ours / baseline)``."""
    if baseline <= 0:
        raise ConfigError(f"Baseline cost must be positive, got {baseline}")
    return 100.0 * (1.0 - ours / baseline)


def flop_report(m: FlopModel) -> FlopReport:
    """Totals over ``M * E * routes`` token-channels under both MAC conventions."""
    scale = m.M * m.E * m.routes
    tcp_total = m.tcp_cost * scale
    baseline_total = m.baseline_cost * scale
    # Token projections: radius/angle heads, lag mixing, gate and latent V.
    projection = m.E * (2 * m.C + m.r + 2 * m.r_f)
    return FlopReport(
        model=m,
        tcp_total=tcp_total,
        baseline_total=baseline_total,
        tcp_total_mac2=2 * tcp_total,
        baseline_total_mac2=2 * baseline_total,
        projection_per_token=projection,
        reduction_percent=reduction_percent(m.tcp_cost, m.baseline_cost),
        notes=[
            "baseline excludes its step-size projection",
            "projection_per_token is reported separately from the dominant cost",
        ],
    )


def summable_within(h: FloatArray, tau: float, rel: float = 0.01) -> bool:
    """Whether sum |h_k| over k <= 10 tau is within ``rel`` of the k <= 20 tau sum."""
    n10 = min(h.size, int(math.ceil(10 * tau)) + 1)
    n20 = min(h.size, int(math.ceil(20 * tau)) + 1)
    s10 = float(np.sum(np.abs(h[:n10])))
    s20 = float(np.sum(np.abs(h[:n20])))
    return abs(s20 - s10) <= rel * max(s20, 1e-300)
