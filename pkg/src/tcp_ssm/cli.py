"""Command-line entry point for the TCP-SSM tooling."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable
from pathlib import Path

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from .analysis import (
    FlopModel,
    MemoryMap,
    dominant_bin,
    envelope_slope,
    flop_report,
    horizon_from_radius,
    impulse_response,
    memory_horizon,
    reduction_percent,
    summable_within,
    transfer_function,
)
from .config import TcpSettings
from .errors import (
    ConfigError,
    IndexOutOfRange,
    InstabilityError,
    IoFailure,
    ShapeMismatch,
    TcpError,
    VerificationFailed,
)
from .models import OperatorParams, PoleBankConfig, ReportModel, describe_validation_error
from .modulation import token_poles
from .params import init_operator_params, load_operator_stack, save_operator_params
from .pole_bank import (
    StabilityReport,
    base_denominator,
    certify_poles,
    certify_schur,
    constrain,
)
from .scan import DEFAULT_ROUTES, ROUTE_IDS, forward_multi_route, parse_routes
from .tensor_io import Rng, read_tensor, write_tensor
from .verify import CHECKS, SABOTAGES, run_suite

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, TcpSettings], int]


def _positive_int(value: str) -> int:
    try:
        ivalue = int(value)
    except ValueError as exc:  # pragma: no cover - argparse handles messaging
        raise argparse.ArgumentTypeError("must be an integer") from exc
    if ivalue <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return ivalue


def _non_negative_int(value: str) -> int:
    try:
        ivalue = int(value)
    except ValueError as exc:  # pragma: no cover - argparse handles messaging
        raise argparse.ArgumentTypeError("must be an integer") from exc
    if ivalue < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return ivalue


def _grid(value: str) -> tuple[int, int]:
    """Parse ``HxW`` into a grid shape."""
    parts = value.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("must look like HxW, e.g. 14x14")
    h, w = (_positive_int(p) for p in parts)
    return h, w


def _group(value: str) -> int | str:
    if value in ("all", "max"):
        return value
    return _non_negative_int(value)


def _taps(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("must be comma-separated numbers") from exc


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--env-file",
        type=Path,
        help="Optional path to a .env file to load before reading settings.",
    )
    common.add_argument(
        "--seed", type=_non_negative_int, help="Override TCP_SEED for this process."
    )
    common.add_argument(
        "--precision",
        choices=["f32", "f64"],
        help="Override TCP_PRECISION (scan kernel dtype).",
    )
    common.add_argument(
        "--threads", type=_positive_int, help="Override TCP_THREADS (worker cap)."
    )
    common.add_argument(
        "--log-level",
        choices=["debug", "info", "warning", "error"],
        help="Override TCP_LOG_LEVEL.",
    )
    return common


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="tcp-ssm",
        description="Run, certify and analyse token-conditioned-pole state-space operators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser(
        "gen-params", parents=[common], help="Write the documented initialisation as JSON."
    )
    gen.add_argument("--out", type=Path, required=True, help="Parameter file to write.")
    gen.add_argument("--channels", "-E", dest="E", type=_positive_int, default=16)
    gen.add_argument("--groups", "-G", dest="G", type=_positive_int, default=4)
    gen.add_argument("--real", "-L", dest="L", type=_non_negative_int, default=1)
    gen.add_argument("--complex", "-K", dest="K", type=_non_negative_int, default=1)
    gen.add_argument("--rank", dest="r_f", type=_positive_int, default=4)
    gen.add_argument(
        "--mode", choices=["shared", "group_specific", "fixed"], default="shared"
    )
    gen.add_argument(
        "--layers", type=_positive_int, default=1, help="Stack this many operators."
    )
    gen.set_defaults(handler=cmd_gen_params)

    scan = sub.add_parser("scan", parents=[common], help="Apply the operator to tokens.")
    scan.add_argument("--params", type=Path, required=True)
    scan.add_argument(
        "--input", type=Path, required=True, help="Tokens [B,M,E] or [B,H,W,E] (.tcpt)."
    )
    scan.add_argument("--out", type=Path, required=True, help="Output tensor (.tcpt).")
    scan.add_argument(
        "--routes",
        default=DEFAULT_ROUTES,
        help=f"Comma-separated routes from {', '.join(ROUTE_IDS)}.",
    )
    scan.add_argument("--grid", type=_grid, help="HxW grid for [B,M,E] input.")
    scan.add_argument(
        "--layer",
        type=_non_negative_int,
        help="Apply only this layer; by default every layer is applied in order.",
    )
    scan.set_defaults(handler=cmd_scan)

    certify = sub.add_parser(
        "certify", parents=[common], help="Certify base and modulated pole stability."
    )
    certify.add_argument("--params", type=Path, required=True)
    certify.add_argument(
        "--input", type=Path, help="Sample tokens for the modulated certification."
    )
    certify.add_argument("--out", type=Path, help="JSON report to write.")
    certify.add_argument("--layer", type=_non_negative_int)
    certify.set_defaults(handler=cmd_certify)

    impulse = sub.add_parser(
        "impulse", parents=[common], help="Impulse response of one base group."
    )
    impulse.add_argument("--params", type=Path, required=True)
    impulse.add_argument("--group", type=_non_negative_int, default=0)
    impulse.add_argument("--layer", type=_non_negative_int)
    impulse.add_argument("--length", type=_positive_int, default=1024)
    impulse.add_argument(
        "--taps", type=_taps, default=[1.0], help="Numerator taps b_1,b_2,... (default 1)."
    )
    impulse.add_argument("--direct", type=float, default=0.0, help="Direct term d.")
    impulse.add_argument(
        "--out", type=Path, help="Response tensor (.tcpt); a .json report is written beside it."
    )
    impulse.set_defaults(handler=cmd_impulse)

    memmap = sub.add_parser(
        "memmap", parents=[common], help="Memory-horizon maps over an H x W token grid."
    )
    memmap.add_argument("--params", type=Path, required=True)
    memmap.add_argument(
        "--input", type=Path, required=True, help="Features [H,W,E] or [B,H,W,E] (.tcpt)."
    )
    memmap.add_argument("--out", type=Path, required=True, help="Output directory.")
    memmap.add_argument(
        "--group",
        type=_group,
        default="max",
        help="Group index, 'all' for one map per group, or 'max' (default).",
    )
    memmap.add_argument("--layer", type=_non_negative_int, help="Default: every layer.")
    memmap.add_argument("--batch", type=_non_negative_int, default=0)
    memmap.set_defaults(handler=cmd_memmap)

    flops = sub.add_parser("flops", parents=[common], help="Analytic FLOP model report.")
    flops.add_argument("--params", type=Path, help="Take r, r_f, E and C from this file.")
    flops.add_argument("--layer", type=_non_negative_int)
    flops.add_argument("--order", dest="r", type=_positive_int)
    flops.add_argument("--rank", dest="r_f", type=_positive_int)
    flops.add_argument("--channels", "-E", dest="E", type=_positive_int)
    flops.add_argument("--heads", dest="C", type=_positive_int, default=1)
    flops.add_argument("--state", "-N", dest="N", type=_positive_int, default=16)
    flops.add_argument("--tokens", "-M", dest="M", type=_positive_int, default=196)
    flops.add_argument("--routes", default=DEFAULT_ROUTES)
    flops.add_argument(
        "--compare",
        nargs=2,
        type=float,
        metavar=("OURS", "BASELINE"),
        help="Report the relative reduction between two quoted costs instead.",
    )
    flops.add_argument("--out", type=Path, help="JSON report to write.")
    flops.set_defaults(handler=cmd_flops)

    verify = sub.add_parser("verify", parents=[common], help="Run the property suite.")
    verify.add_argument("--quick", action="store_true", help="Shrink every check.")
    verify.add_argument(
        "--sabotage",
        action="append",
        choices=list(SABOTAGES),
        default=[],
        help="Inject a known defect; the suite must then fail.",
    )
    verify.add_argument(
        "--only",
        action="append",
        choices=list(CHECKS),
        help="Run only the named check (repeatable).",
    )
    verify.add_argument("--out", type=Path, help="JSON report to write.")
    verify.set_defaults(handler=cmd_verify)

    return parser.parse_args(argv)


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot write {path}: {e}") from e


def _emit(report: ReportModel, out: Path | None) -> None:
    if out is not None:
        _write_text(out, report.to_json())


def _select_layers(path: Path, layer: int | None) -> list[tuple[int, OperatorParams]]:
    stack = load_operator_stack(path)
    if layer is None:
        return list(enumerate(stack))
    if not 0 <= layer < len(stack):
        raise IndexOutOfRange(f"Layer {layer} outside 0..{len(stack) - 1}")
    return [(layer, stack[layer])]


def _one_layer(path: Path, layer: int | None) -> OperatorParams:
    return _select_layers(path, 0 if layer is None else layer)[0][1]


def _read_tokens(
    path: Path, grid: tuple[int, int] | None
) -> tuple[np.ndarray, tuple[int, int] | None]:
    """Tokens as float64 [B, M, E] plus the grid, inferred from 4-D input."""
    x = np.asarray(read_tensor(path), dtype=np.float64)
    if x.ndim == 4:
        B, H, W, E = x.shape
        if grid is not None and grid != (H, W):
            raise ShapeMismatch(f"--grid {grid[0]}x{grid[1]} disagrees with input {H}x{W}")
        return x.reshape(B, H * W, E), (H, W)
    if x.ndim == 3:
        if grid is not None and grid[0] * grid[1] != x.shape[1]:
            raise ShapeMismatch(f"Grid {grid[0]}x{grid[1]} does not cover {x.shape[1]} tokens")
        return x, grid
    raise ShapeMismatch(f"Expected tokens [B,M,E] or [B,H,W,E], got shape {x.shape}")


def _read_feature_grid(path: Path) -> tuple[np.ndarray, tuple[int, int]]:
    x = np.asarray(read_tensor(path), dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"Expected features [H,W,E] or [B,H,W,E], got shape {x.shape}")
    B, H, W, E = x.shape
    return x.reshape(B, H * W, E), (H, W)


def cmd_gen_params(args: argparse.Namespace, settings: TcpSettings) -> int:
    cfg = PoleBankConfig(G=args.G, L=args.L, K=args.K, epsilon=settings.epsilon)
    root = Rng(settings.seed)
    stack = [
        init_operator_params(
            args.E,
            cfg,
            args.r_f,
            root.split(layer),
            mode=args.mode,
            delta_min=settings.delta_min,
            lambda_theta=settings.lambda_theta,
            clamp_radius=settings.clamp_radius,
        )
        for layer in range(args.layers)
    ]
    save_operator_params(args.out, stack[0] if args.layers == 1 else stack)
    logger.info(
        "Wrote parameters",
        extra={"path": str(args.out), "layers": args.layers, "r": cfg.r, "E": args.E},
    )
    print(f"wrote {args.out} (E={args.E}, G={cfg.G}, r={cfg.r}, layers={args.layers})")
    return 0


def cmd_scan(args: argparse.Namespace, settings: TcpSettings) -> int:
    x, grid = _read_tokens(args.input, args.grid)
    routes = parse_routes(args.routes, x.shape[1], grid)
    out = x
    for idx, p in _select_layers(args.params, args.layer):
        out = forward_multi_route(
            np.asarray(out, dtype=np.float64),
            p,
            routes,
            precision=settings.precision,
            threads=settings.threads,
        )
        logger.debug("Layer applied", extra={"layer": idx, "routes": args.routes})
    write_tensor(args.out, out)
    print(f"wrote {args.out} shape={list(out.shape)} dtype={out.dtype.name}")
    return 0


class CertifyReport(ReportModel):
    kind: str = "certify"
    layer: int
    base: StabilityReport
    modulated: StabilityReport | None = None
    stable: bool


class CertifyStackReport(ReportModel):
    kind: str = "certify_stack"
    layers: list[CertifyReport]


def cmd_certify(args: argparse.Namespace, settings: TcpSettings) -> int:
    layers = _select_layers(args.params, args.layer)
    x = _read_tokens(args.input, None)[0] if args.input is not None else None
    reports = []
    for idx, p in layers:
        bank = constrain(p.pole, p.pole_cfg)
        base = certify_schur(bank, settings.root_tol)
        modulated = None
        if x is not None:
            _, poles = token_poles(x, p)
            modulated = certify_poles(poles, p.pole_cfg.epsilon, settings.root_tol)
        stable = base.stable and (modulated is None or modulated.stable)
        reports.append(
            CertifyReport(layer=idx, base=base, modulated=modulated, stable=stable)
        )
        print(f"layer {idx}")
        print(base.summary())
        if modulated is not None:
            print(modulated.summary())

    if args.out is not None:
        if len(reports) == 1:
            _emit(reports[0], args.out)
        else:
            _write_text(args.out, CertifyStackReport(layers=reports).to_json())
    unstable = [r.layer for r in reports if not r.stable]
    if unstable:
        raise InstabilityError(f"Pole bank not certified for layer(s) {unstable}")
    return 0


class ImpulseReport(ReportModel):
    kind: str = "impulse"
    layer: int
    group: int
    length: int
    taps: list[float]
    direct: float
    max_pole_modulus: float
    tau: float
    envelope_slope: float
    dominant_bin: int
    summable_within_20_tau: bool


def cmd_impulse(args: argparse.Namespace, settings: TcpSettings) -> int:
    layer = 0 if args.layer is None else args.layer
    p = _one_layer(args.params, layer)
    bank = constrain(p.pole, p.pole_cfg)
    if not args.taps:
        raise ConfigError("At least one numerator tap is required")
    q = base_denominator(bank, args.group)[1:]
    tf = transfer_function(args.taps, q, args.direct)
    rho = tf.max_pole_modulus()
    if rho >= 1.0:
        raise InstabilityError(f"Group {args.group} has a pole with modulus {rho:.6f}")
    h = impulse_response(tf, args.length)
    tau = float(horizon_from_radius(rho))
    report = ImpulseReport(
        layer=layer,
        group=args.group,
        length=args.length,
        taps=list(args.taps),
        direct=args.direct,
        max_pole_modulus=rho,
        tau=tau,
        envelope_slope=envelope_slope(h),
        dominant_bin=dominant_bin(h),
        summable_within_20_tau=summable_within(h, tau),
    )
    if args.out is not None:
        write_tensor(args.out, h)
        _write_text(args.out.with_name(args.out.name + ".json"), report.to_json())
    print(
        f"group {args.group}: max |pole| {rho:.6f}, tau {tau:.3f}, "
        f"envelope slope {report.envelope_slope:.6f}, dominant bin {report.dominant_bin}"
    )
    return 0


class MapFiles(BaseModel):
    layer: int
    group: int | None
    csv: str
    pgm: dict[str, str]
    markers: dict[str, dict[str, int]]


class MemmapReport(ReportModel):
    kind: str = "memmap"
    grid: tuple[int, int]
    batch: int
    maps: list[MapFiles]


def _write_map(mm: MemoryMap, out_dir: Path, stem: str) -> tuple[str, dict[str, str]]:
    csv_path = out_dir / f"{stem}.csv"
    mm.to_csv(csv_path)
    pgms = {}
    for name in ("tau", "osc", "rho_max"):
        pgm_path = out_dir / f"{stem}_{name}.pgm"
        mm.to_pgm(pgm_path, name)
        pgms[name] = pgm_path.name
    return csv_path.name, pgms


def cmd_memmap(args: argparse.Namespace, settings: TcpSettings) -> int:
    x, grid = _read_feature_grid(args.input)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"Cannot create {args.out}: {e}") from e

    entries = []
    for idx, p in _select_layers(args.params, args.layer):
        _, poles = token_poles(x, p)
        if args.group == "all":
            groups: list[int | None] = list(range(p.G))
        elif args.group == "max":
            groups = [None]
        else:
            groups = [int(args.group)]
        for g in groups:
            mm = memory_horizon(poles, grid, batch=args.batch, group=g)
            stem = f"layer{idx}" if g is None else f"layer{idx}_group{g}"
            csv_name, pgms = _write_map(mm, args.out, stem)
            markers = mm.markers()
            entries.append(
                MapFiles(layer=idx, group=g, csv=csv_name, pgm=pgms, markers=markers)
            )
            marks = ", ".join(
                f"{k}=({v['row']},{v['col']})" for k, v in markers.items()
            )
            print(f"{stem}: {marks}")

    report = MemmapReport(grid=grid, batch=args.batch, maps=entries)
    _write_text(args.out / "memmap.json", report.to_json())
    return 0


class ReductionReport(ReportModel):
    kind: str = "reduction"
    ours: float
    baseline: float
    reduction_percent: float


def cmd_flops(args: argparse.Namespace, settings: TcpSettings) -> int:
    if args.compare is not None:
        ours, baseline = args.compare
        pct = reduction_percent(ours, baseline)
        print(f"reduction {ours} vs {baseline}: {pct:.1f}%")
        _emit(ReductionReport(ours=ours, baseline=baseline, reduction_percent=pct), args.out)
        return 0

    sizes = {"r": args.r, "r_f": args.r_f, "E": args.E, "C": args.C}
    if args.params is not None:
        p = _one_layer(args.params, args.layer)
        sizes = {"r": p.r, "r_f": p.num.r_f, "E": p.E, "C": p.heads.C}
    missing = [k for k, v in sizes.items() if v is None]
    if missing:
        raise ConfigError(f"Missing sizes {missing}: pass --params or the size flags")
    routes = [s for s in args.routes.split(",") if s.strip()]
    unknown = [s for s in routes if s.strip() not in ROUTE_IDS]
    if not routes or unknown:
        raise ConfigError(f"Invalid route list {args.routes!r}")
    try:
        model = FlopModel(N=args.N, M=args.M, routes=len(routes), **sizes)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from None
    flops = flop_report(model)
    print(flops.summary())
    _emit(flops, args.out)
    return 0


def cmd_verify(args: argparse.Namespace, settings: TcpSettings) -> int:
    report = run_suite(
        settings,
        quick=args.quick,
        sabotage=frozenset(args.sabotage),
        only=args.only,
    )
    print(report.matrix())
    _emit(report, args.out)
    if not report.passed:
        raise VerificationFailed(report.failed)
    return 0


def _load_settings(args: argparse.Namespace) -> TcpSettings:
    """Settings from the environment (and .env), with CLI flags on top."""
    try:
        return TcpSettings().with_overrides(
            seed=args.seed,
            precision=args.precision,
            threads=args.threads,
            log_level=args.log_level,
        )
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from None


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)

    if args.env_file:
        load_dotenv(args.env_file, override=True)
    else:
        load_dotenv(override=False)

    try:
        settings = _load_settings(args)
        logging.basicConfig(
            level=settings.log_level.upper(),
            stream=sys.stderr,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        handler: Handler = args.handler
        return handler(args, settings)
    except TcpError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
