"""Command-line interface: ``cwlate {estimate,bandwidth,simulate,policy}``.

Exit status is 0 when the report was written, 2 for input or usage problems
and 3 when estimation itself failed.
"""

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from cwlate.bandwidth import select_bandwidths
from cwlate.core import KernelKind, KernelSpec, RddDataset, build_partition
from cwlate.cwlate_env import get_estimation_config
from cwlate.errors import CwlateError, InvalidDataset, InvalidEstimand, SchemaError
from cwlate.estimators import (
    EstimandKind,
    EstimandSpec,
    cwlate,
    selection_on_gains_sign,
    unconditional_wald,
)
from cwlate.inference import EstimateReport, estimate_report
from cwlate.localpoly import Residuals, cell_discontinuities
from cwlate.policy import PolicySpec, policy_effects, policy_from_instrument
from cwlate.simulation import McConfig, compare_mse, run_monte_carlo

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ESTIMATION = 3
CELL_SEPARATOR = "|"


def _line(index: int) -> int:
    # Header is line 1.
    return int(index) + 2


def _numeric_column(frame: pd.DataFrame, name: str) -> np.ndarray:
    column = frame[name]
    missing = column.isna()
    if missing.any():
        raise SchemaError("Missing value", field=name, line=_line(missing.idxmax()))
    if not pd.api.types.is_numeric_dtype(column):
        coerced = pd.to_numeric(column, errors="coerce")
        bad = coerced.isna()
        index = bad.idxmax()
        raise SchemaError(f"Non-numeric value '{column[index]}'", field=name, line=_line(index))
    return column.to_numpy(dtype=float)


def read_dataset(
    path: str | Path,
    y: str,
    x: str,
    z: str,
    cells: Sequence[str] = (),
    cutoff: float = 0.0,
) -> RddDataset:
    """Load an RDD sample from a CSV file with a header row.

    A single numeric cell column keeps numeric labels, so cells sort by value.
    Several cell columns are interacted into one string label joined by ``|``.
    With no cell columns every observation shares a single cell.
    """
    cells = list(cells)
    try:
        frame = pd.read_csv(
            path,
            dtype={c: str for c in cells},
            keep_default_na=True,
            float_precision="round_trip",
        )
    except FileNotFoundError:
        raise SchemaError(f"Input file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise SchemaError(f"Input file is empty: {path}") from None
    except pd.errors.ParserError as e:
        raise SchemaError(f"Could not parse {path}: {e}") from None

    for name in [y, x, z, *cells]:
        if name not in frame.columns:
            raise SchemaError("Column not found in header", field=name, line=1)
    if frame.empty:
        raise SchemaError(f"Input file has a header but no rows: {path}")

    treatment = _numeric_column(frame, x)
    not_binary = ~np.isin(treatment, (0.0, 1.0))
    if not_binary.any():
        index = int(np.argmax(not_binary))
        raise SchemaError(
            f"Treatment must be 0 or 1, got {treatment[index]!r}", field=x, line=_line(index)
        )
    for name in cells:
        missing = frame[name].isna()
        if missing.any():
            raise SchemaError("Missing value", field=name, line=_line(missing.idxmax()))
    numeric = pd.to_numeric(frame[cells[0]], errors="coerce") if len(cells) == 1 else None
    if numeric is not None and numeric.notna().all():
        cell = numeric.to_numpy(dtype=float)
    elif cells:
        label = frame[cells[0]].astype(str)
        for name in cells[1:]:
            label = label + CELL_SEPARATOR + frame[name].astype(str)
        cell = label.to_numpy(dtype=object)
    else:
        cell = np.full(len(frame), "all", dtype=object)

    data = RddDataset(
        y=_numeric_column(frame, y),
        x=treatment,
        z=_numeric_column(frame, z),
        cell=cell,
        cutoff=cutoff,
    )
    logger.info("Read %d observations in %d cells from %s", data.n, len(set(cell)), path)
    return data


def write_dataset_csv(data: RddDataset, path: str | Path) -> None:
    """Write a dataset with 17 significant digits so that reading it back is exact."""
    frame = pd.DataFrame({"y": data.y, "x": data.x, "z": data.z, "cell": data.cell})
    _atomic_write(path, frame.to_csv(index=False, float_format="%.17g"))


def _atomic_write(path: str | Path, text: str) -> None:
    if str(path) == "-":
        sys.stdout.write(text)
        return
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _flatten(row: dict[str, Any]) -> dict[str, Any]:
    flat = {}
    for key, value in row.items():
        if isinstance(value, (list, tuple)):
            flat[key] = ";".join("" if v is None else str(v) for v in value)
        elif isinstance(value, dict):
            flat[key] = json.dumps(value)
        else:
            flat[key] = value
    return flat


def _emit(payload: dict[str, Any], rows: list[dict], output: str, fmt: str) -> None:
    if fmt == "csv":
        text = pd.DataFrame([_flatten(r) for r in rows]).to_csv(index=False, float_format="%.17g")
    else:
        text = json.dumps(payload, indent=2, allow_nan=False) + "\n"
    _atomic_write(output, text)
    if output != "-":
        logger.info("Wrote %s report to %s", fmt, output)


def _float_list(text: Optional[str], name: str) -> Optional[list[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        message = f"Could not parse '{text}' as a comma-separated list"
        raise SchemaError(message, field=name) from None


def _estimands(args) -> list[EstimandSpec]:
    return [EstimandSpec.parse(text) for text in (args.estimand or ["cwlate"])]


def _kernel(args) -> KernelSpec:
    if args.kernel is None:
        return get_estimation_config().kernel
    return KernelSpec(KernelKind(args.kernel))


def _setting(value, name: str):
    return getattr(get_estimation_config(), name) if value is None else value


def _load(args) -> RddDataset:
    cells = [c.strip() for c in args.cells.split(",") if c.strip()] if args.cells else []
    return read_dataset(args.input, args.y, args.x, args.z, cells, args.cutoff)


def _selection_on_gains(data, h, kernel, min_side_count, reports) -> Optional[str]:
    by_kind = {r.estimand: r.beta_hat for r in reports}
    beta_cw = by_kind.get(EstimandKind.CWLATE.value)
    beta_u = by_kind.get(EstimandKind.UNCONDITIONAL_WALD.value)
    try:
        if beta_cw is None:
            d = cell_discontinuities(data, build_partition(data, min_side_count), 1, h, kernel)
            beta_cw = cwlate(d).beta_hat
        if beta_u is None:
            beta_u = unconditional_wald(data, 1, h, kernel, min_side_count).beta_hat
    except CwlateError as err:
        logger.debug("Selection-on-gains sign unavailable at h=%g: %s", h, err)
        return None
    return selection_on_gains_sign(beta_cw, beta_u).value


def cmd_estimate(args) -> int:
    data = _load(args)
    specs = _estimands(args)
    kernel = _kernel(args)
    level = _setting(args.level, "level")
    min_side_count = _setting(args.min_side_count, "min_side_count")
    zero_tol = get_estimation_config().zero_tol
    residuals = _setting(args.residuals and Residuals(args.residuals), "residuals")

    plans: list[tuple[EstimandSpec, float, float]] = []
    selected = {}
    if args.auto_bandwidth:
        for spec in specs:
            report = select_bandwidths(data, spec, kernel, min_side_count, zero_tol, residuals)
            selected[spec.label] = report.to_dict()
            plans.append((spec, report.h_n, report.b_n))
    else:
        grid = _float_list(args.h, "h")
        if not grid:
            raise SchemaError("Either --h or --auto-bandwidth is required", field="h")
        b_grid = _float_list(args.b, "b")
        if b_grid and len(b_grid) not in (1, len(grid)):
            raise SchemaError("--b must give one value or one per --h value", field="b")
        for k, h in enumerate(grid):
            b = h if not b_grid else b_grid[k if len(b_grid) > 1 else 0]
            plans.extend((spec, h, b) for spec in specs)

    reports: list[EstimateReport] = []
    for spec, h, b in plans:
        logger.info("Estimating %s at h=%.6g, b=%.6g", spec.label, h, b)
        reports.append(
            estimate_report(
                data,
                spec,
                h,
                b,
                kernel=kernel,
                level=level,
                zero_tol=zero_tol,
                residuals=residuals,
                min_side_count=min_side_count,
                within_bandwidth=args.within_bandwidth_pi,
            )
        )
    for h in sorted({r.h for r in reports}):
        at_h = [r for r in reports if r.h == h]
        sign = _selection_on_gains(data, h, kernel, min_side_count, at_h)
        for r in at_h:
            r.selection_on_gains = sign

    rows = [r.to_dict() for r in reports]
    payload = {
        "command": "estimate",
        "input": str(args.input),
        "cutoff": data.cutoff,
        "kernel": kernel.kind.value,
        "residuals": Residuals(residuals).value,
        "estimates": rows,
    }
    if selected:
        payload["bandwidths"] = selected
    _emit(payload, rows, args.output, args.format)
    return EXIT_OK


def cmd_bandwidth(args) -> int:
    data = _load(args)
    kernel = _kernel(args)
    min_side_count = _setting(args.min_side_count, "min_side_count")
    residuals = _setting(args.residuals and Residuals(args.residuals), "residuals")
    zero_tol = get_estimation_config().zero_tol
    rows = [
        select_bandwidths(data, spec, kernel, min_side_count, zero_tol, residuals).to_dict()
        for spec in _estimands(args)
    ]
    payload = {"command": "bandwidth", "input": str(args.input), "bandwidths": rows}
    _emit(payload, rows, args.output, args.format)
    return EXIT_OK


def _read_config(path: str) -> dict[str, Any]:
    try:
        with open(path) as f:
            values = json.load(f)
    except FileNotFoundError:
        raise SchemaError(f"Simulation config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid JSON: {e.msg}", line=e.lineno) from None
    if not isinstance(values, dict):
        raise SchemaError("Simulation config must be a JSON object", line=1)
    return values


def cmd_simulate(args) -> int:
    values = _read_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.reps is not None:
        values["reps"] = args.reps
    if args.threads is not None:
        values["threads"] = args.threads
    try:
        cfg = McConfig.from_dict(values)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"Invalid simulation config: {e}") from None
    report = run_monte_carlo(cfg)
    payload = report.to_dict()
    labels = [s.estimand for s in report.summaries]
    cw, uncond = EstimandKind.CWLATE.value, EstimandKind.UNCONDITIONAL_WALD.value
    if cw in labels and uncond in labels:
        ratio = compare_mse(report, cw, uncond)
        payload["mse_ratio"] = ratio if np.isfinite(ratio) else None
    if args.format == "csv":
        _atomic_write(args.output, report.to_frame().to_csv(index=False, float_format="%.17g"))
    else:
        _emit(payload, [], args.output, "json")
    return EXIT_OK


def cmd_policy(args) -> int:
    beta = _float_list(args.beta, "beta")
    delta_x = _float_list(args.delta_x, "delta-x")
    if beta is None or delta_x is None:
        raise SchemaError("--beta and --delta-x are required")
    if (args.b is None) == (args.p is None):
        raise SchemaError("Give exactly one of --b and --p")
    f = _float_list(args.f, "f")
    m = len(delta_x)
    if f is None:
        f = [1.0 / m] * m
    try:
        if args.b is not None:
            spec = policy_from_instrument(_float_list(args.b, "b"), f)
        else:
            spec = PolicySpec(p=_float_list(args.p, "p"), f=f)
    except ValueError as e:
        raise SchemaError(str(e)) from None
    effects = policy_effects(spec, beta, delta_x)
    row = {**effects.to_dict(), "p": spec.p.tolist(), "f": spec.f.tolist()}
    _emit({"command": "policy", **row}, [row], args.output, args.format)
    return EXIT_OK


def _add_data_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", required=True, help="CSV file with a header row")
    parser.add_argument("--y", default="y", help="Outcome column (default: y)")
    parser.add_argument("--x", default="x", help="Binary treatment column (default: x)")
    parser.add_argument("--z", default="z", help="Running variable column (default: z)")
    parser.add_argument(
        "--cells", default=None, help="Comma-separated covariate columns, interacted into cells"
    )
    parser.add_argument("--cutoff", type=float, default=0.0)
    parser.add_argument("--kernel", choices=KernelKind.values(), default=None)
    parser.add_argument(
        "--estimand",
        action="append",
        help="cwlate, average, welfare, unconditional_wald, counterfactual:<f...> "
        "or custom:<b...>; repeatable",
    )
    parser.add_argument("--min-side-count", type=int, default=None)
    parser.add_argument("--residuals", choices=Residuals.values(), default=None)


def _add_output_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--output", default="-", help="Report path, '-' for stdout")
    parser.add_argument("--format", choices=["json", "csv"], default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwlate", description="Weighted LATE estimation for fuzzy RD designs"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    estimate = sub.add_parser("estimate", help="Estimate weighted LATEs with robust CIs")
    _add_data_arguments(estimate)
    estimate.add_argument("--h", default=None, help="Main bandwidth or comma-separated grid")
    estimate.add_argument("--b", default=None, help="Bias bandwidth (default: h)")
    estimate.add_argument("--auto-bandwidth", action="store_true")
    estimate.add_argument("--level", type=float, default=None)
    estimate.add_argument(
        "--within-bandwidth-pi",
        action="store_true",
        help="Compute cell shares from observations within the bandwidth",
    )
    _add_output_arguments(estimate)
    estimate.set_defaults(handler=cmd_estimate)

    bandwidth = sub.add_parser("bandwidth", help="Select MSE-optimal bandwidths")
    _add_data_arguments(bandwidth)
    _add_output_arguments(bandwidth)
    bandwidth.set_defaults(handler=cmd_bandwidth)

    simulate = sub.add_parser("simulate", help="Run a Monte Carlo campaign")
    simulate.add_argument("--config", default=None, help="JSON file of simulation settings")
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--reps", type=int, default=None)
    simulate.add_argument("--threads", type=int, default=None)
    _add_output_arguments(simulate)
    simulate.set_defaults(handler=cmd_simulate)

    policy = sub.add_parser("policy", help="Evaluate a targeted incentive policy")
    policy.add_argument("--b", default=None, help="Instrument per cell")
    policy.add_argument("--p", default=None, help="Targeting distribution per cell")
    policy.add_argument("--f", default=None, help="Cell probabilities (default: uniform)")
    policy.add_argument("--delta-x", dest="delta_x", default=None)
    policy.add_argument("--beta", default=None)
    _add_output_arguments(policy)
    policy.set_defaults(handler=cmd_policy)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.handler(args)
    except (SchemaError, InvalidDataset, InvalidEstimand) as e:
        logger.error("Invalid input: %s", e)
        return EXIT_INPUT
    except CwlateError as e:
        logger.error("Estimation failed: %s", e)
        return EXIT_ESTIMATION
    except ValueError as e:
        # Raised by environment configuration.
        logger.error("Invalid configuration: %s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
