import atexit
import concurrent.futures
import logging
import uuid
from typing import Any, List, Optional

import numpy as np
from cachetools import TTLCache
from dotenv import load_dotenv
from fastmcp import FastMCP
from fastmcp.exceptions import ToolError
from fastmcp.prompts import Prompt
from fastmcp.tools import Tool
from starlette.requests import Request
from starlette.responses import PlainTextResponse

from cwlate.bandwidth import select_bandwidths as run_bandwidth_selection
from cwlate.cli import read_dataset
from cwlate.core import RddDataset
from cwlate.cwlate_env import get_estimation_config, get_mcp_config
from cwlate.errors import CwlateError
from cwlate.estimators import EstimandSpec
from cwlate.inference import estimate_report
from cwlate.policy import PolicySpec, policy_effects, policy_from_instrument
from cwlate.simulation import McConfig, run_monte_carlo

MCP_SERVER_NAME = "mcp-cwlate"

# Configure logging
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(MCP_SERVER_NAME)

ESTIMATION_EXECUTOR = concurrent.futures.ThreadPoolExecutor(max_workers=4)
atexit.register(lambda: ESTIMATION_EXECUTOR.shutdown(wait=True))

load_dotenv()

mcp = FastMCP(name=MCP_SERVER_NAME)

# Loaded datasets expire after one hour
dataset_cache: TTLCache = TTLCache(maxsize=32, ttl=3600)

CWLATE_PROMPT = """
You have tools for weighted LATE estimation in fuzzy regression discontinuity designs
with a discrete covariate.

1. Call `load_dataset` with a CSV path and the outcome, treatment, running variable and
   covariate columns. Keep the returned `dataset_token`.
2. Call `select_bandwidths` to get MSE-optimal main (h_n) and bias (b_n) bandwidths.
3. Call `estimate_wlate` with one or more estimands: cwlate, average, welfare,
   unconditional_wald, counterfactual:<f1,...> or custom:<b1,...>. Leave h empty to
   select bandwidths automatically.
4. Report beta_bc with its robust confidence interval, and list any dropped or
   flagged cells.

`policy_effects_tool` evaluates a targeting distribution p (or an instrument b) given
cell probabilities f, first stages delta_x and conditional effects beta.
"""


@mcp.custom_route("/health", methods=["GET"])
async def health_check(request: Request) -> PlainTextResponse:
    """Health check endpoint for monitoring server status."""
    try:
        get_estimation_config()
        return PlainTextResponse(f"OK - {len(dataset_cache)} datasets loaded")
    except ValueError as e:
        return PlainTextResponse(f"ERROR - Invalid configuration: {str(e)}", status_code=503)


def _dataset(token: str) -> RddDataset:
    data = dataset_cache.get(token)
    if data is None:
        raise ToolError(f"Unknown or expired dataset token: {token}")
    return data


def _run(label: str, fn, *args, **kwargs):
    """Run a computation on the executor with the configured timeout."""
    try:
        future = ESTIMATION_EXECUTOR.submit(fn, *args, **kwargs)
        timeout_secs = get_mcp_config().tool_timeout
        try:
            return future.result(timeout=timeout_secs)
        except concurrent.futures.TimeoutError:
            logger.warning(f"{label} timed out after {timeout_secs} seconds")
            future.cancel()
            raise ToolError(f"{label} timed out after {timeout_secs} seconds")
    except ToolError:
        raise
    except (CwlateError, ValueError) as e:
        logger.warning(f"{label} failed: {e}")
        raise ToolError(f"{label} failed: {str(e)}")
    except Exception as e:
        logger.error(f"Unexpected error in {label}: {str(e)}")
        raise RuntimeError(f"Unexpected error during {label}: {str(e)}")


def load_dataset(
    path: str,
    y: str = "y",
    x: str = "x",
    z: str = "z",
    cells: Optional[List[str]] = None,
    cutoff: float = 0.0,
):
    """Load an RDD sample from a CSV file and return a token for later calls."""
    logger.info(f"Loading dataset from {path}")
    data = _run("load_dataset", read_dataset, path, y, x, z, cells or [], cutoff)
    token = str(uuid.uuid4())
    dataset_cache[token] = data
    labels = [str(c) for c in np.unique(data.cell)]
    return {"dataset_token": token, "n": data.n, "cells": labels}


def _estimate(data, estimands, h, b, auto_bandwidth, level):
    config = get_estimation_config()
    kernel = config.kernel
    rows = []
    for text in estimands:
        spec = EstimandSpec.parse(text)
        spec_h, spec_b = h, b
        if auto_bandwidth or spec_h is None:
            selected = run_bandwidth_selection(
                data, spec, kernel, config.min_side_count, config.zero_tol, config.residuals
            )
            spec_h, spec_b = selected.h_n, selected.b_n
        report = estimate_report(
            data,
            spec,
            spec_h,
            spec_b,
            kernel=kernel,
            level=config.level if level is None else level,
            zero_tol=config.zero_tol,
            residuals=config.residuals,
            min_side_count=config.min_side_count,
        )
        rows.append(report.to_dict())
    return rows


def estimate_wlate(
    dataset_token: str,
    estimands: Optional[List[str]] = None,
    h: Optional[float] = None,
    b: Optional[float] = None,
    auto_bandwidth: bool = False,
    level: Optional[float] = None,
):
    """Estimate weighted LATEs with robust bias-corrected confidence intervals.

    Bandwidths are selected per estimand when h is omitted or auto_bandwidth is set.
    """
    data = _dataset(dataset_token)
    estimands = estimands or ["cwlate"]
    logger.info(f"Estimating {', '.join(estimands)} (h={h}, b={b})")
    rows = _run("estimate_wlate", _estimate, data, estimands, h, b, auto_bandwidth, level)
    return {"estimates": rows}


def select_bandwidths(dataset_token: str, estimand: str = "cwlate"):
    """Select the pilot, bias and main bandwidths for one estimand."""
    data = _dataset(dataset_token)
    config = get_estimation_config()

    def run() -> dict[str, Any]:
        return run_bandwidth_selection(
            data,
            EstimandSpec.parse(estimand),
            config.kernel,
            config.min_side_count,
            config.zero_tol,
            config.residuals,
        ).to_dict()

    return _run("select_bandwidths", run)


def policy_effects_tool(
    delta_x: List[float],
    beta: List[float],
    p: Optional[List[float]] = None,
    b: Optional[List[float]] = None,
    f: Optional[List[float]] = None,
):
    """Complier reach, average policy effect and LAPE of a targeted incentive.

    Give either a targeting distribution p or an instrument b. Cell probabilities f
    default to uniform.
    """
    if (p is None) == (b is None):
        raise ToolError("Give exactly one of p and b")
    f = f or [1.0 / len(delta_x)] * len(delta_x)

    def run() -> dict[str, Any]:
        spec = policy_from_instrument(b, f) if b is not None else PolicySpec(p=p, f=f)
        effects = policy_effects(spec, beta, delta_x)
        return {**effects.to_dict(), "p": spec.p.tolist()}

    return _run("policy_effects", run)


def run_simulation(config: dict):
    """Run a Monte Carlo campaign and return per-estimand MSE, bias and coverage."""
    try:
        cfg = McConfig.from_dict(config)
    except (TypeError, ValueError) as e:
        raise ToolError(f"Invalid simulation config: {str(e)}")
    logger.info(f"Running simulation with {cfg.reps} replications")
    return _run("run_simulation", lambda: run_monte_carlo(cfg).to_dict())


def cwlate_initial_prompt() -> str:
    return CWLATE_PROMPT


mcp.add_tool(Tool.from_function(load_dataset))
mcp.add_tool(Tool.from_function(estimate_wlate))
mcp.add_tool(Tool.from_function(select_bandwidths))
mcp.add_tool(Tool.from_function(policy_effects_tool))
mcp.add_prompt(
    Prompt.from_function(
        cwlate_initial_prompt,
        name="cwlate_initial_prompt",
        description="How to estimate weighted LATEs with these tools",
    )
)
logger.info("Estimation tools registered")

if get_mcp_config().simulation_enabled:
    mcp.add_tool(Tool.from_function(run_simulation))
    logger.info("Simulation tool registered")


# ASGI application for HTTP deployment (e.g., uvicorn cwlate.mcp_server:app)
app = mcp.http_app()


if __name__ == "__main__":
    mcp.run()
