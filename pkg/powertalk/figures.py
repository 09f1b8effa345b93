"""Data tables behind the evaluation figures.

Each producer takes an ExperimentSpec and returns a pandas DataFrame; CSV
files start with a ``# `` comment line naming the figure. Sweep cells fan out
over a thread pool and come back in submission order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from .config import ExperimentSpec
from .detection import analytic_error_probability, build_detection_space, fd_boundaries, tdma_boundary
from .errors import BudgetUnreachableError, InvalidParameterError
from .grid_model import GridConfig
from .mac_coding import MAX_FD_UNITS, stable_rate
from .protocol import (
    Variant,
    change_probability,
    eta_periodic,
    eta_tracker,
    optimal_B,
    reception_rate,
)
from .signaling import (
    Constellation,
    Mode,
    average_deviation,
    cached_constellation,
    constellation_feasible,
)

logger = logging.getLogger(__name__)

# per-figure defaults, applied beneath presets, files and flags
FIGURE_DEFAULTS: dict[str, dict[str, Any]] = {
    "fig6": {"p_b": 0.5},
    "fig7": {"gamma": 0.2, "K": 3},
    "fig8": {"gamma": 0.05, "T_s": 1e-3},
    "fig11": {"gamma": 0.1},
    "fig12": {"gamma": 0.1},
    "fig13": {"gamma": 0.1},
    "fig14": {"gamma": 0.1},
    "fig15": {"gamma": 0.1},
}

DEFAULT_LAMBDAS = (1e-4, 1e-3, 1e-2)
DEFAULT_EVAL_K = tuple(range(2, MAX_FD_UNITS + 1))
FIG6_GRID = np.round(np.linspace(395.0, 405.0, 21), 6)
FIG8_K = {Mode.TDMA: tuple(range(2, 26)), Mode.FD: tuple(range(2, 13))}
FIG11_B = tuple(int(b) for b in np.unique(np.round(np.logspace(0, 5, 61))))
FIG13_LAMBDAS = tuple(float(x) for x in np.logspace(-5, -1, 41))

MODES = (Mode.TDMA, Mode.FD)


def _fan_out(fn: Callable, cells: list, workers: int) -> list:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(fn, cells))


def _rows(results: list) -> list[dict]:
    return [row for rows in results for row in rows]


def _supported(mode: Mode, K: int) -> bool:
    return mode is Mode.TDMA or K <= MAX_FD_UNITS


def _reachable_constellation(
    spec: ExperimentSpec, grid: GridConfig, mode: Mode, attempts: int = 8
) -> tuple[Constellation, float]:
    """Design at spec.gamma, halving the budget while it is out of reach."""
    gamma = spec.gamma
    for _ in range(attempts):
        try:
            return cached_constellation(gamma, mode, grid, spec.anchor, spec.p_b), gamma
        except BudgetUnreachableError as e:
            logger.warning(f"{mode} K={grid.K}: {e}; retrying with gamma={gamma / 2:g}")
            gamma /= 2
    raise BudgetUnreachableError(f"No reachable budget down to gamma={gamma:g} for {mode} K={grid.K}")


def fig6(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Signaling space and average deviation over a (v0, v1) grid."""
    Ks = spec.K_values or (2, 3, 4)
    r_d = spec.grid.nominal_symbols[0].r_d

    def cell(args):
        mode, K = args
        grid = spec.grid.with_units(K)
        rows = []
        for v0 in FIG6_GRID:
            for v1 in FIG6_GRID:
                const = Constellation.fixed_rd(float(v0), float(v1), r_d, spec.p_b)
                feasible = constellation_feasible(const, mode, grid)
                delta = average_deviation(const, mode, grid).delta if feasible else np.nan
                rows.append({
                    "mode": str(mode), "K": K, "v0": float(v0), "v1": float(v1),
                    "feasible": feasible, "delta": delta,
                })
        return rows

    return pd.DataFrame(_rows(_fan_out(cell, [(m, K) for m in MODES for K in Ks], workers)))


def fig7(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Detection-space points and decision lines of unit 0."""
    grid = spec.grid
    loads = spec.r_values or (grid.R_min, 0.5 * (grid.R_min + grid.R_max), grid.R_max)

    def cell(args):
        mode, r = args
        const, gamma = _reachable_constellation(spec, grid, mode)
        space = build_detection_space(grid, const, mode, 0, r)
        rows = []
        for p in space.points:
            rows.append({
                "mode": str(mode), "gamma": gamma, "r": r, "kind": "point", "label": p.label,
                "own_bit": p.own_bit, "transmitter": p.transmitter,
                "v_star": p.v_star, "i_k": p.i_k, "power": p.power,
                "slope": np.nan, "intercept": np.nan,
            })
        if mode is Mode.TDMA:
            lines = [(j, None, tdma_boundary(space.for_transmitter(j))) for j in space.transmitters]
        else:
            lines = [
                (None, b, fd_boundaries(space, b).boundary(w))
                for b in (0, 1) for w in range(grid.K - 1)
            ]
        for transmitter, own_bit, line in lines:
            rows.append({
                "mode": str(mode), "gamma": gamma, "r": r, "kind": "boundary", "label": line.upper,
                "own_bit": own_bit, "transmitter": transmitter,
                "v_star": line.m_v, "i_k": line.m_i, "power": np.nan,
                "slope": line.slope, "intercept": line.intercept,
            })
        return rows

    return pd.DataFrame(_rows(_fan_out(cell, [(m, float(r)) for m in MODES for r in loads], workers)))


def fig8(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Analytic probability of correct detection against K."""
    cells = [
        (mode, K)
        for mode in MODES
        for K in (spec.K_values or FIG8_K[mode])
        if _supported(mode, K)
    ]

    def cell(args):
        mode, K = args
        grid = spec.grid.with_units(K)
        try:
            const = spec.constellation(grid, mode)
        except (BudgetUnreachableError, InvalidParameterError) as e:
            logger.warning(f"fig8: skipping {mode} K={K}: {e}")
            return []
        report = analytic_error_probability(grid, const, mode)
        return [{
            "mode": str(mode), "K": K, "gamma": spec.gamma, "v1": const.x1.v,
            "P_D": report.P_D, "P_e_max": max(report.per_unit),
        }]

    return pd.DataFrame(_rows(_fan_out(cell, cells, workers)))


def fig11(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Periodic-training rate against B."""
    Ks = spec.K_values or (10, 15)
    lambdas = spec.lambda_values or DEFAULT_LAMBDAS
    B = np.array(spec.B_values or FIG11_B)
    rows = []
    for mode in MODES:
        for K in (K for K in Ks if _supported(mode, K)):
            for lam in lambdas:
                eta = eta_periodic(mode, K, spec.M, B, change_probability(lam), spec.simultaneous)
                for b, e in zip(B, np.atleast_1d(eta)):
                    rows.append({
                        "mode": str(mode), "K": K, "lambda": lam, "B": int(b),
                        "eta": float(e), "eta_stable": stable_rate(mode, K),
                    })
    return pd.DataFrame(rows)


def fig12(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Rate-optimal B against K and lambda."""
    Ks = spec.K_values or DEFAULT_EVAL_K
    lambdas = spec.lambda_values or DEFAULT_LAMBDAS

    def cell(args):
        mode, K, lam = args
        p = change_probability(lam)
        B = optimal_B(mode, K, spec.M, p, spec.simultaneous)
        eta = eta_periodic(mode, K, spec.M, B, p, spec.simultaneous)
        return [{"mode": str(mode), "K": K, "lambda": lam, "B_opt": B, "eta": eta}]

    cells = [(m, K, lam) for m in MODES for K in Ks for lam in lambdas if _supported(m, K)]
    return pd.DataFrame(_rows(_fan_out(cell, cells, workers)))


def fig13(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Tracker rate against lambda."""
    Ks = spec.K_values or (10, 15)
    lambdas = spec.lambda_values or FIG13_LAMBDAS
    rows = []
    for mode in MODES:
        for K in (K for K in Ks if _supported(mode, K)):
            for lam in lambdas:
                rows.append({
                    "mode": str(mode), "K": K, "lambda": lam, "L_BS": spec.L_BS,
                    "eta": eta_tracker(mode, K, spec.M, spec.L_BS, change_probability(lam), spec.simultaneous),
                })
    return pd.DataFrame(rows)


def _rates_against_K(spec: ExperimentSpec, workers: int) -> pd.DataFrame:
    Ks = spec.K_values or DEFAULT_EVAL_K
    lambdas = spec.lambda_values or (spec.lam,)

    def cell(args):
        variant, mode, K, lam = args
        p = change_probability(lam)
        if variant is Variant.PERIODIC:
            B = optimal_B(mode, K, spec.M, p, spec.simultaneous)
            eta = eta_periodic(mode, K, spec.M, B, p, spec.simultaneous)
        else:
            B = None
            eta = eta_tracker(mode, K, spec.M, spec.L_BS, p, spec.simultaneous)
        return [{
            "variant": str(variant), "mode": str(mode), "K": K, "lambda": lam, "B": B,
            "eta": eta, "mu": reception_rate(eta, K),
        }]

    cells = [
        (variant, mode, K, lam)
        for variant in Variant
        for mode in MODES
        for K in Ks
        for lam in lambdas
        if _supported(mode, K)
    ]
    return pd.DataFrame(_rows(_fan_out(cell, cells, workers)))


def fig14(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Net transmission rate per unit against K."""
    return _rates_against_K(spec, workers).drop(columns="mu")


def fig15(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """Net reception rate per unit against K."""
    return _rates_against_K(spec, workers).drop(columns="eta")


FIGURES: dict[str, tuple[str, Callable[[ExperimentSpec, int], pd.DataFrame]]] = {
    "fig6": ("signaling space and average power deviation", fig6),
    "fig7": ("detection space of unit 0", fig7),
    "fig8": ("probability of correct detection vs K", fig8),
    "fig11": ("periodic training: eta vs B", fig11),
    "fig12": ("periodic training: optimal B", fig12),
    "fig13": ("load change tracker: eta vs lambda", fig13),
    "fig14": ("FD vs TDMA: net transmission rate per unit vs K", fig14),
    "fig15": ("FD vs TDMA: net reception rate per unit vs K", fig15),
}


def figure_table(name: str, spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    if name not in FIGURES:
        raise InvalidParameterError(f"Unknown figure {name!r} (available: {', '.join(FIGURES)})")
    title, producer = FIGURES[name]
    logger.info(f"Computing {name}: {title}")
    return producer(spec, workers)


def write_table(table: pd.DataFrame, path: str | Path, comment: str) -> Path:
    """CSV with a leading ``# comment`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# {comment}\n")
        table.to_csv(f, index=False)
    logger.info(f"Wrote {len(table)} rows to {path}")
    return path


def read_table(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
