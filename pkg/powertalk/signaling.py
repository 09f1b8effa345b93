"""Signaling space, power deviation and binary constellation design.

A constellation is a pair of droop-parameter symbols (x^0, x^1) shared by
all units. In TDMA mode one unit signals per slot while the others stay
nominal; in FD mode every unit signals in every slot. Symbols must keep
the bus voltage and output currents inside their limits for any load in
[R_min, R_max], and the signaling must not move a unit's output power too
far from its nominal value on average.
"""

import functools
import logging
from dataclasses import dataclass
from enum import StrEnum
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq
from scipy.stats import binom

from .errors import BudgetUnreachableError, InvalidParameterError
from .grid_model import GridConfig, Symbol, steady_state_arrays

logger = logging.getLogger(__name__)

DEFAULT_QUADRATURE_ORDER = 64
DEFAULT_SWEEP_POINTS = 401
DESIGN_TOLERANCE = 1e-6

# relative slack for the closed constraint set
_BOUNDARY_SLACK = 1e-9


class Mode(StrEnum):
    TDMA = "tdma"
    FD = "fd"


@dataclass(frozen=True)
class ConstraintSet:
    """Operating limits every reachable steady state must respect."""

    V_min: float
    V_max: float
    I_max: float
    R_min: float
    R_max: float
    I_min: float = 0.0

    @classmethod
    def from_config(cls, config: GridConfig) -> "ConstraintSet":
        return cls(config.V_min, config.V_max, config.I_max, config.R_min, config.R_max)


@dataclass(frozen=True)
class Constellation:
    x0: Symbol
    x1: Symbol
    p_b: float = 0.5

    def __post_init__(self):
        if not 0 < self.p_b < 1:
            raise InvalidParameterError(f"p_b must lie in (0, 1), got {self.p_b}")

    @classmethod
    def fixed_rd(cls, v0: float, v1: float, r_d: float, p_b: float = 0.5) -> "Constellation":
        return cls(Symbol(v0, r_d), Symbol(v1, r_d), p_b)

    def symbol(self, bit: int) -> Symbol:
        return self.x1 if bit else self.x0

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(v, r_d) indexed by bit."""
        return (
            np.array([self.x0.v, self.x1.v]),
            np.array([self.x0.r_d, self.x1.r_d]),
        )


@dataclass(frozen=True)
class DeviationReport:
    delta_k: tuple[float, ...]
    delta: float
    gamma: float | None = None

    @property
    def within_budget(self) -> bool:
        return self.gamma is None or self.delta <= self.gamma


@dataclass(frozen=True, eq=False)
class LoadQuadrature:
    """Discrete load distribution: nodes with probability weights summing to 1."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform(
        cls, R_min: float, R_max: float, order: int = DEFAULT_QUADRATURE_ORDER
    ) -> "LoadQuadrature":
        """Gauss-Legendre rule for R uniform on [R_min, R_max]."""
        x, w = leggauss(order)
        mid = 0.5 * (R_min + R_max)
        half = 0.5 * (R_max - R_min)
        return cls(mid + half * x, 0.5 * w)

    @classmethod
    def for_config(cls, config: GridConfig) -> "LoadQuadrature":
        return cls.uniform(config.R_min, config.R_max)

    @classmethod
    def point(cls, r: float) -> "LoadQuadrature":
        """All probability mass at a single load."""
        return cls(np.array([float(r)]), np.array([1.0]))

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Expectation over the last axis, which must run over the nodes."""
        return np.asarray(values) @ self.weights


@dataclass(frozen=True)
class ConstraintViolation:
    r: float
    quantity: str
    value: float
    low: float
    high: float
    context: str


def _le(a: float, b: float) -> bool:
    return a <= b + _BOUNDARY_SLACK * max(1.0, abs(b))


# ---------------------------------------------------------------------------
# Feasibility predicates
# ---------------------------------------------------------------------------


def tdma_symbol_feasible(sym: Symbol, config: GridConfig) -> bool:
    """Whether ``sym`` keeps v* and i_k inside their limits in TDMA mode.

    For every signaling unit k the others stay nominal; the bounds are taken
    at the worst-case load end points.
    """
    v_n, r_n = config.nominal_arrays()
    g_n = v_n / r_n
    c_n = 1.0 / r_n
    for k in range(config.K):
        S = g_n.sum() - g_n[k]
        D = c_n.sum() - c_n[k]
        G_lo = 1.0 / config.R_min + D
        G_hi = 1.0 / config.R_max + D

        v_lower = sym.r_d * (config.V_min * G_lo - S) + config.V_min
        v_upper = sym.r_d * (config.V_max * G_hi - S) + config.V_max
        i_lower = S / G_hi
        i_upper = sym.r_d * config.I_max + config.I_max / G_lo + S / G_lo

        if not (_le(v_lower, sym.v) and _le(sym.v, v_upper)):
            return False
        if not (_le(i_lower, sym.v) and _le(sym.v, i_upper)):
            return False
    return True


def fd_constraint_checks(x0: Symbol, x1: Symbol, config: GridConfig) -> dict[str, bool]:
    """Individual FD inequalities: voltage bounds per symbol, current bounds per pair."""
    K = config.K
    checks = {}
    for name, sym in (("voltage_0", x0), ("voltage_1", x1)):
        lower = sym.r_d * config.V_min / (K * config.R_min) + config.V_min
        upper = sym.r_d * config.V_max / (K * config.R_max) + config.V_max
        checks[name] = _le(lower, sym.v) and _le(sym.v, upper)

    G0 = 1.0 / config.R_min + (K - 1) / x0.r_d
    base0 = (K - 1) * (x0.v / x0.r_d) / G0
    upper1 = config.I_max * x1.r_d + config.I_max / G0 + base0
    checks["current_1"] = _le(base0, x1.v) and _le(x1.v, upper1)

    G1 = 1.0 / config.R_max + (K - 1) / x1.r_d
    base1 = (K - 1) * (x1.v / x1.r_d) / G1
    upper0 = config.I_max * x0.r_d + config.I_max / G1 + base1
    checks["current_0"] = _le(base1, x0.v) and _le(x0.v, upper0)
    return checks


def fd_pair_feasible(x0: Symbol, x1: Symbol, config: GridConfig) -> bool:
    return all(fd_constraint_checks(x0, x1, config).values())


def constellation_feasible(
    constellation: Constellation, mode: Mode, config: GridConfig
) -> bool:
    if mode is Mode.TDMA:
        return tdma_symbol_feasible(constellation.x0, config) and tdma_symbol_feasible(
            constellation.x1, config
        )
    return fd_pair_feasible(constellation.x0, constellation.x1, config)


# ---------------------------------------------------------------------------
# Reachable steady states
# ---------------------------------------------------------------------------


def tdma_input_arrays(
    constellation: Constellation, config: GridConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Inputs for every TDMA combination, shape (K, 2, K).

    Entry [a, b] is the input vector with unit a sending bit b and the
    others nominal.
    """
    K = config.K
    v_n, r_n = config.nominal_arrays()
    v_b, r_b = constellation.arrays()
    v = np.broadcast_to(v_n, (K, 2, K)).copy()
    r_d = np.broadcast_to(r_n, (K, 2, K)).copy()
    units = np.arange(K)
    v[units, :, units] = v_b
    r_d[units, :, units] = r_b
    return v, r_d


def fd_input_arrays(constellation: Constellation, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Representative FD inputs by number of ones, shape (K + 1, K).

    Row n has units 0..n-1 at x^1 and the rest at x^0; in FD mode the bus
    voltage only depends on that count.
    """
    ones = np.arange(K)[np.newaxis, :] < np.arange(K + 1)[:, np.newaxis]
    v = np.where(ones, constellation.x1.v, constellation.x0.v)
    r_d = np.where(ones, constellation.x1.r_d, constellation.x0.r_d)
    return v, r_d


def fd_bus_table(
    constellation: Constellation, K: int, r: np.ndarray | float
) -> tuple[np.ndarray, np.ndarray]:
    """FD bus voltage and own-symbol currents as a function of the count of ones.

    Returns v_star with shape (K + 1, ...) and currents with shape
    (2, K + 1, ...) indexed by [own bit, count of ones]. Combinations that
    cannot occur (own bit 1 with no ones, own bit 0 with all ones) are NaN.
    """
    r = np.asarray(r, dtype=float)
    n1 = np.arange(K + 1).reshape((K + 1,) + (1,) * r.ndim)
    v_b, r_b = constellation.arrays()
    g = n1 * v_b[1] / r_b[1] + (K - n1) * v_b[0] / r_b[0]
    c = n1 / r_b[1] + (K - n1) / r_b[0]
    v_star = g / (1.0 / r + c)
    currents = np.stack([(v_b[b] - v_star) / r_b[b] for b in (0, 1)])
    currents[0, K] = np.nan
    currents[1, 0] = np.nan
    return v_star, currents


def _reachable(
    constellation: Constellation, mode: Mode, config: GridConfig, loads: np.ndarray
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Every reachable steady state as (context, v_star (n,), currents (n, m))."""
    states = []
    if mode is Mode.TDMA:
        v, r_d = tdma_input_arrays(constellation, config)
        v_star, currents = steady_state_arrays(
            v[:, :, np.newaxis, :], r_d[:, :, np.newaxis, :], loads
        )
        for a in range(config.K):
            for b in (0, 1):
                states.append((f"unit {a} sends {b}", v_star[a, b], currents[a, b]))
    else:
        v_star, currents = fd_bus_table(constellation, config.K, loads)
        for n1 in range(config.K + 1):
            own = [currents[b, n1] for b in (0, 1) if not np.isnan(currents[b, n1]).any()]
            states.append((f"{n1} units send 1", v_star[n1], np.stack(own, axis=-1)))
    return states


def _outside(x: np.ndarray, low: float, high: float) -> np.ndarray:
    slack_lo = _BOUNDARY_SLACK * max(1.0, abs(low))
    slack_hi = _BOUNDARY_SLACK * max(1.0, abs(high))
    return (x < low - slack_lo) | (x > high + slack_hi)


def constraint_violations(
    constellation: Constellation,
    mode: Mode,
    config: GridConfig,
    n_loads: int = DEFAULT_SWEEP_POINTS,
) -> list[ConstraintViolation]:
    """Sweep the load range and report every reachable state outside the limits."""
    limits = ConstraintSet.from_config(config)
    loads = np.linspace(config.R_min, config.R_max, n_loads)
    found = []
    for context, v_star, currents in _reachable(constellation, mode, config, loads):
        for j in np.flatnonzero(_outside(v_star, limits.V_min, limits.V_max)):
            found.append(ConstraintViolation(
                float(loads[j]), "v_star", float(v_star[j]), limits.V_min, limits.V_max, context
            ))
        for j, m in zip(*np.nonzero(_outside(currents, limits.I_min, limits.I_max))):
            found.append(ConstraintViolation(
                float(loads[j]), "current", float(currents[j, m]), limits.I_min, limits.I_max,
                context,
            ))
    return found


def power_ordering_holds(
    constellation: Constellation,
    mode: Mode,
    config: GridConfig,
    n_loads: int = DEFAULT_SWEEP_POINTS,
) -> bool:
    """Whether sending 1 always yields more output power than sending 0.

    TDMA additionally requires the signaling unit's nominal power to lie
    between the two (inclusive); FD compares the two symbols at every
    Hamming weight of the others.
    """
    loads = np.linspace(config.R_min, config.R_max, n_loads)
    if mode is Mode.TDMA:
        v, r_d = tdma_input_arrays(constellation, config)
        v_star, currents = steady_state_arrays(
            v[:, :, np.newaxis, :], r_d[:, :, np.newaxis, :], loads
        )
        v_n, r_n = config.nominal_arrays()
        vn_star, i_n = steady_state_arrays(v_n, r_n, loads)
        for a in range(config.K):
            p0 = v_star[a, 0] * currents[a, 0, :, a]
            p1 = v_star[a, 1] * currents[a, 1, :, a]
            pn = vn_star * i_n[:, a]
            if not (np.all(p1 > p0) and np.all(p1 >= pn * (1 - _BOUNDARY_SLACK))
                    and np.all(pn >= p0 * (1 - _BOUNDARY_SLACK))):
                return False
        return True

    v_star, currents = fd_bus_table(constellation, config.K, loads)
    for w in range(config.K):
        p0 = v_star[w] * currents[0, w]
        p1 = v_star[w + 1] * currents[1, w + 1]
        if not np.all(p1 > p0):
            return False
    return True


def signaling_region(
    v0: float,
    mode: Mode,
    config: GridConfig,
    v1_values: Sequence[float],
    r_d: float | None = None,
) -> np.ndarray:
    """Feasibility of the fixed-r_d pair ((v0, r_d), (v1, r_d)) for each v1."""
    r_d = config.nominal_symbols[0].r_d if r_d is None else r_d
    x0 = Symbol(v0, r_d)
    return np.array([
        constellation_feasible(Constellation(x0, Symbol(float(v1), r_d)), mode, config)
        for v1 in v1_values
    ])


# ---------------------------------------------------------------------------
# Power deviation
# ---------------------------------------------------------------------------


def _nominal_powers(config: GridConfig, loads: LoadQuadrature) -> np.ndarray:
    """Nominal output powers, shape (K, n_nodes)."""
    v_n, r_n = config.nominal_arrays()
    v_star, currents = steady_state_arrays(v_n, r_n, loads.nodes)
    return (v_star[:, np.newaxis] * currents).T


def _relative_rms(powers: np.ndarray, nominal: np.ndarray, loads: LoadQuadrature) -> np.ndarray:
    """sqrt(E[(P - P^n)^2]) / E[P^n] over the trailing node axis."""
    return np.sqrt(loads.expect((powers - nominal) ** 2)) / loads.expect(nominal)


def relative_power_deviation(
    inputs: Sequence[Symbol], config: GridConfig, loads: LoadQuadrature | None = None
) -> np.ndarray:
    """Per-unit relative RMS power deviation from nominal for one input vector."""
    if len(inputs) != config.K:
        raise InvalidParameterError(f"Expected {config.K} input symbols, got {len(inputs)}")
    loads = loads or LoadQuadrature.for_config(config)
    v = np.array([s.v for s in inputs])
    r_d = np.array([s.r_d for s in inputs])
    v_star, currents = steady_state_arrays(v, r_d, loads.nodes)
    powers = (v_star[:, np.newaxis] * currents).T
    return _relative_rms(powers, _nominal_powers(config, loads), loads)


def average_deviation(
    constellation: Constellation,
    mode: Mode,
    config: GridConfig,
    loads: LoadQuadrature | None = None,
    gamma: float | None = None,
) -> DeviationReport:
    """Relative power deviation averaged over the mode's input combinations."""
    loads = loads or LoadQuadrature.for_config(config)
    K = config.K
    p_b = constellation.p_b
    nominal = _nominal_powers(config, loads)

    if mode is Mode.TDMA:
        v, r_d = tdma_input_arrays(constellation, config)
        v_star, currents = steady_state_arrays(
            v[:, :, np.newaxis, :], r_d[:, :, np.newaxis, :], loads.nodes
        )
        # (active, bit, unit, node)
        powers = np.swapaxes(v_star[..., np.newaxis] * currents, -1, -2)
        deltas = _relative_rms(powers, nominal, loads)
        delta_k = ((1 - p_b) * deltas[:, 0] + p_b * deltas[:, 1]).mean(axis=0)
    else:
        v_star, currents = fd_bus_table(constellation, K, loads.nodes)
        weights = binom.pmf(np.arange(K), K - 1, p_b)
        delta_k = np.zeros(K)
        for b, p_own in ((0, 1 - p_b), (1, p_b)):
            for w in range(K):
                n1 = b + w
                powers = v_star[n1] * currents[b, n1]
                delta_k += p_own * weights[w] * _relative_rms(
                    powers[np.newaxis, :], nominal, loads
                )

    return DeviationReport(
        tuple(float(d) for d in delta_k), float(delta_k.mean()), gamma
    )


# ---------------------------------------------------------------------------
# Constellation design
# ---------------------------------------------------------------------------


def _design_feasible(constellation: Constellation, mode: Mode, config: GridConfig) -> bool:
    return constellation_feasible(constellation, mode, config) and not constraint_violations(
        constellation, mode, config
    )


def design_fixed_rd_constellation(
    gamma: float,
    mode: Mode,
    config: GridConfig,
    anchor: float | None = None,
    p_b: float = 0.5,
    tolerance: float = DESIGN_TOLERANCE,
) -> Constellation:
    """Fixed-r_d pair (v0, r_d^n), (v1, r_d^n) with v1 > v0 and deviation gamma.

    ``anchor`` defaults to the nominal reference voltage of unit 0. The
    largest feasible v1 is located first, then v1 is solved for by bracketed
    root finding on the deviation.
    """
    if not gamma > 0:
        raise InvalidParameterError(f"gamma must be positive, got {gamma}")
    r_d = config.nominal_symbols[0].r_d
    v0 = config.nominal_symbols[0].v if anchor is None else float(anchor)
    x0 = Symbol(v0, r_d)

    def pair(v1: float) -> Constellation:
        return Constellation(x0, Symbol(v1, r_d), p_b)

    if not _design_feasible(pair(v0), mode, config):
        raise InvalidParameterError(f"Anchor {x0} is not feasible in {mode} mode for K={config.K}")

    step = 1.0
    while _design_feasible(pair(v0 + step), mode, config):
        step *= 2.0
        if step > config.V_max:
            raise InvalidParameterError("Signaling space is unbounded for this configuration")
    lo, hi = v0, v0 + step
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _design_feasible(pair(mid), mode, config):
            lo = mid
        else:
            hi = mid
    v_edge = lo

    def excess(v1: float) -> float:
        return average_deviation(pair(v1), mode, config).delta - gamma

    start = excess(v0)
    if start > 0:
        raise BudgetUnreachableError(
            f"Anchor {x0} already deviates by {start + gamma:.6g} > gamma={gamma}"
        )
    edge = excess(v_edge)
    if edge < -tolerance:
        raise BudgetUnreachableError(
            f"gamma={gamma} unreachable in {mode} mode for K={config.K}: "
            f"largest feasible v1={v_edge:.6f} V gives delta={edge + gamma:.6g}"
        )
    if edge <= 0:
        v1 = v_edge
    else:
        v1 = brentq(excess, v0, v_edge, xtol=1e-12)

    logger.debug(f"Designed {mode} constellation for K={config.K}, gamma={gamma}: v1={v1:.6f} V")
    return pair(float(v1))


@functools.lru_cache(maxsize=128)
def cached_constellation(
    gamma: float, mode: Mode, config: GridConfig, anchor: float | None = None, p_b: float = 0.5
) -> Constellation:
    """Memoised ``design_fixed_rd_constellation`` for sweeps over K and lambda."""
    return design_fixed_rd_constellation(gamma, mode, config, anchor, p_b)
