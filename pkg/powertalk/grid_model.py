"""Steady-state model of a single-bus DC microgrid under droop control.

Every converter k follows the droop law v* = v_k - r_dk * i_k and feeds a
common resistive load r. Within one signaling slot the grid is assumed to
settle, so a slot is fully described by the bus voltage v* and the output
currents i_k. Observations add independent Gaussian measurement noise, and
the load changes at slot boundaries following a Poisson process.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InvalidParameterError

logger = logging.getLogger(__name__)

# Reference grid (rated 400 V units, 50-250 ohm load)
DEFAULT_K = 2
DEFAULT_V_MIN = 390.0
DEFAULT_V_MAX = 400.0
DEFAULT_I_MAX = 5.0
DEFAULT_R_MIN = 50.0
DEFAULT_R_MAX = 250.0
DEFAULT_V_NOMINAL = 400.0
DEFAULT_R_D_NOMINAL = 2.0
DEFAULT_SIGMA = 0.001
DEFAULT_T_S = 10e-3
DEFAULT_F_O = 10e3

GRID_KEYS = (
    "K", "V_min", "V_max", "I_max", "R_min", "R_max",
    "v_n", "r_d_n", "sigma_v", "sigma_i", "T_s", "f_o",
)


@dataclass(frozen=True)
class Symbol:
    """A droop-parameter pair (reference voltage, virtual resistance)."""

    v: float
    r_d: float

    def __post_init__(self):
        if not math.isfinite(self.v):
            raise InvalidParameterError(f"Symbol voltage must be finite, got {self.v}")
        if not (math.isfinite(self.r_d) and self.r_d > 0):
            raise InvalidParameterError(f"Virtual resistance must be positive, got {self.r_d}")

    def __str__(self) -> str:
        return f"({self.v:g} V, {self.r_d:g} ohm)"


@dataclass(frozen=True)
class GridConfig:
    """Microgrid parameters: units, nominal droop settings, ratings, load range, noise.

    An empty ``nominal_symbols`` means K identical units at the reference
    nominal point.
    """

    K: int = DEFAULT_K
    nominal_symbols: tuple[Symbol, ...] = ()
    V_min: float = DEFAULT_V_MIN
    V_max: float = DEFAULT_V_MAX
    I_max: float = DEFAULT_I_MAX
    R_min: float = DEFAULT_R_MIN
    R_max: float = DEFAULT_R_MAX
    sigma_v: float = DEFAULT_SIGMA
    sigma_i: float = DEFAULT_SIGMA
    T_s: float = DEFAULT_T_S
    f_o: float = DEFAULT_F_O

    def __post_init__(self):
        if isinstance(self.K, bool) or not isinstance(self.K, int) or self.K < 1:
            raise InvalidParameterError(f"K must be a positive integer, got {self.K!r}")
        if not 0 < self.V_min < self.V_max:
            raise InvalidParameterError(
                f"Voltage limits must satisfy 0 < V_min < V_max, got [{self.V_min}, {self.V_max}]"
            )
        if not 0 < self.R_min <= self.R_max:
            raise InvalidParameterError(
                f"Load range must satisfy 0 < R_min <= R_max, got [{self.R_min}, {self.R_max}]"
            )
        if not self.I_max > 0:
            raise InvalidParameterError(f"I_max must be positive, got {self.I_max}")
        if not (self.sigma_v >= 0 and self.sigma_i >= 0):
            raise InvalidParameterError(
                f"Noise deviations must be non-negative, got ({self.sigma_v}, {self.sigma_i})"
            )
        if not (self.T_s > 0 and self.f_o > 0):
            raise InvalidParameterError(f"T_s and f_o must be positive, got ({self.T_s}, {self.f_o})")

        symbols = tuple(self.nominal_symbols)
        if not symbols:
            symbols = (Symbol(DEFAULT_V_NOMINAL, DEFAULT_R_D_NOMINAL),) * self.K
        if len(symbols) != self.K:
            raise InvalidParameterError(
                f"Expected {self.K} nominal symbols, got {len(symbols)}"
            )
        object.__setattr__(self, "nominal_symbols", symbols)

    @classmethod
    def table1(cls, K: int = DEFAULT_K, **overrides) -> "GridConfig":
        """Reference configuration with nominal slopes derived from the ratings.

        r_d^n = (v^n - V_min) / I_max, i.e. every unit reaches its current
        rating exactly when the bus sags to V_min (proportional sharing).
        """
        return cls.from_mapping({"K": K, **overrides})

    @property
    def homogeneous(self) -> bool:
        return len(set(self.nominal_symbols)) == 1

    def with_units(self, K: int) -> "GridConfig":
        """Same grid with K units; only valid for homogeneous nominal settings."""
        if K == self.K:
            return self
        if not self.homogeneous:
            raise InvalidParameterError(
                "Cannot resize a grid with heterogeneous nominal symbols"
            )
        return dataclasses.replace(
            self, K=K, nominal_symbols=(self.nominal_symbols[0],) * K
        )

    def replace(self, **changes) -> "GridConfig":
        return dataclasses.replace(self, **changes)

    def nominal_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Nominal (v, r_d) as two length-K arrays."""
        v = np.array([s.v for s in self.nominal_symbols])
        r_d = np.array([s.r_d for s in self.nominal_symbols])
        return v, r_d

    def to_mapping(self) -> dict[str, Any]:
        """Flat key-value form; homogeneous nominal settings collapse to scalars."""
        v, r_d = self.nominal_arrays()
        if self.homogeneous:
            v_n: Any = float(v[0])
            r_d_n: Any = float(r_d[0])
        else:
            v_n = [float(x) for x in v]
            r_d_n = [float(x) for x in r_d]
        return {
            "K": self.K,
            "V_min": self.V_min,
            "V_max": self.V_max,
            "I_max": self.I_max,
            "R_min": self.R_min,
            "R_max": self.R_max,
            "v_n": v_n,
            "r_d_n": r_d_n,
            "sigma_v": self.sigma_v,
            "sigma_i": self.sigma_i,
            "T_s": self.T_s,
            "f_o": self.f_o,
        }

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "GridConfig":
        """Build from flat keys; missing keys take reference values.

        Missing ``r_d_n`` is derived from the ratings. Unknown keys are
        rejected.
        """
        unknown = sorted(set(mapping) - set(GRID_KEYS))
        if unknown:
            raise InvalidParameterError(f"Unknown grid keys: {', '.join(unknown)}")

        K = mapping.get("K", DEFAULT_K)
        V_min = float(mapping.get("V_min", DEFAULT_V_MIN))
        I_max = float(mapping.get("I_max", DEFAULT_I_MAX))
        v_n = _per_unit(mapping.get("v_n", DEFAULT_V_NOMINAL), K, "v_n")
        if "r_d_n" in mapping:
            r_d_n = _per_unit(mapping["r_d_n"], K, "r_d_n")
        else:
            r_d_n = [(v - V_min) / I_max for v in v_n]
            logger.debug(f"Derived nominal droop slopes from ratings: {r_d_n}")

        return cls(
            K=K,
            nominal_symbols=tuple(Symbol(v, r) for v, r in zip(v_n, r_d_n)),
            V_min=V_min,
            V_max=float(mapping.get("V_max", DEFAULT_V_MAX)),
            I_max=I_max,
            R_min=float(mapping.get("R_min", DEFAULT_R_MIN)),
            R_max=float(mapping.get("R_max", DEFAULT_R_MAX)),
            sigma_v=float(mapping.get("sigma_v", DEFAULT_SIGMA)),
            sigma_i=float(mapping.get("sigma_i", DEFAULT_SIGMA)),
            T_s=float(mapping.get("T_s", DEFAULT_T_S)),
            f_o=float(mapping.get("f_o", DEFAULT_F_O)),
        )


def _per_unit(value: Any, K: int, key: str) -> list[float]:
    if isinstance(value, (list, tuple)):
        if len(value) != K:
            raise InvalidParameterError(f"{key} lists {len(value)} values for K={K}")
        return [float(x) for x in value]
    return [float(value)] * K


@dataclass(frozen=True, eq=False)
class SteadyState:
    """Bus voltage, per-unit currents and powers for one input vector and load."""

    v_star: float
    currents: np.ndarray
    powers: np.ndarray
    load: float

    def __post_init__(self):
        self.currents.flags.writeable = False
        self.powers.flags.writeable = False


@dataclass(frozen=True)
class Observation:
    """Noisy local measurement (bus voltage, own output current)."""

    v_tilde: float
    i_tilde: float


class LoadChange(NamedTuple):
    slot: int
    r: float


@dataclass(frozen=True)
class LoadProcess:
    """Poisson load changes; a changed slot draws r uniformly on [R_min, R_max]."""

    lam: float
    R_min: float = DEFAULT_R_MIN
    R_max: float = DEFAULT_R_MAX

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise InvalidParameterError(f"Load change intensity must be >= 0, got {self.lam}")
        if not 0 < self.R_min <= self.R_max:
            raise InvalidParameterError(f"Invalid load range [{self.R_min}, {self.R_max}]")

    @classmethod
    def from_config(cls, config: GridConfig, lam: float) -> "LoadProcess":
        return cls(lam, config.R_min, config.R_max)

    @property
    def p(self) -> float:
        """Per-slot change probability 1 - exp(-lambda)."""
        return -math.expm1(-self.lam)

    def draw(self, rng: np.random.Generator, size: int | None = None):
        return rng.uniform(self.R_min, self.R_max, size=size)


def steady_state_arrays(
    v: np.ndarray, r_d: np.ndarray, r: np.ndarray | float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised steady state.

    ``v`` and ``r_d`` have shape (..., K) and broadcast against ``r`` with
    shape (...). Returns the bus voltage (...) and currents (..., K).
    """
    v = np.asarray(v, dtype=float)
    g = 1.0 / np.asarray(r_d, dtype=float)
    r = np.asarray(r, dtype=float)
    v_star = (v * g).sum(axis=-1) / (1.0 / r + g.sum(axis=-1))
    currents = (v - np.expand_dims(v_star, -1)) * g
    return v_star, currents


def _check_inputs(config: GridConfig, inputs: Sequence[Symbol], r: float) -> None:
    if len(inputs) != config.K:
        raise InvalidParameterError(f"Expected {config.K} input symbols, got {len(inputs)}")
    if not (math.isfinite(r) and r > 0):
        raise InvalidParameterError(f"Load resistance must be positive, got {r}")


def solve_steady_state(config: GridConfig, inputs: Sequence[Symbol], r: float) -> SteadyState:
    """Closed-form bus voltage and currents with negligible feeder resistance."""
    _check_inputs(config, inputs, r)
    v = np.array([s.v for s in inputs])
    r_d = np.array([s.r_d for s in inputs])
    v_star, currents = steady_state_arrays(v, r_d, r)
    v_star = float(v_star)
    return SteadyState(v_star, currents, v_star * currents, float(r))


def solve_with_feeders(
    config: GridConfig, inputs: Sequence[Symbol], r: float, feeder: Sequence[float]
) -> SteadyState:
    """Closed-form steady state with a series feeder resistance per unit.

    Each unit then behaves as a source behind r_dk + r_lk; ``v_star`` is the
    load-side bus voltage.
    """
    _check_inputs(config, inputs, r)
    feeder = np.asarray(feeder, dtype=float)
    if feeder.shape != (config.K,) or np.any(feeder < 0):
        raise InvalidParameterError("Feeder resistances must be K non-negative values")
    v = np.array([s.v for s in inputs])
    r_d = np.array([s.r_d for s in inputs])
    v_star, currents = steady_state_arrays(v, r_d + feeder, r)
    v_star = float(v_star)
    return SteadyState(v_star, currents, v_star * currents, float(r))


def nodal_solve(
    config: GridConfig,
    inputs: Sequence[Symbol],
    r: float,
    feeder: Sequence[float] | None = None,
) -> SteadyState:
    """Steady state from the full Kirchhoff nodal system.

    Unknowns are the K converter terminal voltages, the bus voltage and one
    branch current for every zero-resistance feeder (modified nodal
    analysis). Converters enter as Norton equivalents of v_k behind r_dk.
    Powers are taken at the converter terminals.
    """
    _check_inputs(config, inputs, r)
    K = config.K
    feeder = np.zeros(K) if feeder is None else np.asarray(feeder, dtype=float)
    if feeder.shape != (K,) or np.any(feeder < 0):
        raise InvalidParameterError("Feeder resistances must be K non-negative values")

    shorted = np.flatnonzero(feeder == 0)
    bus = K
    n = K + 1 + shorted.size
    A = np.zeros((n, n))
    z = np.zeros(n)

    for k, sym in enumerate(inputs):
        A[k, k] += 1.0 / sym.r_d
        z[k] += sym.v / sym.r_d
        if feeder[k] > 0:
            g = 1.0 / feeder[k]
            A[k, k] += g
            A[bus, bus] += g
            A[k, bus] -= g
            A[bus, k] -= g
    A[bus, bus] += 1.0 / r

    for row, k in enumerate(shorted, start=K + 1):
        # branch current j flows from terminal k into the bus
        A[k, row] += 1.0
        A[bus, row] -= 1.0
        A[row, k] = 1.0
        A[row, bus] = -1.0

    x = np.linalg.solve(A, z)
    terminals = x[:K]
    v = np.array([s.v for s in inputs])
    r_d = np.array([s.r_d for s in inputs])
    currents = (v - terminals) / r_d
    return SteadyState(float(x[bus]), currents, terminals * currents, float(r))


def observe(
    state: SteadyState, unit: int, config: GridConfig, rng: np.random.Generator
) -> Observation:
    """Local measurement at ``unit``: (v* + z_v, i_k + z_i)."""
    if not 0 <= unit < len(state.currents):
        raise InvalidParameterError(f"Unit index {unit} out of range")
    z_v, z_i = rng.standard_normal(2)
    return Observation(
        float(state.v_star + config.sigma_v * z_v),
        float(state.currents[unit] + config.sigma_i * z_i),
    )


def change_arrays(
    process: LoadProcess, n_slots: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Array form of ``sample_load_slots``: (changed slot indices, new loads)."""
    if n_slots < 1:
        raise InvalidParameterError(f"n_slots must be >= 1, got {n_slots}")
    changed = rng.random(n_slots) < process.p
    slots = np.flatnonzero(changed)
    loads = process.draw(rng, size=slots.size)
    return slots, loads


def sample_load_slots(
    process: LoadProcess, n_slots: int, rng: np.random.Generator
) -> list[LoadChange]:
    """Slots in which the load changed, with the newly drawn load."""
    slots, loads = change_arrays(process, n_slots, rng)
    return [LoadChange(int(s), float(r)) for s, r in zip(slots, loads)]
