"""Detection spaces and MAP demodulation of power talk symbols.

A receiving unit only sees its local pair (bus voltage, own output current).
Every distinguishable transmit combination maps to one expected point in
that plane; the set of points is the receiver's detection space. Under
Gaussian measurement noise the MAP regions of two neighbouring points are
separated by a straight line, so a decision reduces to checking on which side
of each line the observation falls.

TDMA receivers separate the two symbols of the unit currently signaling.
FD receivers know their own symbol and estimate the Hamming weight W of the
other units' bits; W is the number of neighbouring boundaries (W, W+1) the
observation lies above.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr
from scipy.stats import binom, norm

from .errors import InvalidParameterError
from .grid_model import GridConfig, Observation, steady_state_arrays
from .signaling import (
    Constellation,
    LoadQuadrature,
    Mode,
    fd_bus_table,
    tdma_input_arrays,
)

logger = logging.getLogger(__name__)

# normals whose cross product is below this (relative) count as parallel
_PARALLEL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Oracle:
    """Exact points from the steady-state model."""


@dataclass(frozen=True, eq=False)
class Learned:
    """Points learned as the mean of M noisy training observations each."""

    M: int
    rng: np.random.Generator
    simultaneous: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise InvalidParameterError(f"M must be >= 1, got {self.M}")


Source = Oracle | Learned


def training_length(mode: Mode, K: int, M: int = 1, simultaneous: bool = False) -> int:
    """Slots needed for every unit to learn its detection space.

    Sequential training: 2MK (TDMA) or 2MK^2 (FD). Simultaneous training,
    usable when all units are alike: 4M (TDMA) or 4KM (FD).
    """
    if K < 1 or M < 1:
        raise InvalidParameterError(f"K and M must be >= 1, got K={K}, M={M}")
    if mode is Mode.TDMA:
        return 4 * M if simultaneous else 2 * M * K
    return 4 * K * M if simultaneous else 2 * M * K * K


@dataclass(frozen=True)
class DetectionPoint:
    """Expected (v*, i_k) at a receiver for one transmit combination.

    ``label`` is the bit for TDMA points and the Hamming weight W of the
    other units' bits for FD points.
    """

    v_star: float
    i_k: float
    label: int
    prior: float
    own_bit: int | None = None
    transmitter: int | None = None

    @property
    def power(self) -> float:
        return self.v_star * self.i_k


@dataclass(frozen=True)
class DetectionSpace:
    mode: Mode
    receiver: int
    load: float
    points: tuple[DetectionPoint, ...]
    sigma_v: float
    sigma_i: float
    p_b: float
    training_slots: int = 0

    @property
    def transmitters(self) -> tuple[int, ...]:
        return tuple(sorted({p.transmitter for p in self.points if p.transmitter is not None}))

    def for_transmitter(self, transmitter: int) -> "DetectionSpace":
        """Two-point TDMA space for one signaling unit."""
        points = tuple(
            sorted((p for p in self.points if p.transmitter == transmitter), key=lambda p: p.label)
        )
        if len(points) != 2:
            raise InvalidParameterError(
                f"Receiver {self.receiver} has no TDMA points for transmitter {transmitter}"
            )
        return replace(self, points=points)

    def candidates(self, own_bit: int) -> tuple[DetectionPoint, ...]:
        """FD points for the receiver's own bit, ordered by Hamming weight."""
        return tuple(
            sorted((p for p in self.points if p.own_bit == own_bit), key=lambda p: p.label)
        )


@dataclass(frozen=True)
class DecisionBoundary:
    """Line n_i*(i - m_i) + n_v*(v - m_v) = t between two neighbouring labels.

    Observations on or above the line (score >= t) go to ``upper``.
    """

    lower: int
    upper: int
    n_i: float
    n_v: float
    m_i: float
    m_v: float
    t: float

    @property
    def slope(self) -> float:
        """dv/di of the line; infinite for a current-only rule."""
        if self.n_v == 0:
            return math.inf
        return -self.n_i / self.n_v

    @property
    def intercept(self) -> float:
        if self.n_v == 0:
            return math.nan
        return self.m_v + (self.t + self.n_i * self.m_i) / self.n_v

    @property
    def above_is_upper(self) -> bool:
        """Whether points with larger v (at fixed i) are assigned to ``upper``."""
        return self.n_v > 0

    def favours_upper(self, i_tilde, v_tilde):
        score = self.n_i * (np.asarray(i_tilde) - self.m_i) + self.n_v * (np.asarray(v_tilde) - self.m_v)
        return score >= self.t


@dataclass(frozen=True, eq=False)
class BoundarySet:
    """Stacked boundaries, last axis runs over consecutive label pairs."""

    n_i: np.ndarray
    n_v: np.ndarray
    m_i: np.ndarray
    m_v: np.ndarray
    t: np.ndarray

    def count(self, i_tilde, v_tilde) -> np.ndarray:
        """Number of boundaries each observation lies on the upper side of."""
        i = np.asarray(i_tilde)[..., np.newaxis]
        v = np.asarray(v_tilde)[..., np.newaxis]
        score = self.n_i * (i - self.m_i) + self.n_v * (v - self.m_v)
        return (score >= self.t).sum(axis=-1)

    def boundary(self, index: int) -> DecisionBoundary:
        """Single boundary from a one-dimensional set."""
        return DecisionBoundary(
            index, index + 1,
            float(self.n_i[index]), float(self.n_v[index]),
            float(self.m_i[index]), float(self.m_v[index]),
            float(self.t[index]),
        )


def boundary_terms(i_lo, v_lo, i_hi, v_hi, sigma_v: float, sigma_i: float, log_prior_ratio):
    """MAP boundary between a lower and an upper point, in centred form.

    Returns (n_i, n_v, m_i, m_v, t) for the rule
    n_i*(i - m_i) + n_v*(v - m_v) >= t -> upper, with
    n = (di * sigma_v^2, dv * sigma_i^2), m the midpoint and
    t = sigma_v^2 * sigma_i^2 * ln(prior_lo / prior_hi). One zero deviation
    leaves the exact single-axis rule; both zero falls back to the
    nearest-point rule. All arguments broadcast.
    """
    i_lo, v_lo, i_hi, v_hi = (np.asarray(x, dtype=float) for x in (i_lo, v_lo, i_hi, v_hi))
    m_i = 0.5 * (i_lo + i_hi)
    m_v = 0.5 * (v_lo + v_hi)
    if sigma_v == 0 and sigma_i == 0:
        n_i = i_hi - i_lo
        n_v = v_hi - v_lo
        t = np.zeros_like(m_i)
    else:
        var_v = sigma_v ** 2
        var_i = sigma_i ** 2
        n_i = (i_hi - i_lo) * var_v
        n_v = (v_hi - v_lo) * var_i
        t = var_v * var_i * np.asarray(log_prior_ratio, dtype=float) * np.ones_like(m_i)
    return np.broadcast_arrays(n_i, n_v, m_i, m_v, t)


def boundary_between(
    lo: DetectionPoint, hi: DetectionPoint, sigma_v: float, sigma_i: float
) -> DecisionBoundary:
    terms = boundary_terms(
        lo.i_k, lo.v_star, hi.i_k, hi.v_star, sigma_v, sigma_i,
        math.log(lo.prior) - math.log(hi.prior),
    )
    return DecisionBoundary(lo.label, hi.label, *(float(x) for x in terms))


def tdma_boundary(space: DetectionSpace, p_b: float | None = None) -> DecisionBoundary:
    if space.mode is not Mode.TDMA or len(space.points) != 2:
        raise InvalidParameterError("A TDMA decision needs a two-point TDMA space")
    p_b = space.p_b if p_b is None else p_b
    lo, hi = sorted(space.points, key=lambda p: p.label)
    return boundary_between(replace(lo, prior=1 - p_b), replace(hi, prior=p_b), space.sigma_v, space.sigma_i)


def fd_boundaries(
    space: DetectionSpace, own_bit: int, p_b: float | None = None
) -> BoundarySet:
    """K-1 boundaries between Hamming weights W and W+1 for the given own bit."""
    if space.mode is not Mode.FD:
        raise InvalidParameterError("FD boundaries need an FD detection space")
    p_b = space.p_b if p_b is None else p_b
    points = space.candidates(own_bit)
    K = len(points)
    log_prior = binom.logpmf(np.arange(K), K - 1, p_b)
    i = np.array([p.i_k for p in points])
    v = np.array([p.v_star for p in points])
    terms = boundary_terms(
        i[:-1], v[:-1], i[1:], v[1:], space.sigma_v, space.sigma_i,
        log_prior[:-1] - log_prior[1:],
    )
    return BoundarySet(*terms)


def map_decision_tdma(space: DetectionSpace, y: Observation, p_b: float | None = None) -> int:
    """MAP bit of the signaling unit; ties go to 1."""
    return int(bool(tdma_boundary(space, p_b).favours_upper(y.i_tilde, y.v_tilde)))


def map_decision_fd(
    space: DetectionSpace, y: Observation, own_bit: int, p_b: float | None = None
) -> int:
    """MAP Hamming weight of the other units' bits; ties go to the larger weight."""
    return int(fd_boundaries(space, own_bit, p_b).count(y.i_tilde, y.v_tilde))


# ---------------------------------------------------------------------------
# Building detection spaces
# ---------------------------------------------------------------------------


def tdma_points(
    config: GridConfig, constellation: Constellation, r
) -> tuple[np.ndarray, np.ndarray]:
    """Expected TDMA outputs for every (transmitter, bit).

    Returns v_star with shape (..., K, 2) and currents (..., K, 2, K), the
    last axis of currents running over receivers; ``r`` has shape (...).
    """
    v, r_d = tdma_input_arrays(constellation, config)
    r = np.asarray(r, dtype=float)
    v_star, currents = steady_state_arrays(v, r_d, r[..., np.newaxis, np.newaxis])
    return v_star, currents


def _learned_mean(
    v_star: float, i_k: float, config: GridConfig, source: Learned
) -> tuple[float, float]:
    z = source.rng.standard_normal((source.M, 2))
    v = v_star + config.sigma_v * z[:, 0]
    i = i_k + config.sigma_i * z[:, 1]
    return float(v.mean()), float(i.mean())


def build_detection_space(
    config: GridConfig,
    constellation: Constellation,
    mode: Mode,
    receiver: int,
    r: float,
    source: Source | None = None,
) -> DetectionSpace:
    """Detection space of ``receiver`` at load ``r``."""
    if not 0 <= receiver < config.K:
        raise InvalidParameterError(f"Receiver index {receiver} out of range")
    if not config.R_min <= r <= config.R_max:
        raise InvalidParameterError(f"Load {r} outside [{config.R_min}, {config.R_max}]")
    source = source or Oracle()
    p_b = constellation.p_b
    points = []

    if mode is Mode.TDMA:
        v_star, currents = tdma_points(config, constellation, r)
        for j in range(config.K):
            if j == receiver:
                continue
            for b in (0, 1):
                v, i = float(v_star[j, b]), float(currents[j, b, receiver])
                if isinstance(source, Learned):
                    v, i = _learned_mean(v, i, config, source)
                points.append(DetectionPoint(v, i, b, p_b if b else 1 - p_b, transmitter=j))
    else:
        K = config.K
        v_star, currents = fd_bus_table(constellation, K, r)
        priors = binom.pmf(np.arange(K), K - 1, p_b)
        for b in (0, 1):
            for w in range(K):
                v, i = float(v_star[b + w]), float(currents[b, b + w])
                if isinstance(source, Learned):
                    v, i = _learned_mean(v, i, config, source)
                points.append(DetectionPoint(v, i, w, float(priors[w]), own_bit=b))

    slots = 0
    if isinstance(source, Learned):
        slots = training_length(mode, config.K, source.M, source.simultaneous)
    return DetectionSpace(
        mode, receiver, float(r), tuple(points), config.sigma_v, config.sigma_i, p_b, slots
    )


# ---------------------------------------------------------------------------
# Error probabilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorReport:
    per_unit: tuple[float, ...]
    P_D: float


def _binary_errors(n_i, n_v, m_i, m_v, t, lo, hi, sigma_v, sigma_i):
    """P(decide upper | lo) and P(decide lower | hi) for stacked boundaries."""
    scale = np.sqrt((n_i * sigma_i) ** 2 + (n_v * sigma_v) ** 2)
    mu_lo = n_i * (lo[0] - m_i) + n_v * (lo[1] - m_v)
    mu_hi = n_i * (hi[0] - m_i) + n_v * (hi[1] - m_v)
    noisy = scale > 0
    safe = np.where(noisy, scale, 1.0)
    err_lo = np.where(noisy, ndtr((mu_lo - t) / safe), (mu_lo >= t).astype(float))
    err_hi = np.where(noisy, ndtr((t - mu_hi) / safe), (mu_hi < t).astype(float))
    return err_lo, err_hi


def band_probabilities(
    bounds: BoundarySet, i_true, v_true, sigma_v: float, sigma_i: float
) -> np.ndarray:
    """P(decided weight == W | true point W) for one own bit.

    ``bounds`` holds K-1 boundaries, ``i_true``/``v_true`` the K true points.
    Parallel boundaries reduce to Gaussian differences along the common
    normal; otherwise the band is integrated numerically over the current axis.
    """
    i_true = np.asarray(i_true, dtype=float)
    v_true = np.asarray(v_true, dtype=float)
    K = i_true.size
    if K == 1:
        return np.ones(1)

    norms = np.hypot(bounds.n_i, bounds.n_v)
    if np.all(norms > 0):
        u_i = bounds.n_i[0] / norms[0]
        u_v = bounds.n_v[0] / norms[0]
        cross = np.abs(bounds.n_i * u_v - bounds.n_v * u_i) / norms
        aligned = bounds.n_i * u_i + bounds.n_v * u_v > 0
        if np.all(cross <= _PARALLEL_TOLERANCE) and np.all(aligned):
            tau = (bounds.t + bounds.n_i * bounds.m_i + bounds.n_v * bounds.m_v) / norms
            tau = np.concatenate([[-np.inf], tau, [np.inf]])
            proj = u_i * i_true + u_v * v_true
            scale = math.hypot(u_i * sigma_i, u_v * sigma_v)
            if scale == 0:
                return ((proj >= tau[:-1]) & (proj < tau[1:])).astype(float)
            upper = ndtr((tau[1:] - proj) / scale)
            lower = ndtr((tau[:-1] - proj) / scale)
            return np.clip(upper - lower, 0.0, 1.0)

    if sigma_v <= 0 or sigma_i <= 0 or np.any(bounds.n_v <= 0):
        raise InvalidParameterError(
            "Non-parallel boundaries need positive noise and boundaries crossing the voltage axis"
        )

    def band(w: int) -> float:
        def integrand(i: float) -> float:
            cut = np.sort(
                bounds.m_v + (bounds.t - bounds.n_i * (i - bounds.m_i)) / bounds.n_v
            )
            hi = norm.cdf(cut[w], v_true[w], sigma_v) if w < K - 1 else 1.0
            lo = norm.cdf(cut[w - 1], v_true[w], sigma_v) if w > 0 else 0.0
            return norm.pdf(i, i_true[w], sigma_i) * (hi - lo)

        reach = 8.0 * sigma_i
        value, _ = quad(integrand, i_true[w] - reach, i_true[w] + reach, points=[i_true[w]], limit=200)
        return value

    return np.clip([band(w) for w in range(K)], 0.0, 1.0)


def space_error_probability(
    space: DetectionSpace, truth: DetectionSpace, p_b: float | None = None
) -> float:
    """Symbol error probability of decisions made with ``space`` when ``truth``
    holds the actual expected outputs (e.g. a learned space against the oracle)."""
    p_b = space.p_b if p_b is None else p_b
    if space.mode is Mode.TDMA:
        errors = []
        for j in space.transmitters:
            boundary = tdma_boundary(space.for_transmitter(j), p_b)
            s0, s1 = truth.for_transmitter(j).points
            err_lo, err_hi = _binary_errors(
                boundary.n_i, boundary.n_v, boundary.m_i, boundary.m_v, boundary.t,
                (s0.i_k, s0.v_star), (s1.i_k, s1.v_star), space.sigma_v, space.sigma_i,
            )
            errors.append((1 - p_b) * float(err_lo) + p_b * float(err_hi))
        return float(np.mean(errors))

    total = 0.0
    for b, p_own in ((0, 1 - p_b), (1, p_b)):
        bounds = fd_boundaries(space, b, p_b)
        points = truth.candidates(b)
        correct = band_probabilities(
            bounds, [p.i_k for p in points], [p.v_star for p in points], space.sigma_v, space.sigma_i
        )
        weights = binom.pmf(np.arange(len(points)), len(points) - 1, p_b)
        total += p_own * float(weights @ (1 - correct))
    return total


def analytic_error_probability(
    config: GridConfig,
    constellation: Constellation,
    mode: Mode,
    p_b: float | None = None,
    loads: LoadQuadrature | None = None,
) -> ErrorReport:
    """Per-unit symbol error probability with oracle spaces, averaged over the load.

    TDMA errors are averaged over the K-1 transmitters a receiver listens to;
    FD errors are Hamming-weight errors averaged over the own bit and W.
    """
    p_b = constellation.p_b if p_b is None else p_b
    loads = loads or LoadQuadrature.for_config(config)
    K = config.K
    sv, si = config.sigma_v, config.sigma_i
    if K == 1:
        return ErrorReport((0.0,), 1.0)

    if mode is Mode.TDMA:
        v_star, currents = tdma_points(config, constellation, loads.nodes)
        # (node, transmitter, receiver)
        i0, i1 = currents[:, :, 0, :], currents[:, :, 1, :]
        v0, v1 = v_star[:, :, 0, np.newaxis], v_star[:, :, 1, np.newaxis]
        terms = boundary_terms(i0, v0, i1, v1, sv, si, math.log((1 - p_b) / p_b))
        err_lo, err_hi = _binary_errors(*terms, (i0, v0), (i1, v1), sv, si)
        per_pair = loads.expect(np.moveaxis((1 - p_b) * err_lo + p_b * err_hi, 0, -1))
        others = ~np.eye(K, dtype=bool)
        per_unit = np.array([per_pair[others[:, k], k].mean() for k in range(K)])
    else:
        v_star, currents = fd_bus_table(constellation, K, loads.nodes)
        weights = binom.pmf(np.arange(K), K - 1, p_b)
        log_prior = binom.logpmf(np.arange(K), K - 1, p_b)
        node_error = np.zeros(loads.nodes.size)
        for b, p_own in ((0, 1 - p_b), (1, p_b)):
            for n in range(loads.nodes.size):
                i = currents[b, b:b + K, n]
                v = v_star[b:b + K, n]
                bounds = BoundarySet(*boundary_terms(
                    i[:-1], v[:-1], i[1:], v[1:], sv, si, log_prior[:-1] - log_prior[1:]
                ))
                correct = band_probabilities(bounds, i, v, sv, si)
                node_error[n] += p_own * float(weights @ (1 - correct))
        per_unit = np.full(K, float(loads.expect(node_error)))

    per_unit = np.clip(per_unit, 0.0, 1.0)
    report = ErrorReport(tuple(float(e) for e in per_unit), float(1 - per_unit.mean()))
    logger.debug(f"{mode} K={K}: P_D={report.P_D:.9f}")
    return report
