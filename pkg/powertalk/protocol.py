"""Training accounting and net rates of the two load-change protocols.

Every load change moves all detection points, so the units must retrain.
With periodic training the units retrain after each unit has sent B bits;
a change anywhere in a training or data phase loses the rest of that phase.
With the change tracker the units stop at the slot of a detected change,
insert L_BS blank slots and retrain immediately.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from .detection import training_length
from .errors import InvalidParameterError
from .mac_coding import block_length, stable_rate
from .signaling import Mode

logger = logging.getLogger(__name__)

OPTIMAL_B_PATIENCE = 1000
OPTIMAL_B_LIMIT = 10_000_000
_SEARCH_CHUNK = 4096


class Variant(StrEnum):
    PERIODIC = "periodic"
    TRACKER = "tracker"


@dataclass(frozen=True)
class TrainingPlan:
    mode: Mode
    K: int
    M: int = 1
    L_BS: int = 0
    simultaneous: bool = False

    def __post_init__(self):
        if self.L_BS < 0:
            raise InvalidParameterError(f"L_BS must be >= 0, got {self.L_BS}")
        training_length(self.mode, self.K, self.M)

    @property
    def L(self) -> int:
        return training_length(self.mode, self.K, self.M, self.simultaneous)


@dataclass(frozen=True)
class ChangeDetector:
    """Load-change detector of the tracker protocol; ideal by default."""

    miss: float = 0.0
    false_alarm: float = 0.0

    def __post_init__(self):
        if not (0 <= self.miss < 1 and 0 <= self.false_alarm < 1):
            raise InvalidParameterError(
                f"Detector probabilities must lie in [0, 1), got ({self.miss}, {self.false_alarm})"
            )

    @property
    def ideal(self) -> bool:
        return self.miss == 0 and self.false_alarm == 0


@dataclass(frozen=True)
class ProtocolConfig:
    """Protocol variant and its parameters.

    ``B`` (bits per unit per data phase) applies to the periodic variant;
    None selects the rate-optimal B. ``L_BS`` and ``detector`` apply to the
    tracker.
    """

    variant: Variant = Variant.PERIODIC
    lam: float = 0.0
    B: int | None = None
    L_BS: int = 0
    M: int = 1
    detector: ChangeDetector = field(default_factory=ChangeDetector)
    simultaneous: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise InvalidParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.B is not None and self.B < 1:
            raise InvalidParameterError(f"B must be >= 1, got {self.B}")
        if self.L_BS < 0 or self.M < 1:
            raise InvalidParameterError(f"Invalid L_BS={self.L_BS} or M={self.M}")

    @property
    def p(self) -> float:
        return change_probability(self.lam)

    def plan(self, mode: Mode, K: int) -> TrainingPlan:
        return TrainingPlan(mode, K, self.M, self.L_BS, self.simultaneous)

    def block_bits(self, mode: Mode, K: int) -> int:
        """B for the periodic variant, resolving the optimum when unset."""
        if self.B is not None:
            return self.B
        return optimal_B(mode, K, self.M, self.p, self.simultaneous)


@dataclass(frozen=True)
class RateResult:
    eta: float
    mu: float

    @classmethod
    def from_eta(cls, eta: float, K: int) -> "RateResult":
        return cls(eta, reception_rate(eta, K))


def change_probability(lam: float) -> float:
    """Per-slot probability of at least one Poisson load change."""
    if lam < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
    return -math.expm1(-lam)


def _check_p(p: float) -> None:
    if not 0 <= p <= 1:
        raise InvalidParameterError(f"Change probability must lie in [0, 1], got {p}")


def _data_slots_per_bit(mode: Mode, K: int) -> int:
    return K if mode is Mode.TDMA else block_length(K)


def eta_periodic(mode: Mode, K: int, M: int, B, p: float, simultaneous: bool = False):
    """Net transmission rate with periodic training, per unit per slot.

    A TDMA bit is delivered when no change hits the training phase or any
    data slot up to its own; an FD bit needs its whole block. ``B`` may be an
    array.
    """
    _check_p(p)
    L = training_length(mode, K, M, simultaneous)
    B = np.asarray(B, dtype=float)
    if np.any(B < 1):
        raise InvalidParameterError("B must be >= 1")
    eta_s = stable_rate(mode, K)
    n = _data_slots_per_bit(mode, K)
    phase = L + n * B

    if p == 0:
        eta = B * eta_s / (L * eta_s + B)
    elif p == 1:
        eta = np.zeros_like(B)
    else:
        log_q = math.log1p(-p)
        if mode is Mode.TDMA:
            # sum_{t=1}^{KB} q^{L+t} / K
            delivered = math.exp((L + 1) * log_q) * -np.expm1(n * B * log_q) / p / K
        else:
            # sum_{j=1}^{B} q^{L+jn}
            delivered = math.exp((L + n) * log_q) * -np.expm1(n * B * log_q) / -math.expm1(n * log_q)
        eta = delivered / phase
    return float(eta) if np.ndim(eta) == 0 else eta


def optimal_B(
    mode: Mode,
    K: int,
    M: int,
    p: float,
    simultaneous: bool = False,
    patience: int = OPTIMAL_B_PATIENCE,
) -> int:
    """Integer B maximising ``eta_periodic``.

    Scans B upward until the rate has declined for ``patience`` consecutive
    values past the best one seen.
    """
    _check_p(p)
    if p == 0:
        raise InvalidParameterError("Without load changes the rate grows with B; no finite optimum")
    best_B, best_eta = 1, -1.0
    start = 1
    while start <= OPTIMAL_B_LIMIT:
        B = np.arange(start, start + _SEARCH_CHUNK)
        eta = eta_periodic(mode, K, M, B, p, simultaneous)
        i = int(np.argmax(eta))
        if eta[i] > best_eta:
            best_B, best_eta = int(B[i]), float(eta[i])
        if B[-1] - best_B >= patience:
            return best_B
        start += _SEARCH_CHUNK
    logger.warning(f"optimal_B: search stopped at B={OPTIMAL_B_LIMIT} (p={p:g})")
    return best_B


def expected_retraining_length(L: int, L_BS: int, p: float) -> float:
    """Mean slots spent on blanks and training until one full uninterrupted pass.

    sum_{l=1}^{L+L_BS} (1-p)^{-l}
    """
    _check_p(p)
    m = L + L_BS
    if p == 0:
        return float(m)
    if p == 1:
        return math.inf
    return math.expm1(-m * math.log1p(-p)) / p


def tracker_rate(eta_s: float, p: float, retraining: float) -> float:
    """Rate when every change costs its own slot plus ``retraining`` slots."""
    return eta_s / (1 + p * (retraining + 1))


def eta_tracker(
    mode: Mode, K: int, M: int, L_BS: int, p: float, simultaneous: bool = False
) -> float:
    """Net transmission rate with the load-change tracker, per unit per slot."""
    _check_p(p)
    eta_s = stable_rate(mode, K)
    if p == 1:
        return 0.0
    m = training_length(mode, K, M, simultaneous) + L_BS
    return eta_s / (p + math.exp(-m * math.log1p(-p)))


def reception_rate(eta: float, K: int) -> float:
    """Bits received per unit per slot from the K-1 other units."""
    if K < 1:
        raise InvalidParameterError(f"K must be >= 1, got {K}")
    return (K - 1) * eta


def protocol_rate(mode: Mode, K: int, protocol: ProtocolConfig) -> RateResult:
    """Closed-form rates for a protocol configuration."""
    p = protocol.p
    if protocol.variant is Variant.PERIODIC:
        B = protocol.block_bits(mode, K)
        eta = eta_periodic(mode, K, protocol.M, B, p, protocol.simultaneous)
    else:
        eta = eta_tracker(mode, K, protocol.M, protocol.L_BS, p, protocol.simultaneous)
    return RateResult.from_eta(eta, K)
