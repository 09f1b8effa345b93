#!/usr/bin/env python3
"""Training accounting and closed-form protocol rates.

Usage:
    python tools/test_protocol.py
    python tools/test_protocol.py --scenario retraining
"""

import math
import sys

import numpy as np
import pytest

from harness import run_scenarios
from powertalk.errors import InvalidParameterError  # noqa: E402
from powertalk.mac_coding import block_length  # noqa: E402
from powertalk.protocol import (  # noqa: E402
    ChangeDetector,
    ProtocolConfig,
    Variant,
    change_probability,
    eta_periodic,
    eta_tracker,
    expected_retraining_length,
    optimal_B,
    protocol_rate,
    reception_rate,
    tracker_rate,
)
from powertalk.signaling import Mode  # noqa: E402
from powertalk.simulator import simulate_retraining_chain  # noqa: E402


def test_change_probability() -> None:
    assert change_probability(0.0) == 0.0
    assert change_probability(0.01) == pytest.approx(1 - math.exp(-0.01), rel=1e-12)
    assert ProtocolConfig(lam=1e-3).p == pytest.approx(1 - math.exp(-1e-3))
    with pytest.raises(InvalidParameterError):
        change_probability(-1.0)


def test_periodic_limits() -> None:
    # TDMA, K = 10, L = 20, B = 100: 100 / 1020
    assert eta_periodic(Mode.TDMA, 10, 1, 100, 0.0) == pytest.approx(100 / 1020, rel=1e-12)
    assert eta_periodic(Mode.TDMA, 10, 1, 100, 1e-12) == pytest.approx(100 / 1020, rel=1e-6)
    n = block_length(5)
    L = 2 * 25
    assert eta_periodic(Mode.FD, 5, 1, 40, 0.0) == pytest.approx(40 / (L + n * 40), rel=1e-12)
    assert eta_periodic(Mode.FD, 5, 1, 40, 1e-12) == pytest.approx(40 / (L + n * 40), rel=1e-6)
    assert eta_periodic(Mode.TDMA, 4, 1, 10, 1.0) == 0.0
    with pytest.raises(InvalidParameterError):
        eta_periodic(Mode.TDMA, 4, 1, 0, 0.01)
    with pytest.raises(InvalidParameterError):
        eta_periodic(Mode.TDMA, 4, 1, 10, 1.5)


def _tdma_sum(K: int, M: int, B: int, p: float) -> float:
    L = 2 * M * K
    q = 1 - p
    return sum(q ** (L + t) for t in range(1, K * B + 1)) / K / (L + K * B)


def _fd_sum(K: int, M: int, B: int, p: float) -> float:
    L = 2 * M * K * K
    n = block_length(K)
    q = 1 - p
    return sum(q ** (L + j * n) for j in range(1, B + 1)) / (L + n * B)


def test_periodic_against_sums() -> None:
    for p in (1e-4, 1e-3, 1e-2, 0.1):
        for K in (2, 5, 10):
            for B in (1, 7, 50):
                assert eta_periodic(Mode.TDMA, K, 1, B, p) == pytest.approx(_tdma_sum(K, 1, B, p), rel=1e-10)
                assert eta_periodic(Mode.FD, K, 2, B, p) == pytest.approx(_fd_sum(K, 2, B, p), rel=1e-10)

    B = np.arange(1, 30)
    vectorised = eta_periodic(Mode.TDMA, 3, 1, B, 0.01)
    assert vectorised.shape == B.shape
    assert vectorised[4] == pytest.approx(eta_periodic(Mode.TDMA, 3, 1, 5, 0.01))


def test_optimal_B() -> None:
    B = np.arange(1, 10_001)
    exhaustive = int(B[np.argmax(eta_periodic(Mode.TDMA, 2, 1, B, 0.5))])
    assert optimal_B(Mode.TDMA, 2, 1, 0.5) == exhaustive

    for mode in Mode:
        exhaustive = int(B[np.argmax(eta_periodic(mode, 4, 1, B, 1e-3))])
        assert optimal_B(mode, 4, 1, 1e-3) == exhaustive

    by_p = [optimal_B(Mode.TDMA, 5, 1, p) for p in (1e-4, 1e-3, 1e-2, 1e-1)]
    assert by_p == sorted(by_p, reverse=True)
    assert optimal_B(Mode.FD, 5, 1, 1e-3) >= optimal_B(Mode.TDMA, 5, 1, 1e-3)

    with pytest.raises(InvalidParameterError):
        optimal_B(Mode.TDMA, 5, 1, 0.0)


def test_tracker() -> None:
    # TDMA, K = 10, L = 20, p = 0.01
    assert eta_tracker(Mode.TDMA, 10, 1, 0, 0.01) == pytest.approx(0.1 / (0.01 + 0.99 ** -20), rel=1e-12)
    assert eta_tracker(Mode.TDMA, 10, 1, 0, 0.01) == pytest.approx(0.08182, abs=1e-5)
    assert eta_tracker(Mode.FD, 4, 1, 3, 0.0) == pytest.approx(1 / block_length(4))
    assert eta_tracker(Mode.TDMA, 4, 1, 0, 1.0) == 0.0

    for mode, K in ((Mode.TDMA, 6), (Mode.FD, 6)):
        for p in (1e-4, 1e-2):
            L = 2 * K if mode is Mode.TDMA else 2 * K * K
            eta_s = 1 / K if mode is Mode.TDMA else 1 / block_length(K)
            via_chain = tracker_rate(eta_s, p, expected_retraining_length(L, 5, p))
            assert via_chain == pytest.approx(eta_tracker(mode, K, 1, 5, p), rel=1e-12)


def test_retraining_length() -> None:
    assert expected_retraining_length(2, 0, 0.5) == pytest.approx(6.0)
    assert expected_retraining_length(20, 5, 0.0) == 25.0
    assert expected_retraining_length(20, 5, 1.0) == math.inf
    m, p = 30, 0.01
    oracle = sum((1 - p) ** -l for l in range(1, m + 1))
    assert expected_retraining_length(m, 0, p) == pytest.approx(oracle, rel=1e-12)


def test_retraining_monte_carlo() -> None:
    rng = np.random.default_rng(21)
    for m in (5, 20, 50):
        for p in (1e-3, 1e-2, 0.05):
            slots = simulate_retraining_chain(m, 0, p, 200_000, rng)
            expected = expected_retraining_length(m, 0, p)
            assert slots.min() >= m
            assert slots.mean() == pytest.approx(expected, rel=0.01), (m, p)
    assert np.all(simulate_retraining_chain(4, 2, 0.0, 10, rng) == 6)


def test_rates_against_K() -> None:
    lam = 1e-3
    tracker = ProtocolConfig(Variant.TRACKER, lam=lam)
    periodic = ProtocolConfig(Variant.PERIODIC, lam=lam)
    for K in range(2, 19):
        tdma = protocol_rate(Mode.TDMA, K, tracker)
        assert tdma.mu < 1
        assert tdma.mu == pytest.approx(reception_rate(tdma.eta, K))
        assert protocol_rate(Mode.TDMA, K, periodic).mu < 1
    fd = protocol_rate(Mode.FD, 15, tracker)
    tdma = protocol_rate(Mode.TDMA, 15, tracker)
    assert fd.mu > tdma.mu
    assert fd.mu > 1

    # the tracker never loses to periodic training with the optimal B
    for mode in Mode:
        for K in (2, 5, 10):
            assert protocol_rate(mode, K, tracker).eta >= protocol_rate(mode, K, periodic).eta


def test_config_validation() -> None:
    with pytest.raises(InvalidParameterError):
        ProtocolConfig(lam=-1.0)
    with pytest.raises(InvalidParameterError):
        ProtocolConfig(B=0)
    with pytest.raises(InvalidParameterError):
        ProtocolConfig(M=0)
    with pytest.raises(InvalidParameterError):
        ChangeDetector(miss=1.0)
    assert ChangeDetector().ideal
    assert not ChangeDetector(false_alarm=1e-4).ideal

    config = ProtocolConfig(lam=1e-3)
    assert config.block_bits(Mode.TDMA, 5) == optimal_B(Mode.TDMA, 5, 1, config.p)
    assert ProtocolConfig(B=12).block_bits(Mode.FD, 5) == 12
    assert config.plan(Mode.FD, 3).L == 18
    assert reception_rate(0.25, 1) == 0.0


SCENARIOS = {
    "change-p": ("Per-slot change probability", test_change_probability),
    "limits": ("Periodic rate limits", test_periodic_limits),
    "sums": ("Periodic rate against term-by-term sums", test_periodic_against_sums),
    "optimal-b": ("Rate-optimal B", test_optimal_B),
    "tracker": ("Tracker rate", test_tracker),
    "retraining": ("Expected retraining length", test_retraining_length),
    "retraining-mc": ("Retraining length vs chain simulation", test_retraining_monte_carlo),
    "vs-K": ("Rates against K", test_rates_against_K),
    "validation": ("Protocol parameter validation", test_config_validation),
}


def main() -> int:
    return run_scenarios("Protocol tests.", SCENARIOS)


if __name__ == "__main__":
    sys.exit(main())
