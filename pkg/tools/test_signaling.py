#!/usr/bin/env python3
"""Signaling space, power deviation and constellation design.

Usage:
    python tools/test_signaling.py
    python tools/test_signaling.py --scenario design
"""

import sys

import numpy as np
import pytest

from harness import run_scenarios
from powertalk.errors import BudgetUnreachableError, InvalidParameterError  # noqa: E402
from powertalk.grid_model import GridConfig, Symbol  # noqa: E402
from powertalk.signaling import (  # noqa: E402
    ConstraintSet,
    Constellation,
    LoadQuadrature,
    Mode,
    average_deviation,
    constellation_feasible,
    constraint_violations,
    design_fixed_rd_constellation,
    fd_constraint_checks,
    fd_pair_feasible,
    power_ordering_holds,
    relative_power_deviation,
    signaling_region,
    tdma_symbol_feasible,
)

NOMINAL = Symbol(400.0, 2.0)
DESIGN_TOLERANCE = 1e-6


def test_tdma_feasible_interval() -> None:
    config = GridConfig(K=2)
    # v in [200 / 0.504, 2 * (400 * 0.504 - 200) + 400] for r_d = 2
    assert tdma_symbol_feasible(Symbol(396.9, 2.0), config)
    assert tdma_symbol_feasible(Symbol(403.1, 2.0), config)
    assert tdma_symbol_feasible(NOMINAL, config)
    assert not tdma_symbol_feasible(Symbol(396.7, 2.0), config)
    assert not tdma_symbol_feasible(Symbol(403.3, 2.0), config)


def test_fd_constraints() -> None:
    config = GridConfig(K=2)
    # both symbols in [397.8, 401.6] for r_d = 2
    assert fd_pair_feasible(NOMINAL, Symbol(401.5, 2.0), config)
    assert fd_pair_feasible(Symbol(397.9, 2.0), NOMINAL, config)
    assert not fd_pair_feasible(NOMINAL, Symbol(401.7, 2.0), config)
    assert not fd_pair_feasible(Symbol(397.7, 2.0), NOMINAL, config)

    checks = fd_constraint_checks(Symbol(399.0, 2.0), Symbol(400.5, 1.0), config)
    assert checks == {
        "voltage_0": True, "voltage_1": True, "current_1": False, "current_0": True,
    }


def test_region_shrinks_with_K() -> None:
    v1 = np.linspace(398.0, 404.0, 241)
    regions = [signaling_region(400.0, Mode.FD, GridConfig(K=K), v1) for K in (2, 3, 4)]
    assert regions[0].any()
    for wide, narrow in zip(regions, regions[1:]):
        assert np.all(wide | ~narrow)
        assert narrow.sum() < wide.sum()


def test_quadrature() -> None:
    loads = LoadQuadrature.uniform(50.0, 250.0)
    assert loads.weights.sum() == pytest.approx(1.0)
    assert loads.expect(loads.nodes) == pytest.approx(150.0)
    assert loads.expect(loads.nodes ** 2) == pytest.approx((250 ** 3 - 50 ** 3) / (3 * 200))
    point = LoadQuadrature.point(120.0)
    assert point.expect(point.nodes) == 120.0


def test_nominal_has_no_deviation() -> None:
    config = GridConfig(K=3)
    assert np.allclose(relative_power_deviation([NOMINAL] * 3, config), 0.0)
    report = average_deviation(Constellation(NOMINAL, NOMINAL), Mode.FD, config)
    assert report.delta == pytest.approx(0.0, abs=1e-12)
    assert report.within_budget


def test_deviation_dense_grid() -> None:
    config = GridConfig(K=2)
    inputs = [Symbol(401.0, 2.0), NOMINAL]
    quadrature = relative_power_deviation(inputs, config)

    # midpoint rule over 10^5 loads
    n = 100_000
    r = 50.0 + (np.arange(n) + 0.5) * 200.0 / n
    dense = LoadQuadrature(r, np.full(n, 1.0 / n))
    oracle = relative_power_deviation(inputs, config, dense)
    assert np.all(quadrature > 0)
    assert np.allclose(quadrature, oracle, rtol=1e-6)


def test_tdma_deviates_less() -> None:
    const = Constellation(NOMINAL, Symbol(400.5, 2.0))
    for K in (2, 3, 4):
        config = GridConfig(K=K)
        tdma = average_deviation(const, Mode.TDMA, config)
        fd = average_deviation(const, Mode.FD, config)
        assert len(tdma.delta_k) == K
        assert 0 < tdma.delta <= fd.delta


def test_design() -> None:
    for mode, K, gamma in ((Mode.TDMA, 2, 0.1), (Mode.FD, 2, 0.05), (Mode.FD, 4, 0.1)):
        config = GridConfig(K=K)
        const = design_fixed_rd_constellation(gamma, mode, config)
        assert const.x0 == NOMINAL
        assert const.x1.r_d == 2.0
        assert const.x1.v > const.x0.v
        assert constellation_feasible(const, mode, config)
        assert constraint_violations(const, mode, config) == []
        delta = average_deviation(const, mode, config).delta
        assert delta == pytest.approx(gamma, abs=DESIGN_TOLERANCE)
        assert power_ordering_holds(const, mode, config)


def test_design_sweep() -> None:
    gammas = (0.05, 0.1, 0.2)
    for mode in (Mode.TDMA, Mode.FD):
        for K in (2, 3, 5, 8):
            config = GridConfig(K=K)
            reached = []
            for gamma in gammas:
                try:
                    const = design_fixed_rd_constellation(gamma, mode, config)
                except BudgetUnreachableError:
                    reached.append(False)
                    continue
                reached.append(True)
                assert constraint_violations(const, mode, config) == [], (mode, K, gamma)
                delta = average_deviation(const, mode, config).delta
                assert delta == pytest.approx(gamma, abs=DESIGN_TOLERANCE), (mode, K, gamma)
            # the largest feasible deviation does not depend on gamma
            assert reached[0], (mode, K)
            assert reached == sorted(reached, reverse=True), (mode, K, reached)


def test_design_errors() -> None:
    config = GridConfig(K=2)
    with pytest.raises(BudgetUnreachableError):
        design_fixed_rd_constellation(0.5, Mode.FD, config)
    with pytest.raises(InvalidParameterError):
        design_fixed_rd_constellation(0.0, Mode.TDMA, config)
    with pytest.raises(InvalidParameterError):
        design_fixed_rd_constellation(0.1, Mode.FD, config, anchor=390.0)


def test_constraint_audit() -> None:
    config = GridConfig(K=2)
    limits = ConstraintSet.from_config(config)
    bad = Constellation(NOMINAL, Symbol(405.0, 2.0))
    found = constraint_violations(bad, Mode.TDMA, config)
    assert found
    assert any(v.quantity == "v_star" and v.value > limits.V_max for v in found)
    assert all(v.context.startswith("unit") for v in found)


def test_power_ordering_boundary() -> None:
    config = GridConfig(K=3)
    # bit 0 at the nominal point: nominal power equals P(0)
    assert power_ordering_holds(Constellation(NOMINAL, Symbol(401.0, 2.0)), Mode.TDMA, config)
    assert not power_ordering_holds(Constellation(Symbol(401.0, 2.0), NOMINAL), Mode.TDMA, config)


SCENARIOS = {
    "tdma-region": ("TDMA feasible interval", test_tdma_feasible_interval),
    "fd-region": ("FD pair constraints", test_fd_constraints),
    "shrink": ("FD region shrinks with K", test_region_shrinks_with_K),
    "quadrature": ("Load quadrature", test_quadrature),
    "nominal": ("Nominal inputs do not deviate", test_nominal_has_no_deviation),
    "dense-grid": ("Deviation against a dense load grid", test_deviation_dense_grid),
    "tdma-vs-fd": ("TDMA deviates less than FD", test_tdma_deviates_less),
    "design": ("Fixed-r_d design", test_design),
    "design-sweep": ("Designs over gamma and K stay inside the limits", test_design_sweep),
    "design-errors": ("Design errors", test_design_errors),
    "audit": ("Constraint audit", test_constraint_audit),
    "ordering": ("Power ordering", test_power_ordering_boundary),
}


def main() -> int:
    return run_scenarios("Signaling tests.", SCENARIOS)


if __name__ == "__main__":
    sys.exit(main())
