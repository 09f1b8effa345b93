"""Command-line entry point for the power talk simulator."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .config import PRESETS, ExperimentSpec, load_spec, parse_override
from .errors import ConfigError, InvalidParameterError
from .figures import FIGURE_DEFAULTS, FIGURES, figure_table, write_table
from .grid_model import steady_state_arrays
from .mac_coding import MAX_FD_UNITS, build_codebook
from .protocol import Variant, protocol_rate
from .signaling import Mode
from .simulator import ComparisonCell, run_simulation, verify_against_closed_forms
from .trace import TraceWriter

logger = logging.getLogger(__name__)

DEFAULT_WORKERS = 1
DEFAULT_STEADY_STATE_POINTS = 41
VERIFY_K_VALUES = (2, 5, 10, 15)
VERIFY_LAMBDAS = (1e-4, 1e-3, 1e-2)
VERIFY_DEFAULTS = {"n_slots": 1_000_000, "physical": False}

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def setup_logging(debug: bool = False):
    """Configure logging for the command-line tools."""
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="Flat YAML configuration file")
    parser.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default=None,
        help="Named parameter preset, applied beneath --config",
    )
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default: 0)")
    parser.add_argument("--out", metavar="PATH", default=None, help="Output file")
    parser.add_argument(
        "--workers",
        type=int,
        default=DEFAULT_WORKERS,
        help=f"Worker threads for sweeps (default: {DEFAULT_WORKERS})",
    )
    parser.add_argument("--K", type=int, default=None, help="Number of units")
    parser.add_argument(
        "--set",
        dest="overrides",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="Override one configuration key (repeatable)",
    )


def _spec(args, base: dict | None = None) -> ExperimentSpec:
    overrides = dict(parse_override(text) for text in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.K is not None:
        overrides["K"] = args.K
    return load_spec(args.preset, args.config, overrides, base=base)


def _out_path(args, default: str) -> Path:
    return Path(args.out) if args.out else Path.cwd() / default


def _write_json(record: dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(record, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_steady_state(args) -> int:
    spec = _spec(args)
    grid = spec.grid
    loads = np.array(spec.r_values or np.linspace(grid.R_min, grid.R_max, DEFAULT_STEADY_STATE_POINTS))
    if np.any(loads <= 0):
        raise InvalidParameterError("Loads must be positive")

    v, r_d = grid.nominal_arrays()
    if args.bits is not None:
        bits = [int(b) for b in args.bits.split(",")]
        if len(bits) != grid.K or any(b not in (0, 1) for b in bits):
            raise InvalidParameterError(f"--bits needs {grid.K} comma-separated 0/1 values")
        constellation = spec.constellation()
        v = np.array([constellation.symbol(b).v for b in bits])
        r_d = np.array([constellation.symbol(b).r_d for b in bits])

    v_star, currents = steady_state_arrays(v, r_d, loads)
    table = pd.DataFrame({"r": loads, "v_star": v_star})
    for k in range(grid.K):
        table[f"v_{k}"] = v[k]
        table[f"r_d_{k}"] = r_d[k]
        table[f"i_{k}"] = currents[:, k]
        table[f"P_{k}"] = v_star * currents[:, k]

    path = write_table(table, _out_path(args, "steady_state.csv"), f"steady state, K={grid.K}")
    print(path)
    return EXIT_OK


def cmd_figure(args) -> int:
    spec = _spec(args, base=FIGURE_DEFAULTS[args.name])
    table = figure_table(args.name, spec, args.workers)
    title = FIGURES[args.name][0]
    path = write_table(table, _out_path(args, f"{args.name}.csv"), f"{args.name}: {title}")
    print(path)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = _spec(args)
    protocol = spec.protocol()
    constellation = spec.constellation() if spec.physical else None
    rng = np.random.default_rng(spec.seed)
    out = _out_path(args, "simulation.json")

    def run(trace=None):
        return run_simulation(
            spec.grid, constellation, spec.mode, protocol, spec.n_slots, rng, trace,
            loss_model=spec.loss_model, learned=spec.learned, physical=spec.physical,
            seed=spec.seed,
        )

    if args.trace:
        with TraceWriter(args.trace, spec.grid.K) as writer:
            report = run(writer)
        print(args.trace)
    else:
        report = run()

    record = report.to_record()
    closed = protocol_rate(spec.mode, spec.grid.K, protocol)
    record.update(
        eta_closed_form=closed.eta,
        mu_closed_form=closed.mu,
        duration_s=spec.n_slots * spec.grid.T_s,
        **{f"config_{k}": v for k, v in spec.to_mapping().items() if not isinstance(v, list)},
    )
    print(_write_json(record, out))
    return EXIT_OK


def _verify_cells(spec: ExperimentSpec) -> list[ComparisonCell]:
    cells = []
    for variant in Variant:
        for mode in Mode:
            for K in spec.K_values or VERIFY_K_VALUES:
                if mode is Mode.FD and K > MAX_FD_UNITS:
                    continue
                for lam in spec.lambda_values or VERIFY_LAMBDAS:
                    cells.append(ComparisonCell(
                        mode, variant, K, lam, B=spec.B, L_BS=spec.L_BS, M=spec.M,
                        n_slots=spec.n_slots, gamma=spec.gamma, physical=spec.physical,
                        replications=spec.replications,
                    ))
    return cells


def cmd_verify(args) -> int:
    spec = _spec(args, base=VERIFY_DEFAULTS)
    cells = _verify_cells(spec)
    controls = []
    if args.negative_control:
        controls = [
            ComparisonCell(
                Mode.TDMA, Variant.TRACKER, 10, 1e-2, L_BS=spec.L_BS,
                M=spec.M + 1, formula_M=spec.M, n_slots=spec.n_slots,
                replications=spec.replications,
            )
        ]
    results = verify_against_closed_forms(
        cells + controls, spec.grid, seed=spec.seed, workers=args.workers
    )
    rows = []
    for i, result in enumerate(results):
        row = result.to_row()
        row["control"] = i >= len(cells)
        rows.append(row)
    table = pd.DataFrame(rows)
    path = write_table(table, _out_path(args, "verify.csv"), "simulation vs closed form")
    print(path)

    failed = [r for r in results[: len(cells)] if not r.passed or r.constraint_violations]
    uncaught = [r for r in results[len(cells):] if r.passed]
    for r in failed:
        logger.error(
            f"{r.cell.mode} {r.cell.variant} K={r.cell.K} lambda={r.cell.lam:g}: "
            f"simulated {r.simulated:.6f} +- {r.standard_error:.2g} vs {r.closed_form:.6f} "
            f"({r.relative_error:.2%}), {r.constraint_violations} constraint violations"
        )
    if uncaught:
        logger.error("Negative control passed: the comparison does not detect a mismatched training length")
    return EXIT_RUNTIME if failed or uncaught else EXIT_OK


def cmd_codebook(args) -> int:
    K = args.K if args.K is not None else _spec(args).grid.K
    codebook = build_codebook(K)
    if not codebook.uniquely_decodable:
        raise RuntimeError(f"Codebook for K={K} is not uniquely decodable")
    rows = []
    for unit in range(K):
        for bit, words in ((0, codebook.zero), (1, codebook.one)):
            rows.append({
                "unit": unit,
                "bit": bit,
                "codeword": "".join(str(int(x)) for x in words[unit]),
            })
    path = write_table(
        pd.DataFrame(rows), _out_path(args, f"codebook_K{K}.csv"), f"codebook, K={K}, n={codebook.n}"
    )
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="powertalk", description="DC microgrid power talk simulator")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("steady-state", help="Bus voltage and unit outputs over a load sweep")
    _add_common(p)
    p.add_argument(
        "--bits",
        default=None,
        help="Comma-separated bit per unit; units send the designed symbols instead of nominal",
    )
    p.set_defaults(func=cmd_steady_state)

    p = sub.add_parser("figure", help="Data table behind an evaluation figure")
    p.add_argument("name", choices=list(FIGURES))
    _add_common(p)
    p.set_defaults(func=cmd_figure)

    p = sub.add_parser("simulate", help="Slot-level simulation with a flat JSON report")
    _add_common(p)
    p.add_argument("--trace", metavar="PATH", default=None, help="Write a per-slot CSV trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="Compare simulated rates with the closed forms")
    _add_common(p)
    p.add_argument(
        "--negative-control",
        action="store_true",
        help="Add a cell with a mismatched training length that must fail",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("codebook", help="Dump the FD codewords as 0/1 rows")
    _add_common(p)
    p.set_defaults(func=cmd_codebook)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    setup_logging(args.debug)
    try:
        return args.func(args)
    except (ConfigError, InvalidParameterError) as e:
        logging.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logging.error(f"Failed to run {args.command}: {e}")
        if args.debug:
            logger.exception("Traceback")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
