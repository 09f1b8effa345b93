"""Shared runner for the tools/test_*.py scripts.

Every test script works under pytest and standalone:

    python tools/test_protocol.py                     # Run all scenarios
    python tools/test_protocol.py --scenario limits   # Run one scenario
    python tools/test_protocol.py --verbose           # Show tracebacks

Exit codes:
    0 = all tests passed
    1 = test failure or error
"""

import argparse
import sys
import time
import traceback
from pathlib import Path
from typing import Callable

TOOLS_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = TOOLS_DIR.parent

if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

# ANSI colors
_RESET = "\033[0m"
_BOLD = "\033[1m"
_GREEN = "\033[92m"
_RED = "\033[91m"
_DIM = "\033[2m"


class TestResult:
    """Result of a single scenario."""

    __test__ = False

    def __init__(self, name: str, passed: bool, detail: str = ""):
        self.name = name
        self.passed = passed
        self.detail = detail

    def __str__(self) -> str:
        status = f"{_GREEN}PASS{_RESET}" if self.passed else f"{_RED}FAIL{_RESET}"
        s = f"  {status} {self.name}"
        if self.detail:
            s += f" ({self.detail})"
        return s


def run_test(name: str, test_fn: Callable[[], None], verbose: bool) -> TestResult:
    start = time.perf_counter()
    try:
        test_fn()
    except Exception as e:
        if verbose:
            traceback.print_exc()
        return TestResult(name, False, f"{type(e).__name__}: {e}")
    return TestResult(name, True, f"{time.perf_counter() - start:.2f}s")


def run_scenarios(
    description: str,
    scenarios: dict[str, tuple[str, Callable[[], None]]],
    argv: list[str] | None = None,
) -> int:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument(
        "--scenario",
        choices=list(scenarios.keys()),
        help="Run only this scenario (default: all).",
    )
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Print tracebacks of failing scenarios.",
    )
    args = parser.parse_args(argv)

    to_run = {args.scenario: scenarios[args.scenario]} if args.scenario else scenarios
    results: list[TestResult] = []
    for key, (label, test_fn) in to_run.items():
        print(f"\n{_BOLD}=== {label} ==={_RESET}")
        result = run_test(key, test_fn, args.verbose)
        print(str(result))
        results.append(result)

    passed = sum(1 for r in results if r.passed)
    failed = len(results) - passed
    print(f"\n{_BOLD}=== Summary ==={_RESET}")
    print(f"  {_GREEN}{passed} passed{_RESET}, {_RED if failed else _DIM}{failed} failed{_RESET}")
    return 0 if failed == 0 else 1
