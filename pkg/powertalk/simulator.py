"""Slot-level simulation of power talk under random load changes.

The simulation walks the protocol's phase structure (training, blank slots,
data) across the load-change timeline. Phases are handled as whole
segments; inside data segments the physical layer is vectorised: steady
states for every reachable input combination are solved once per load,
observations get per-unit Gaussian noise and MAP decisions are taken against
the detection spaces learned in the preceding training phase.

Two loss models are supported. ``erasure`` treats every slot after an
unhandled change as lost until the units retrain. ``stale`` keeps
demodulating against the outdated detection spaces, so changes show up as
decision errors instead.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from typing import Any, Callable, Iterable

import numpy as np
from scipy.stats import binom, t as student_t

from .detection import BoundarySet, boundary_terms, tdma_points
from .errors import InvalidParameterError
from .grid_model import GridConfig, LoadProcess, Observation, change_arrays
from .mac_coding import UDCodebook, block_length, build_codebook
from .protocol import (
    ProtocolConfig,
    Variant,
    eta_periodic,
    eta_tracker,
    reception_rate,
)
from .signaling import Constellation, Mode, cached_constellation, fd_bus_table

logger = logging.getLogger(__name__)

DEFAULT_N_SLOTS = 100_000
DEFAULT_TOLERANCE = 0.02
DEFAULT_REPLICATIONS = 10
# two-sided level of the interval that decides cells the tolerance cannot
DEFAULT_CONFIDENCE = 0.999
# observations handled per vectorised chunk
_CHUNK_ELEMENTS = 1 << 20


class Phase(StrEnum):
    TRAINING = "training"
    BLANK = "blank"
    DATA = "data"


class LossModel(StrEnum):
    ERASURE = "erasure"
    STALE = "stale"


@dataclass(frozen=True)
class SlotTrace:
    """One simulated slot.

    ``bits`` holds each unit's channel bit (-1 when the unit is not
    signaling data) and ``decisions`` each receiver's decision: the
    signaling unit's bit in TDMA, the Hamming weight in FD, -1 for none.
    """

    slot: int
    phase: Phase
    load: float
    changed: bool
    lost: bool
    bits: tuple[int, ...]
    observations: tuple[Observation, ...] = ()
    decisions: tuple[int, ...] = ()


TraceSink = Callable[[SlotTrace], None]


@dataclass
class SimReport:
    mode: Mode
    variant: Variant
    K: int
    n_slots: int
    seed: int | None
    B: int | None
    loss_model: LossModel
    physical: bool
    delivered_bits: list[int]
    received_bits: list[int]
    symbol_errors: int = 0
    symbol_decisions: int = 0
    block_failures: int = 0
    constraint_violations: int = 0
    load_changes: int = 0
    # FD data slots whose block never completed
    partial_slots: int = 0
    phase_slots: dict[str, int] = field(
        default_factory=lambda: {"training": 0, "blank": 0, "data": 0, "lost": 0}
    )

    @property
    def eta(self) -> float:
        """Delivered information bits per unit per slot."""
        return sum(self.delivered_bits) / (self.K * self.n_slots)

    @property
    def mu(self) -> float:
        """Correctly received bits per unit per slot."""
        if not self.physical:
            return reception_rate(self.eta, self.K)
        return sum(self.received_bits) / (self.K * self.n_slots)

    @property
    def symbol_error_rate(self) -> float:
        if self.symbol_decisions == 0:
            return 0.0
        return self.symbol_errors / self.symbol_decisions

    def to_record(self) -> dict[str, Any]:
        """Flat key-value form for reports."""
        record = {
            "mode": str(self.mode),
            "variant": str(self.variant),
            "K": self.K,
            "n_slots": self.n_slots,
            "seed": self.seed,
            "B": self.B,
            "loss_model": str(self.loss_model),
            "physical": self.physical,
            "eta": self.eta,
            "mu": self.mu,
            "symbol_errors": self.symbol_errors,
            "symbol_decisions": self.symbol_decisions,
            "symbol_error_rate": self.symbol_error_rate,
            "block_failures": self.block_failures,
            "constraint_violations": self.constraint_violations,
            "load_changes": self.load_changes,
            "partial_slots": self.partial_slots,
        }
        for phase, count in self.phase_slots.items():
            record[f"slots_{phase}"] = count
        for k, bits in enumerate(self.delivered_bits):
            record[f"delivered_{k}"] = bits
        for k, bits in enumerate(self.received_bits):
            record[f"received_{k}"] = bits
        return record


@dataclass(frozen=True, eq=False)
class _Spaces:
    """Decision boundaries of all receivers learned at one load."""

    load: float
    bounds: BoundarySet


@dataclass(frozen=True)
class _PendingBlock:
    """FD block cut short by a detected change; it resumes after retraining.

    ``weights`` holds the receivers' decisions for the ``slots`` symbols
    already sent, shape (slots, K). Both arrays stay None without a
    physical layer.
    """

    slots: int = 0
    bits: np.ndarray | None = None
    weights: np.ndarray | None = None


class PowerTalkSimulator:
    """Runs one replication; owns the generator for its whole lifetime."""

    def __init__(
        self,
        config: GridConfig,
        constellation: Constellation | None,
        mode: Mode,
        protocol: ProtocolConfig,
        rng: np.random.Generator,
        *,
        loss_model: LossModel = LossModel.ERASURE,
        learned: bool = False,
        physical: bool = True,
        trace: TraceSink | None = None,
        seed: int | None = None,
    ):
        if physical and constellation is None:
            raise InvalidParameterError("A constellation is required to simulate the physical layer")
        self.config = config
        self.constellation = constellation
        self.mode = mode
        self.protocol = protocol
        self.rng = rng
        self.loss_model = LossModel(loss_model)
        self.learned = learned
        self.physical = physical
        self.trace = trace
        self.seed = seed

        K = config.K
        self.K = K
        self.L = protocol.plan(mode, K).L
        self.codebook: UDCodebook | None = build_codebook(K) if mode is Mode.FD else None
        # slots per information bit of one unit: a TDMA round or an FD block
        self.n = K if mode is Mode.TDMA else block_length(K)
        self.B = protocol.block_bits(mode, K) if protocol.variant is Variant.PERIODIC else None
        self.p_b = constellation.p_b if constellation is not None else 0.5
        self._cache: dict[float, BoundarySet] = {}

    # -- load timeline ------------------------------------------------------

    def _draw_timeline(self, n_slots: int) -> None:
        process = LoadProcess.from_config(self.config, self.protocol.lam)
        self._changes, change_loads = change_arrays(process, n_slots, self.rng)
        self._loads = np.concatenate([[process.draw(self.rng)], change_loads])

    def _load_at(self, slot: int) -> float:
        return float(self._loads[np.searchsorted(self._changes, slot, side="right")])

    def _next_change(self, slot: int) -> int:
        """First change at or after ``slot``; ``n_slots`` when none is left."""
        idx = np.searchsorted(self._changes, slot, side="left")
        return int(self._changes[idx]) if idx < self._changes.size else self._n_slots

    def _segments(self, start: int, stop: int) -> list[tuple[int, int, float]]:
        """Constant-load pieces of [start, stop)."""
        lo = np.searchsorted(self._changes, start, side="right")
        hi = np.searchsorted(self._changes, stop, side="left")
        cuts = [start, *(int(c) for c in self._changes[lo:hi]), stop]
        return [(a, b, self._load_at(a)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]

    # -- bookkeeping --------------------------------------------------------

    def _emit_idle(self, start: int, stop: int, phase: Phase, lost: bool = False) -> None:
        self.report.phase_slots["lost" if lost else str(phase)] += stop - start
        if self.trace is None:
            return
        none = (-1,) * self.K
        changed = set(self._changes[(self._changes >= start) & (self._changes < stop)].tolist())
        for s in range(start, stop):
            self.trace(SlotTrace(s, phase, self._load_at(s), s in changed, lost, none))

    def _deliver_tdma(self, start: int, stop: int, rr: int) -> None:
        active = (rr + np.arange(stop - start)) % self.K
        bits = np.bincount(active, minlength=self.K)
        for k in range(self.K):
            self.report.delivered_bits[k] += int(bits[k])
        self.report.phase_slots["data"] += stop - start

    def _deliver_fd(self, blocks: int, slots: int) -> None:
        for k in range(self.K):
            self.report.delivered_bits[k] += blocks
        self.report.phase_slots["data"] += slots

    def _drop_pending(self) -> None:
        self.report.partial_slots += self._pending.slots
        self._pending = _PendingBlock()

    # -- training -----------------------------------------------------------

    def _train(self, load: float) -> _Spaces | None:
        if not self.physical:
            return None
        if not self.learned and load in self._cache:
            return _Spaces(load, self._cache[load])
        cfg, const = self.config, self.constellation
        K = self.K
        M = self.protocol.M
        if self.mode is Mode.TDMA:
            v, i = tdma_points(cfg, const, load)
            v = np.broadcast_to(v[..., np.newaxis], (K, 2, K))
            if self.learned:
                v = v + cfg.sigma_v * self.rng.standard_normal((M, K, 2, K)).mean(axis=0)
                i = i + cfg.sigma_i * self.rng.standard_normal((M, K, 2, K)).mean(axis=0)
            terms = boundary_terms(
                i[:, 0], v[:, 0], i[:, 1], v[:, 1], cfg.sigma_v, cfg.sigma_i,
                math.log((1 - self.p_b) / self.p_b),
            )
            # (transmitter, receiver, 1)
            bounds = BoundarySet(*(x[..., np.newaxis] for x in terms))
        else:
            v_star, currents = fd_bus_table(const, K, load)
            w = np.arange(K)
            # (own bit, weight) points, identical for every receiver
            v = np.stack([v_star[w], v_star[w + 1]])
            i = np.stack([currents[0, w], currents[1, w + 1]])
            v = np.broadcast_to(v, (K, 2, K))
            i = np.broadcast_to(i, (K, 2, K))
            if self.learned:
                v = v + cfg.sigma_v * self.rng.standard_normal((M, K, 2, K)).mean(axis=0)
                i = i + cfg.sigma_i * self.rng.standard_normal((M, K, 2, K)).mean(axis=0)
            log_prior = binom.logpmf(w, K - 1, self.p_b)
            terms = boundary_terms(
                i[..., :-1], v[..., :-1], i[..., 1:], v[..., 1:], cfg.sigma_v, cfg.sigma_i,
                log_prior[:-1] - log_prior[1:],
            )
            # (receiver, own bit, K-1)
            bounds = BoundarySet(*terms)
        if not self.learned:
            self._cache = {load: bounds}
        return _Spaces(load, bounds)

    # -- physical layer -----------------------------------------------------

    def _tdma_states(self, load: float):
        v, i = tdma_points(self.config, self.constellation, load)
        cfg = self.config
        bad = (v < cfg.V_min - 1e-9) | (v > cfg.V_max + 1e-9)
        bad |= np.any((i < -1e-9) | (i > cfg.I_max + 1e-9), axis=-1)
        return v, i, bad

    def _fd_states(self, load: float):
        v, i = fd_bus_table(self.constellation, self.K, load)
        cfg = self.config
        bad_v = (v < cfg.V_min - 1e-9) | (v > cfg.V_max + 1e-9)
        bad_i = (i < -1e-9) | (i > cfg.I_max + 1e-9)
        return v, i, bad_v, bad_i

    def _noisy(self, v: np.ndarray, i: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-unit observations of a bus voltage (N,) and currents (N, K)."""
        shape = i.shape
        v_obs = v[:, np.newaxis] + self.config.sigma_v * self.rng.standard_normal(shape)
        i_obs = i + self.config.sigma_i * self.rng.standard_normal(shape)
        return v_obs, i_obs

    def _tdma_physical(self, start: int, stop: int, rr: int, spaces: _Spaces) -> None:
        K = self.K
        chunk = max(1, _CHUNK_ELEMENTS // (K * K))
        receivers = np.arange(K)
        for seg_start, seg_stop, load in self._physical_segments(start, stop):
            v_tab, i_tab, bad = self._tdma_states(load)
            for a in range(seg_start, seg_stop, chunk):
                b = min(a + chunk, seg_stop)
                active = (rr + np.arange(a - start, b - start)) % K
                bits = (self.rng.random(b - a) < self.p_b).astype(np.int64)
                v_obs, i_obs = self._noisy(v_tab[active, bits], i_tab[active, bits])
                bounds = BoundarySet(*(getattr(spaces.bounds, f)[active] for f in ("n_i", "n_v", "m_i", "m_v", "t")))
                decisions = bounds.count(i_obs, v_obs)
                listening = receivers[np.newaxis, :] != active[:, np.newaxis]
                correct = (decisions == bits[:, np.newaxis]) & listening
                self.report.received_bits = [
                    r + int(c) for r, c in zip(self.report.received_bits, correct.sum(axis=0))
                ]
                self.report.symbol_decisions += int(listening.sum())
                self.report.symbol_errors += int(listening.sum() - correct.sum())
                self.report.constraint_violations += int(bad[active, bits].sum())
                if self.trace is not None:
                    decisions = np.where(listening, decisions, -1)
                    self._trace_data(a, b, load, active, bits, v_obs, i_obs, decisions)

    def _fd_physical(self, start: int, stop: int, spaces: _Spaces) -> None:
        """FD data slots [start, stop); the first ones finish the pending block."""
        K, n = self.K, self.n
        pending = self._pending
        offset = pending.slots
        total = offset + stop - start
        n_blocks = -(-total // n)
        chunk = max(1, _CHUNK_ELEMENTS // (n * K * K))
        for first in range(0, n_blocks, chunk):
            nb = min(chunk, n_blocks - first)
            bits = self.rng.random((nb, K)) < self.p_b
            weights = np.zeros((nb * n, K), dtype=np.int64)
            lo = 0
            if first == 0 and offset:
                bits[0] = pending.bits
                weights[:offset] = pending.weights
                lo = offset
            hi = min(nb * n, total - first * n)
            symbols = np.swapaxes(self.codebook.codewords(bits), 1, 2).reshape(nb * n, K).astype(np.int64)
            # stream position first * n sits at this slot
            slot0 = start + first * n - offset
            weights[lo:hi] = self._fd_decide(slot0 + lo, symbols[lo:hi], spaces)
            done = hi // n
            self._decode_blocks(bits[:done], weights[: done * n].reshape(done, n, K))
            if done < nb:
                self._pending = _PendingBlock(hi - done * n, bits[done].copy(), weights[done * n : hi].copy())
            else:
                self._pending = _PendingBlock()

    def _fd_decide(self, slot0: int, symbols: np.ndarray, spaces: _Spaces) -> np.ndarray:
        """Every receiver's weight decision for channel symbols (N, K) from ``slot0`` on."""
        N, K = symbols.shape
        ones = symbols.sum(axis=1)
        v = np.empty(N)
        i = np.empty((N, K))
        for seg_start, seg_stop, load in self._physical_segments(slot0, slot0 + N):
            v_tab, i_tab, bad_v, bad_i = self._fd_states(load)
            sl = slice(seg_start - slot0, seg_stop - slot0)
            v[sl] = v_tab[ones[sl]]
            i[sl] = i_tab[symbols[sl], ones[sl, np.newaxis]]
            self.report.constraint_violations += int(
                (bad_v[ones[sl]] | bad_i[symbols[sl], ones[sl, np.newaxis]].any(axis=1)).sum()
            )
        v_obs, i_obs = self._noisy(v, i)
        units = np.arange(K)
        bounds = BoundarySet(*(getattr(spaces.bounds, f)[units, symbols] for f in ("n_i", "n_v", "m_i", "m_v", "t")))
        weights = bounds.count(i_obs, v_obs)
        true_weights = ones[:, np.newaxis] - symbols
        self.report.symbol_decisions += weights.size
        self.report.symbol_errors += int((weights != true_weights).sum())

        if self.trace is not None:
            for s in range(N):
                slot = slot0 + s
                self.trace(SlotTrace(
                    slot, Phase.DATA, self._load_at(slot), self._is_change(slot), False,
                    tuple(int(x) for x in symbols[s]),
                    tuple(Observation(float(a), float(b)) for a, b in zip(v_obs[s], i_obs[s])),
                    tuple(int(x) for x in weights[s]),
                ))
        return weights

    def _decode_blocks(self, bits: np.ndarray, weights: np.ndarray) -> None:
        """Decode whole blocks: ``bits`` (blocks, K), ``weights`` (blocks, n, K)."""
        if not len(bits):
            return
        for k in range(self.K):
            decoded, ok = self.codebook.without(k).decode_batch(weights[:, :, k])
            truth = np.delete(bits, k, axis=1)
            self.report.received_bits[k] += int(((decoded == truth) & ok[:, np.newaxis]).sum())
            self.report.block_failures += int((~ok).sum())

    def _physical_segments(self, start: int, stop: int) -> list[tuple[int, int, float]]:
        if self.loss_model is LossModel.STALE:
            return self._segments(start, stop)
        return [(start, stop, self._load_at(start))]

    def _is_change(self, slot: int) -> bool:
        idx = np.searchsorted(self._changes, slot)
        return bool(idx < self._changes.size and self._changes[idx] == slot)

    def _trace_data(self, a, b, load, active, bits, v_obs, i_obs, decisions) -> None:
        for s in range(b - a):
            slot = a + s
            sent = [-1] * self.K
            sent[int(active[s])] = int(bits[s])
            self.trace(SlotTrace(
                slot, Phase.DATA, self._load_at(slot), self._is_change(slot), False,
                tuple(sent),
                tuple(Observation(float(x), float(y)) for x, y in zip(v_obs[s], i_obs[s])),
                tuple(int(d) for d in decisions[s]),
            ))

    # -- data runs ----------------------------------------------------------

    def _data_tdma(self, start: int, stop: int, rr: int, spaces: _Spaces | None) -> None:
        if stop <= start:
            return
        self._deliver_tdma(start, stop, rr)
        if spaces is not None:
            self._tdma_physical(start, stop, rr, spaces)
        elif self.trace is not None:
            self._emit_untraced_data(start, stop)

    def _data_fd(self, start: int, stop: int, spaces: _Spaces | None) -> None:
        if stop <= start:
            return
        total = self._pending.slots + stop - start
        self._deliver_fd(total // self.n, stop - start)
        if spaces is not None:
            self._fd_physical(start, stop, spaces)
            return
        self._pending = _PendingBlock(total % self.n)
        if self.trace is not None:
            self._emit_untraced_data(start, stop)

    def _emit_untraced_data(self, start: int, stop: int) -> None:
        for s in range(start, stop):
            self.trace(SlotTrace(s, Phase.DATA, self._load_at(s), self._is_change(s), False, (-1,) * self.K))

    def _data_window(self, start: int, stop: int, rr: int, spaces: _Spaces | None, clean_until: int) -> int:
        """Data slots [start, stop) where slots from ``clean_until`` on are
        affected by an unhandled change. Returns the advanced TDMA pointer.

        Periodic FD phases hold whole blocks and lose the block a change
        lands in. Tracker FD blocks run across retraining; only an unhandled
        change discards the block in progress.
        """
        if self.loss_model is LossModel.STALE:
            clean_until = stop
        good = max(start, min(clean_until, stop))
        if self.mode is Mode.TDMA:
            self._data_tdma(start, good, rr, spaces)
            self._emit_idle(good, stop, Phase.DATA, lost=True)
            return rr + (stop - start)
        if self.protocol.variant is Variant.TRACKER:
            self._data_fd(start, good, spaces)
            if good < stop:
                self._drop_pending()
            self._emit_idle(good, stop, Phase.DATA, lost=True)
            return rr
        whole = start + (good - start) // self.n * self.n
        self._data_fd(start, whole, spaces)
        self._emit_idle(whole, stop, Phase.DATA, lost=True)
        return rr

    # -- protocols ----------------------------------------------------------

    def _run_periodic(self) -> None:
        n_slots, L = self._n_slots, self.L
        data_len = self.n * self.B
        s = 0
        while s < n_slots:
            train_end = min(s + L, n_slots)
            clean = self._next_change(s) >= s + L
            train_load = self._load_at(s)
            self._emit_idle(s, train_end, Phase.TRAINING)
            if train_end >= n_slots:
                break
            d0, d1 = train_end, min(train_end + data_len, n_slots)
            spaces = self._train(train_load)
            if clean:
                clean_until = self._next_change(d0)
            else:
                clean_until = d0
            self._data_window(d0, d1, 0, spaces, clean_until)
            s = d0 + data_len

    def _retrain(self, s: int, m: int) -> int:
        """Blank slots and training until one uninterrupted pass; returns the end slot."""
        n_slots, L = self._n_slots, self.L
        while True:
            blanks = m - L
            end = s + m
            c = self._next_change(s)
            stop = min(c + 1, end, n_slots) if c < end else min(end, n_slots)
            self._emit_idle(s, min(s + blanks, stop), Phase.BLANK)
            self._emit_idle(min(s + blanks, stop), stop, Phase.TRAINING)
            if c >= end or stop >= n_slots:
                return stop
            s, m = stop, L + self.protocol.L_BS

    def _run_tracker(self) -> None:
        n_slots = self._n_slots
        detector = self.protocol.detector
        rr = 0
        s = self._retrain(0, self.L)
        while s < n_slots:
            spaces = self._train(self._load_at(s - 1))
            alarm = n_slots
            if detector.false_alarm > 0:
                alarm = s + int(self.rng.geometric(detector.false_alarm)) - 1
            # first change the units miss, and the first event they react to
            missed = n_slots
            event = min(alarm, n_slots)
            c = self._next_change(s)
            while c < event:
                if detector.miss > 0 and self.rng.random() < detector.miss:
                    missed = min(missed, c)
                    c = self._next_change(c + 1)
                    continue
                event = c
            end = min(event, n_slots)
            rr = self._data_window(s, end, rr, spaces, missed)
            if event >= n_slots:
                break
            # the slot of a detected event is lost, its bit is resent
            self._emit_idle(event, event + 1, Phase.DATA, lost=True)
            s = self._retrain(event + 1, self.L + self.protocol.L_BS)

    def run(self, n_slots: int) -> SimReport:
        if n_slots < 1:
            raise InvalidParameterError(f"n_slots must be >= 1, got {n_slots}")
        self._n_slots = n_slots
        self.report = SimReport(
            self.mode, self.protocol.variant, self.K, n_slots, self.seed, self.B,
            self.loss_model, self.physical, [0] * self.K, [0] * self.K,
        )
        self._pending = _PendingBlock()
        self._draw_timeline(n_slots)
        self.report.load_changes = int(self._changes.size)
        logger.debug(
            f"Simulating {self.mode} {self.protocol.variant} K={self.K} for {n_slots} slots "
            f"({self._changes.size} load changes)"
        )
        if self.protocol.variant is Variant.PERIODIC:
            self._run_periodic()
        else:
            self._run_tracker()
        self._drop_pending()
        return self.report


def run_simulation(
    config: GridConfig,
    constellation: Constellation | None,
    mode: Mode,
    protocol: ProtocolConfig,
    n_slots: int,
    rng: np.random.Generator,
    trace: TraceSink | None = None,
    *,
    loss_model: LossModel = LossModel.ERASURE,
    learned: bool = False,
    physical: bool = True,
    seed: int | None = None,
) -> SimReport:
    """Simulate ``n_slots`` slots and tally delivered and received bits."""
    simulator = PowerTalkSimulator(
        config, constellation, mode, protocol, rng,
        loss_model=loss_model, learned=learned, physical=physical, trace=trace, seed=seed,
    )
    report = simulator.run(n_slots)
    logger.info(
        f"{mode} {protocol.variant} K={config.K} lambda={protocol.lam:g}: "
        f"eta={report.eta:.6f}, mu={report.mu:.6f}, symbol errors={report.symbol_errors}"
    )
    return report


# ---------------------------------------------------------------------------
# Closed-form cross-checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonCell:
    """One simulation-versus-formula comparison.

    ``formula_M`` lets the closed form use a different training length than
    the simulator (None means the same M). The ``n_slots`` budget is split
    over ``replications`` independent runs.
    """

    mode: Mode
    variant: Variant
    K: int
    lam: float
    B: int | None = None
    L_BS: int = 0
    M: int = 1
    formula_M: int | None = None
    n_slots: int = 1_000_000
    gamma: float = 0.1
    physical: bool = False
    replications: int = DEFAULT_REPLICATIONS


@dataclass(frozen=True)
class Comparison:
    """Outcome of one cell.

    A cell passes when the simulated rate lies within the tolerance of the
    closed form, or within the confidence interval of the replication mean.
    ``resolved`` tells whether that interval is narrower than the tolerance.
    """

    cell: ComparisonCell
    B: int | None
    closed_form: float
    simulated: float
    relative_error: float
    passed: bool
    standard_error: float = math.nan
    resolved: bool = True
    constraint_violations: int = 0

    def to_row(self) -> dict[str, Any]:
        row = {k: (str(v) if isinstance(v, StrEnum) else v) for k, v in asdict(self.cell).items()}
        row.update(
            B=self.B,
            eta_closed_form=self.closed_form,
            eta_simulated=self.simulated,
            standard_error=self.standard_error,
            relative_error=self.relative_error,
            resolved=self.resolved,
            passed=self.passed,
            constraint_violations=self.constraint_violations,
        )
        return row


def _compare(
    cell: ComparisonCell,
    config: GridConfig,
    rng: np.random.Generator,
    tolerance: float,
    confidence: float,
) -> Comparison:
    if cell.replications < 1:
        raise InvalidParameterError(f"replications must be >= 1, got {cell.replications}")
    grid = config.with_units(cell.K)
    protocol = ProtocolConfig(cell.variant, cell.lam, cell.B, cell.L_BS, cell.M)
    B = protocol.block_bits(cell.mode, cell.K) if cell.variant is Variant.PERIODIC else None
    protocol = ProtocolConfig(cell.variant, cell.lam, B, cell.L_BS, cell.M)
    constellation = cached_constellation(cell.gamma, cell.mode, grid) if cell.physical else None

    length = max(1, cell.n_slots // cell.replications)
    etas = np.empty(cell.replications)
    violations = 0
    for r, child in enumerate(rng.spawn(cell.replications)):
        simulator = PowerTalkSimulator(
            grid, constellation, cell.mode, protocol, child, physical=cell.physical
        )
        report = simulator.run(length)
        etas[r] = report.eta
        violations += report.constraint_violations

    M = cell.M if cell.formula_M is None else cell.formula_M
    if cell.variant is Variant.PERIODIC:
        closed = eta_periodic(cell.mode, cell.K, M, B, protocol.p)
    else:
        closed = eta_tracker(cell.mode, cell.K, M, cell.L_BS, protocol.p)
    simulated = float(etas.mean())
    gap = abs(simulated - closed)
    error = gap / closed if closed > 0 else gap

    if etas.size > 1:
        se = float(etas.std(ddof=1) / math.sqrt(etas.size))
        margin = float(student_t.ppf(0.5 + confidence / 2, etas.size - 1)) * se
    else:
        se, margin = math.nan, 0.0
    passed = error <= tolerance or gap <= margin
    resolved = margin <= tolerance * closed
    logger.debug(
        f"{cell.mode} {cell.variant} K={cell.K} lambda={cell.lam:g}: "
        f"{simulated:.6f} +- {se:.2g} vs {closed:.6f}"
    )
    return Comparison(cell, B, closed, simulated, error, passed, se, resolved, violations)


def verify_against_closed_forms(
    cells: Iterable[ComparisonCell],
    config: GridConfig | None = None,
    seed: int = 0,
    workers: int = 1,
    tolerance: float = DEFAULT_TOLERANCE,
    confidence: float = DEFAULT_CONFIDENCE,
) -> list[Comparison]:
    """Simulate every cell and compare its rate with the closed form.

    Each cell gets its own generator spawned from ``seed``, so results do not
    depend on ``workers``.
    """
    cells = list(cells)
    if not cells:
        return []
    if not 0 < confidence < 1:
        raise InvalidParameterError(f"confidence must lie in (0, 1), got {confidence}")
    config = config or GridConfig()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(cells))]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            pool.submit(_compare, cell, config, rng, tolerance, confidence)
            for cell, rng in zip(cells, rngs)
        ]
        results = [f.result() for f in futures]
    failed = sum(not r.passed for r in results)
    unresolved = sum(not r.resolved for r in results)
    logger.info(
        f"Verified {len(results)} cells, {failed} failed, "
        f"{unresolved} too noisy to settle within {tolerance:.0%}"
    )
    return results


def simulate_retraining_chain(
    L: int, L_BS: int, p: float, episodes: int, rng: np.random.Generator
) -> np.ndarray:
    """Slots spent per retraining episode when any change restarts it.

    Each attempt runs until the first change (a geometric draw); an attempt
    that outlives all L + L_BS slots ends the episode.
    """
    m = L + L_BS
    total = np.zeros(episodes, dtype=np.int64)
    if p == 0:
        return total + m
    active = np.arange(episodes)
    while active.size:
        first_change = rng.geometric(p, size=active.size)
        done = first_change > m
        total[active[done]] += m
        total[active[~done]] += first_change[~done]
        active = active[~done]
    return total
