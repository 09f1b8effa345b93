"""Streaming per-slot trace output.

The simulator hands every SlotTrace to ``TraceWriter.write``, which only
enqueues it. A daemon thread drains the queue, formats rows and flushes the
file every ``flush_every`` rows, so simulation never waits on disk I/O
unless the queue is full.

Columns: slot, phase, r, changed, lost, then per unit k: bit_k, decision_k,
v_k, i_k (the unit's own observation; empty outside data slots).
"""

import csv
import logging
import queue
import threading
from pathlib import Path

from .simulator import SlotTrace

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_SIZE = 65536
DEFAULT_FLUSH_EVERY = 10000

_STOP = None


def trace_header(K: int) -> list[str]:
    header = ["slot", "phase", "r", "changed", "lost"]
    for k in range(K):
        header += [f"bit_{k}", f"decision_{k}", f"v_{k}", f"i_{k}"]
    return header


def trace_row(row: SlotTrace, K: int) -> list:
    out = [row.slot, str(row.phase), f"{row.load:.6f}", int(row.changed), int(row.lost)]
    for k in range(K):
        decision = row.decisions[k] if row.decisions else -1
        if row.observations:
            obs = row.observations[k]
            v, i = f"{obs.v_tilde:.9f}", f"{obs.i_tilde:.9f}"
        else:
            v = i = ""
        out += [row.bits[k], decision, v, i]
    return out


class TraceWriter:
    """CSV trace sink backed by a bounded queue and a writer thread.

    Use as a context manager; the trace is complete once ``close()`` returns.
    """

    def __init__(
        self,
        path: str | Path,
        K: int,
        queue_size: int = DEFAULT_QUEUE_SIZE,
        flush_every: int = DEFAULT_FLUSH_EVERY,
    ):
        self.path = Path(path)
        self.K = K
        self._flush_every = flush_every
        self._queue: queue.Queue[SlotTrace | None] = queue.Queue(maxsize=queue_size)
        self._thread: threading.Thread | None = None
        self._error: Exception | None = None
        self.rows_written = 0

    def start(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()
        logger.debug(f"Trace writer started: {self.path}")

    def write(self, row: SlotTrace) -> None:
        if self._error is not None:
            raise self._error
        self._queue.put(row)

    __call__ = write

    def _drain(self) -> None:
        try:
            with open(self.path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(trace_header(self.K))
                while True:
                    row = self._queue.get()
                    if row is _STOP:
                        break
                    writer.writerow(trace_row(row, self.K))
                    self.rows_written += 1
                    if self.rows_written % self._flush_every == 0:
                        f.flush()
        except Exception as e:
            logger.error(f"Trace writer failed: {e}")
            self._error = e
            # drain the rest so write() never blocks
            while self._queue.get() is not _STOP:
                pass

    def close(self) -> None:
        if self._thread is None:
            return
        self._queue.put(_STOP)
        self._thread.join()
        self._thread = None
        logger.info(f"Trace written: {self.path} ({self.rows_written} slots)")
        if self._error is not None:
            raise self._error

    def __enter__(self) -> "TraceWriter":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()
