"""Uniquely decodable codes for the binary-input adder channel.

In FD mode a receiver observes, slot by slot, how many of the other units
sent a one. Giving each unit a pair of binary codewords of length n, chosen
so that every combination of the units' bits yields a different sum
sequence, lets every receiver recover all individual bits from n slots.

Codes are built recursively from difference matrices over {-1, 0, 1}: a set
of rows d_u is uniquely decodable exactly when the 2^T subset sums
sum_u b_u d_u are all distinct. A row d gives the codeword pair
c(0) = [d == -1], c(1) = [d == 1], whose difference is d. Bit 0 is the
all-zero word for every row without -1 entries. A code built only from
(0, row) pairs with 0/1 rows needs more slots: three users already take
three, where the difference rows fit them into two.
"""

import functools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, NoPreimageError, UnsupportedSizeError
from .signaling import Mode

logger = logging.getLogger(__name__)

# shortest code length known to carry K users, K = 1..18
BLOCK_LENGTHS = {
    1: 1, 2: 2, 3: 2, 4: 3, 5: 3, 6: 4, 7: 4, 8: 4, 9: 5,
    10: 5, 11: 6, 12: 6, 13: 6, 14: 7, 15: 7, 16: 8, 17: 8, 18: 8,
}
MAX_FD_UNITS = max(BLOCK_LENGTHS)


def _check_fd_size(K: int) -> None:
    if K < 1:
        raise InvalidParameterError(f"K must be >= 1, got {K}")
    if K > MAX_FD_UNITS:
        raise UnsupportedSizeError(f"FD coding supports up to {MAX_FD_UNITS} units, got K={K}")


def block_length(K: int) -> int:
    _check_fd_size(K)
    return BLOCK_LENGTHS[K]


def stable_rate(mode: Mode, K: int) -> float:
    """Bits per unit per slot without training or losses."""
    if mode is Mode.TDMA:
        if K < 1:
            raise InvalidParameterError(f"K must be >= 1, got {K}")
        return 1.0 / K
    return 1.0 / block_length(K)


@functools.cache
def _difference_rows(n: int) -> tuple[tuple[int, ...], ...]:
    if n == 1:
        return ((1,),)
    m = n // 2
    A = _difference_rows(m)
    zeros = (0,) * m
    unit = [tuple(int(j == i) for j in range(m)) for i in range(m)]
    if n % 2 == 0:
        rows = [a + a for a in A]
        rows += [e + zeros for e in unit]
        rows += [b + tuple(-x for x in b) for b in A]
    else:
        E = _difference_rows(m + 1)
        rows = [a + (0,) + a for a in A]
        rows += [e + (0,) + zeros for e in unit]
        rows += [e[:m] + (e[m],) + tuple(-x for x in e[:m]) for e in E]
    return tuple(rows)


def difference_matrix(n: int) -> np.ndarray:
    """Uniquely decodable difference matrix with n columns, one row per user.

    Row counts for n = 1..8 are 1, 3, 5, 8, 10, 13, 16, 20.
    """
    if n < 1:
        raise InvalidParameterError(f"Code length must be >= 1, got {n}")
    return np.array(_difference_rows(n), dtype=np.int8)


@dataclass(frozen=True, eq=False)
class UDCodebook:
    """Codeword pairs of K users; ``zero[u]`` and ``one[u]`` are 0/1 rows of length n."""

    K: int
    n: int
    zero: np.ndarray
    one: np.ndarray

    def __post_init__(self):
        for array in (self.zero, self.one):
            array.flags.writeable = False

    @property
    def differences(self) -> np.ndarray:
        return self.one.astype(np.int16) - self.zero.astype(np.int16)

    def codewords(self, bits) -> np.ndarray:
        """Per-user channel symbols, shape (..., K, n)."""
        bits = np.asarray(bits, dtype=bool)[..., np.newaxis]
        return np.where(bits, self.one, self.zero).astype(np.int8)

    def encode(self, bits) -> np.ndarray:
        """Sum sequence(s) for bit vector(s) of shape (..., K)."""
        return self.codewords(bits).sum(axis=-2, dtype=np.int16)

    def without(self, unit: int) -> "UDCodebook":
        """Sub-code of the other K-1 users."""
        if not 0 <= unit < self.K:
            raise InvalidParameterError(f"Unit index {unit} out of range")
        return _sub_codebook(self, unit)

    @functools.cached_property
    def _table(self) -> tuple[np.ndarray, np.ndarray]:
        count = 1 << self.K
        index = np.arange(count, dtype=np.int64)
        bits = ((index[:, np.newaxis] >> np.arange(self.K)) & 1).astype(bool)
        keys = self._keys(self.encode(bits))
        order = np.argsort(keys, kind="stable")
        return keys[order], bits[order]

    def _keys(self, sums: np.ndarray) -> np.ndarray:
        radix = np.int64(self.K + 1) ** np.arange(self.n, dtype=np.int64)
        return np.asarray(sums, dtype=np.int64) @ radix

    @property
    def uniquely_decodable(self) -> bool:
        keys, _ = self._table
        return bool(np.all(np.diff(keys) > 0))

    def decode_batch(self, sums) -> tuple[np.ndarray, np.ndarray]:
        """Decode sum sequences of shape (N, n).

        Returns (bits (N, K), ok (N,)); rows without a preimage are all zero
        with ok False.
        """
        sums = np.atleast_2d(np.asarray(sums))
        if sums.shape[-1] != self.n:
            raise InvalidParameterError(f"Sum sequences must have length {self.n}")
        keys, bits = self._table
        in_range = np.all((sums >= 0) & (sums <= self.K), axis=-1)
        query = self._keys(np.clip(sums, 0, self.K))
        pos = np.clip(np.searchsorted(keys, query), 0, keys.size - 1)
        ok = in_range & (keys[pos] == query)
        decoded = np.where(ok[:, np.newaxis], bits[pos], False)
        return decoded, ok


@functools.cache
def _sub_codebook(codebook: UDCodebook, unit: int) -> UDCodebook:
    keep = np.arange(codebook.K) != unit
    return UDCodebook(codebook.K - 1, codebook.n, codebook.zero[keep].copy(), codebook.one[keep].copy())


@functools.cache
def build_codebook(K: int) -> UDCodebook:
    """Codebook for K users with the shortest supported length.

    Users take the first K rows of the length-n difference matrix; any subset
    of a uniquely decodable row set is itself uniquely decodable.
    """
    n = block_length(K)
    rows = difference_matrix(n)[:K]
    codebook = UDCodebook(K, n, (rows == -1).astype(np.int8), (rows == 1).astype(np.int8))
    logger.debug(f"Built codebook K={K}, n={n}")
    return codebook


def decode_sums(codebook: UDCodebook, sums) -> tuple[int, ...]:
    """Unique bit vector behind one sum sequence."""
    sums = np.asarray(sums)
    if sums.shape != (codebook.n,):
        raise InvalidParameterError(f"Expected {codebook.n} sums, got shape {sums.shape}")
    bits, ok = codebook.decode_batch(sums[np.newaxis, :])
    if not ok[0]:
        raise NoPreimageError(f"Sum sequence {sums.tolist()} has no preimage for K={codebook.K}")
    return tuple(int(b) for b in bits[0])


def receiver_decode(
    codebook: UDCodebook, receiver: int, own_bits, weight_estimates, *, includes_own: bool = False
) -> np.ndarray:
    """Other units' bits, one row per block, from per-slot weight estimates.

    ``weight_estimates`` holds consecutive blocks of n slot decisions, one
    block per entry of ``own_bits``. They count the other units' ones; with
    ``includes_own`` they are bus totals and the receiver's own codeword for
    each block is taken off first. Columns follow unit order with the
    receiver removed.
    """
    own_bits = np.atleast_1d(np.asarray(own_bits))
    if not np.isin(own_bits, (0, 1)).all():
        raise InvalidParameterError(f"Own bits must be 0 or 1, got {own_bits.tolist()}")
    weights = np.asarray(weight_estimates).reshape(-1)
    if weights.size != own_bits.size * codebook.n:
        raise InvalidParameterError(
            f"Expected {own_bits.size * codebook.n} weight estimates for {own_bits.size} blocks, "
            f"got {weights.size}"
        )
    sub = codebook.without(receiver)
    blocks = weights.reshape(own_bits.size, codebook.n).astype(np.int64)
    if includes_own:
        blocks -= np.where(own_bits[:, np.newaxis] == 1, codebook.one[receiver], codebook.zero[receiver])
    bits, ok = sub.decode_batch(blocks)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise NoPreimageError(f"Block {bad} ({blocks[bad].tolist()}) has no preimage")
    return bits.astype(np.int8)
