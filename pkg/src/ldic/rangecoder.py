"""Byte-exact entropy coder over 16-bit quantized CDF tables.

The coder is a 64-bit-state stream coder of the asymmetric-numeral-system
family emitting 32-bit words.  Each symbol is coded against a frozen
:class:`CdfTable` whose cumulative counts sum to exactly ``2**16``; every bin
has a nonzero count, so any symbol inside the table's support round-trips
bit-exactly.

>>> table = CdfTable(cdf=(0, 30000, 60000, 65536), offset=-1)
>>> data = range_encode([-1, 0, 1, 0], [table])
>>> range_decode(data, [table], count=4)
[-1, 0, 1, 0]

Per-element tables are selected through ``indexes``:

>>> t2 = CdfTable(cdf=(0, 65536), offset=5)
>>> data = range_encode([5, 0, 5], [t2, table], indexes=[0, 1, 0])
>>> range_decode(data, [t2, table], indexes=[0, 1, 0])
[5, 0, 5]
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

PRECISION = 16
TOTAL = 1 << PRECISION
_RANS_L = 1 << 31  # lower bound of the normalized state interval
_MASK32 = (1 << 32) - 1


class RangeCoderError(ValueError):
    pass


class SymbolRangeError(RangeCoderError):
    """A symbol fell outside its table's support."""


class DecodeError(RangeCoderError):
    """The byte stream ended before all requested symbols were decoded."""


@dataclass(frozen=True)
class CdfTable:
    """Quantized cumulative counts for one symbol distribution.

    ``cdf`` has one entry per bin boundary: ``cdf[0] == 0``,
    ``cdf[-1] == 2**16``, strictly increasing.  Bin ``i`` codes the symbol
    value ``offset + i``.
    """

    cdf: tuple[int, ...]
    offset: int

    def __post_init__(self):
        cdf = self.cdf
        if len(cdf) < 2 or cdf[0] != 0 or cdf[-1] != TOTAL:
            raise RangeCoderError("cdf must run from 0 to 2**16")
        if any(b <= a for a, b in zip(cdf, cdf[1:])):
            raise RangeCoderError("cdf must be strictly increasing")

    @property
    def num_bins(self) -> int:
        return len(self.cdf) - 1

    def bits(self, symbol: int) -> float:
        """Ideal code length of ``symbol`` in bits under this table."""
        import math

        i = symbol - self.offset
        if not 0 <= i < self.num_bins:
            raise SymbolRangeError(f"symbol {symbol} outside table support")
        return PRECISION - math.log2(self.cdf[i + 1] - self.cdf[i])


def range_encode(symbols, tables, indexes=None) -> bytes:
    """Encode ``symbols`` against per-element tables; returns the byte stream.

    ``indexes[i]`` selects the table for ``symbols[i]``; omit it when a
    single table applies throughout.  Symbols outside their table's support
    raise :class:`SymbolRangeError` (callers clamp latents into support
    before coding).
    """
    symbols = [int(s) for s in symbols]
    if indexes is None:
        indexes = [0] * len(symbols)
    else:
        indexes = [int(i) for i in indexes]
    if len(indexes) != len(symbols):
        raise RangeCoderError("indexes length must match symbols length")

    cdfs = [t.cdf for t in tables]
    offsets = [t.offset for t in tables]
    state = _RANS_L
    words: list[int] = []
    append = words.append
    # Stream coding is last-in-first-out: walk the symbols backwards so the
    # decoder reads them forwards.
    for pos in range(len(symbols) - 1, -1, -1):
        idx = indexes[pos]
        try:
            cdf = cdfs[idx]
            off = offsets[idx]
        except IndexError:
            raise RangeCoderError(f"table index {idx} out of range") from None
        i = symbols[pos] - off
        if not 0 <= i < len(cdf) - 1:
            raise SymbolRangeError(
                f"symbol {symbols[pos]} outside table {idx} support"
            )
        lo = cdf[i]
        freq = cdf[i + 1] - lo
        if state >= (freq << 47):
            append(state & _MASK32)
            state >>= 32
        state = ((state // freq) << PRECISION) + (state % freq) + lo
    head = state.to_bytes(8, "big")
    words.reverse()
    return head + b"".join(w.to_bytes(4, "big") for w in words)


def range_decode(data: bytes, tables, indexes=None, count: int | None = None):
    """Inverse of :func:`range_encode`; returns a list of ints.

    Provide either ``indexes`` (one table id per symbol) or ``count`` with a
    single implied table.  Raises :class:`DecodeError` if the stream is too
    short for the requested symbol count.
    """
    if indexes is None:
        if count is None:
            raise RangeCoderError("need indexes or count")
        indexes = [0] * count
    else:
        indexes = [int(i) for i in indexes]
        if count is not None and count != len(indexes):
            raise RangeCoderError("count disagrees with indexes length")
    if len(data) < 8:
        raise DecodeError("stream shorter than the coder state")

    cdfs = [t.cdf for t in tables]
    offsets = [t.offset for t in tables]
    state = int.from_bytes(data[:8], "big")
    pos = 8
    n = len(data)
    mask = TOTAL - 1
    out: list[int] = []
    append = out.append
    for idx in indexes:
        try:
            cdf = cdfs[idx]
            off = offsets[idx]
        except IndexError:
            raise RangeCoderError(f"table index {idx} out of range") from None
        slot = state & mask
        i = bisect_right(cdf, slot) - 1
        lo = cdf[i]
        state = (cdf[i + 1] - lo) * (state >> PRECISION) + slot - lo
        if state < _RANS_L:
            if pos + 4 > n:
                raise DecodeError("stream exhausted before all symbols decoded")
            state = (state << 32) | int.from_bytes(data[pos : pos + 4], "big")
            pos += 4
        append(i + off)
    return out
