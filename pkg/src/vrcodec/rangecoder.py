"""Integer range coder over 16-bit cumulative-frequency tables.

The coder keeps a 64-bit ``low``/``range`` state, renormalizes a byte at a
time once ``range`` drops below 2**56, and propagates carries into bytes
already written.  The flush emits the fewest bytes that pin a value inside
the final interval; the decoder reads zeros past the end of the payload.
Everything in the inner loops is integer arithmetic.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_STATE_BITS = 64
_MASK = (1 << _STATE_BITS) - 1
_BOTTOM = 1 << (_STATE_BITS - 8)
_SHIFT = _STATE_BITS - 8


class StreamExhausted(EOFError):
    """The decoder ran past the end of the payload, or the length is inconsistent."""


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts ``0 = c_0 < c_1 < ... < c_n = 2**16`` for symbols
    ``symbol_offset .. symbol_offset + n - 1``."""

    cumulative: tuple[int, ...]
    symbol_offset: int = 0

    def __post_init__(self):
        cum = tuple(int(c) for c in self.cumulative)
        object.__setattr__(self, "cumulative", cum)
        if len(cum) < 2:
            raise ValueError("a table needs at least one symbol")
        if cum[0] != 0 or cum[-1] != TOTAL:
            raise ValueError(f"table must start at 0 and end at {TOTAL}, got {cum[0]}..{cum[-1]}")
        if any(b <= a for a, b in zip(cum, cum[1:])):
            raise ValueError("cumulative counts must be strictly increasing")

    @property
    def n_symbols(self) -> int:
        return len(self.cumulative) - 1

    def interval(self, symbol: int) -> tuple[int, int]:
        i = symbol - self.symbol_offset
        if not 0 <= i < self.n_symbols:
            raise ValueError(f"symbol {symbol} outside table alphabet "
                             f"[{self.symbol_offset}, {self.symbol_offset + self.n_symbols - 1}]")
        return self.cumulative[i], self.cumulative[i + 1] - self.cumulative[i]

    def probabilities(self) -> np.ndarray:
        return np.diff(np.asarray(self.cumulative, dtype=np.float64)) / TOTAL

    def ideal_bits(self, symbol: int) -> float:
        return -np.log2(self.interval(symbol)[1] / TOTAL)


@dataclass
class Bitstream:
    data: bytes
    bit_length: int

    def __post_init__(self):
        if self.bit_length > 8 * len(self.data):
            raise ValueError("bit_length exceeds the byte payload")


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = 1 << _STATE_BITS
        self.out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * cum
        if cum + freq == TOTAL:
            self.range -= r * cum
        else:
            self.range = r * freq
        if self.low > _MASK:
            self._carry()
        while self.range < _BOTTOM:
            self.out.append(self.low >> _SHIFT)
            self.low = (self.low << 8) & _MASK
            self.range <<= 8

    def encode_symbol(self, table: CdfTable, symbol: int) -> None:
        self.encode(*table.interval(symbol))

    def _carry(self) -> None:
        self.low &= _MASK
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def finish(self) -> bytes:
        low, high = self.low, self.low + self.range
        for n in range(_STATE_BITS // 8 + 1):
            unit = 1 << (_STATE_BITS - 8 * n)
            value = -(-low // unit) * unit
            if value < high:
                break
        if value > _MASK:
            self.low = value
            self._carry()
            value &= _MASK
        for k in range(n):
            self.out.append((value >> (_SHIFT - 8 * k)) & 0xFF)
        data = bytes(self.out)
        self.out = bytearray()
        return data


def _flush_length(low: int, rng: int) -> int:
    high = low + rng
    for n in range(_STATE_BITS // 8 + 1):
        unit = 1 << (_STATE_BITS - 8 * n)
        if -(-low // unit) * unit < high:
            return n
    raise AssertionError("unreachable")


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.low = 0
        self.range = 1 << _STATE_BITS
        self.code = 0
        for _ in range(_STATE_BITS // 8):
            self.code = (self.code << 8) | self._next_byte()
        self._r = 0

    def _next_byte(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        if pos >= len(self.data) + _STATE_BITS // 8:
            raise StreamExhausted("range decoder read past the end of the payload")
        return 0

    def target(self) -> int:
        """Cumulative count the next symbol's interval must contain."""
        self._r = self.range >> PRECISION
        value = (self.code - self.low) & _MASK
        return min(value // self._r, TOTAL - 1)

    def consume(self, cum: int, freq: int) -> None:
        r = self._r
        self.low = (self.low + r * cum) & _MASK
        if cum + freq == TOTAL:
            self.range -= r * cum
        else:
            self.range = r * freq
        while self.range < _BOTTOM:
            self.low = (self.low << 8) & _MASK
            self.code = ((self.code << 8) | self._next_byte()) & _MASK
            self.range <<= 8

    def decode_symbol(self, table: CdfTable) -> int:
        t = self.target()
        i = bisect.bisect_right(table.cumulative, t) - 1
        cum = table.cumulative[i]
        self.consume(cum, table.cumulative[i + 1] - cum)
        return i + table.symbol_offset

    def decode_index(self, cumulative: np.ndarray) -> int:
        """Like :meth:`decode_symbol` for a raw cumulative array; returns the index."""
        t = self.target()
        i = int(np.searchsorted(cumulative, t, side="right")) - 1
        cum = int(cumulative[i])
        self.consume(cum, int(cumulative[i + 1]) - cum)
        return i

    def finish(self) -> None:
        """Check the payload length matches what the encoder would have produced."""
        expected = self.pos - _STATE_BITS // 8 + _flush_length(self.low, self.range)
        if expected != len(self.data):
            raise StreamExhausted(
                f"payload length {len(self.data)} inconsistent with decoded content (expected {expected})"
            )


TableProvider = Union[Sequence[CdfTable], Callable[[int, Sequence[int]], CdfTable]]


def _table_for(tables: TableProvider, i: int, history: Sequence[int]) -> CdfTable:
    return tables(i, history) if callable(tables) else tables[i]


def rc_encode(symbols: Sequence[int], tables: TableProvider) -> Bitstream:
    """Encode ``symbols`` where symbol i uses table i (or ``tables(i, symbols[:i])``)."""
    enc = RangeEncoder()
    history: list[int] = []
    for i, s in enumerate(symbols):
        s = int(s)
        enc.encode_symbol(_table_for(tables, i, history), s)
        history.append(s)
    data = enc.finish()
    return Bitstream(data, 8 * len(data))


def rc_decode(stream: Bitstream | bytes, tables: TableProvider, count: int) -> list[int]:
    data = stream.data if isinstance(stream, Bitstream) else stream
    dec = RangeDecoder(data)
    out: list[int] = []
    for i in range(count):
        out.append(dec.decode_symbol(_table_for(tables, i, out)))
    dec.finish()
    return out


def ideal_code_length(symbols: Sequence[int], tables: TableProvider) -> float:
    """Sum of -log2 of the table-quantized probabilities, in bits."""
    history: list[int] = []
    total = 0.0
    for i, s in enumerate(symbols):
        s = int(s)
        total += _table_for(tables, i, history).ideal_bits(s)
        history.append(s)
    return total
