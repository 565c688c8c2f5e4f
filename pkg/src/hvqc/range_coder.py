"""Byte-oriented range coder with 16-bit probability precision.

The coder keeps a 64-bit ``low`` accumulator and a 32-bit ``range`` register.
Each symbol narrows the range through its quantized CDF slice at 16-bit
precision (``r = range >> 16``); whenever the range drops below ``2^24`` the
top byte of ``low`` is emitted and both registers shift left by 8 bits.
Carry propagation is deferred through a cached byte plus a run of pending
0xFF bytes, so output bytes are final once written.

Stream overhead is one leading byte plus a five-byte flush tail, independent
of the number of symbols.

Probability tables are cumulative ``uint32`` arrays of length ``K + 1`` with
``cdf[0] == 0`` and ``cdf[K] == 2^16``; every symbol has a nonzero slot.
``quantize_pmf`` builds such a table from a float PMF.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Iterable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class StreamError(Exception):
    """Base class for range-coder stream failures."""


class TruncatedStreamError(StreamError):
    """The decoder ran past the end of the byte stream."""


class CorruptStreamError(StreamError):
    """The decoder state is inconsistent with any encodable stream."""


def quantize_pmf(probs: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Quantize a PMF to cumulative integer frequencies summing to ``2^precision``.

    Every symbol receives ``max(1, floor(p * 2^precision))`` counts; the
    leftover (which may be negative when flooring overshoots) is settled one
    unit at a time over symbols in descending probability order, ties broken
    by smaller index, never driving a count below 1.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    total = 1 << precision
    K = p.size
    if K < 1:
        raise ValueError("empty PMF")
    if K > total:
        raise ValueError(f"alphabet size {K} exceeds 2^{precision}")
    if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be positive and finite")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")

    freq = np.maximum(1, np.floor(p * total).astype(np.int64))
    resid = total - int(freq.sum())
    if resid > 0:
        order = np.argsort(-p, kind="stable")
        base, extra = divmod(resid, K)
        if base:
            freq += base
        if extra:
            freq[order[:extra]] += 1
    elif resid < 0:
        order = np.argsort(-p, kind="stable")
        deficit = -resid
        while deficit > 0:
            took = False
            for k in order:
                if freq[k] > 1:
                    freq[k] -= 1
                    deficit -= 1
                    took = True
                    if deficit == 0:
                        break
            if not took:  # pragma: no cover - unreachable while K <= total
                raise ValueError("cannot settle PMF quantization residual")
    cdf = np.zeros(K + 1, dtype=np.uint32)
    np.cumsum(freq, out=cdf[1:])
    return cdf


def table_bits(cdf: np.ndarray, symbols: Iterable[int]) -> float:
    """Ideal code length ``sum(-log2(freq[s] / 2^16))`` in bits."""
    c = np.asarray(cdf, dtype=np.int64)
    freq = np.diff(c)
    syms = np.asarray(list(symbols), dtype=np.int64)
    if syms.size == 0:
        return 0.0
    return float(np.sum(PRECISION - np.log2(freq[syms])))


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._finished = False

    def encode(self, cdf, symbol: int) -> None:
        """Append one symbol coded under ``cdf``."""
        lo = int(cdf[symbol])
        hi = int(cdf[symbol + 1])
        if hi <= lo:
            raise ValueError(f"symbol {symbol} has zero frequency")
        r = self._range >> PRECISION
        self._low += r * lo
        rng = r * (hi - lo)
        while rng < _TOP:
            self._shift_low()
            rng <<= 8
        self._range = rng

    def encode_many(self, symbols: Iterable[int], cdf) -> None:
        """Append a run of symbols that share one table (tight loop)."""
        table = [int(x) for x in cdf]
        low = self._low
        rng = self._range
        cache = self._cache
        csize = self._cache_size
        out = self._out
        for s in symbols:
            lo = table[s]
            r = rng >> 16
            low += r * lo
            rng = r * (table[s + 1] - lo)
            while rng < 0x1000000:
                if low < 0xFF000000 or low > 0xFFFFFFFF:
                    carry = low >> 32
                    out.append((cache + carry) & 0xFF)
                    if csize > 1:
                        out.extend(((0xFF + carry) & 0xFF,) * (csize - 1))
                    csize = 0
                    cache = (low >> 24) & 0xFF
                csize += 1
                low = (low << 8) & 0xFFFFFFFF
                rng <<= 8
        self._low = low
        self._range = rng
        self._cache = cache
        self._cache_size = csize

    def finish(self) -> bytes:
        """Flush the remaining state; the encoder cannot be reused after this."""
        if self._finished:
            raise StreamError("encoder already finished")
        self._finished = True
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)

    def _shift_low(self) -> None:
        low = self._low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            self._out.append((self._cache + carry) & 0xFF)
            if self._cache_size > 1:
                self._out.extend(((0xFF + carry) & 0xFF,) * (self._cache_size - 1))
            self._cache_size = 0
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (low << 8) & _MASK32


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        self._primed = False

    def _prime(self) -> None:
        # The first byte is the encoder's leading cache byte; its value only
        # matters through carry and falls out of the 32-bit window.
        code = 0
        for _ in range(5):
            code = ((code << 8) & _MASK32) | self._read_byte()
        self._code = code
        self._primed = True

    def decode(self, cdf) -> int:
        """Decode one symbol under ``cdf``."""
        if not self._primed:
            self._prime()
        r = self._range >> PRECISION
        dv = self._code // r
        if dv >= TOTAL:
            raise CorruptStreamError(f"decode value {dv} out of range at byte {self._pos}")
        c = np.asarray(cdf)
        s = int(np.searchsorted(c, dv, side="right")) - 1
        lo = int(c[s])
        hi = int(c[s + 1])
        if hi <= lo:
            raise CorruptStreamError(f"decoded symbol {s} has zero frequency")
        self._code -= r * lo
        rng = r * (hi - lo)
        while rng < _TOP:
            self._code = ((self._code << 8) & _MASK32) | self._read_byte()
            rng <<= 8
        self._range = rng
        return s

    def decode_many(self, cdf, n: int) -> list[int]:
        """Decode ``n`` symbols that share one table (tight loop)."""
        if n == 0:
            return []
        if not self._primed:
            self._prime()
        table = [int(x) for x in cdf]
        code = self._code
        rng = self._range
        data = self._data
        pos = self._pos
        size = len(data)
        out = []
        append = out.append
        for _ in range(n):
            r = rng >> 16
            dv = code // r
            if dv >= 65536:
                raise CorruptStreamError(f"decode value {dv} out of range at byte {pos}")
            s = bisect_right(table, dv) - 1
            lo = table[s]
            code -= r * lo
            rng = r * (table[s + 1] - lo)
            while rng < 0x1000000:
                if pos >= size:
                    raise TruncatedStreamError(f"stream ended at byte {pos}")
                code = ((code << 8) & 0xFFFFFFFF) | data[pos]
                pos += 1
                rng <<= 8
            append(s)
        self._code = code
        self._range = rng
        self._pos = pos
        return out

    def _read_byte(self) -> int:
        if self._pos >= len(self._data):
            raise TruncatedStreamError(f"stream ended at byte {self._pos}")
        b = self._data[self._pos]
        self._pos += 1
        return b


def encode(pairs: Iterable[tuple[int, np.ndarray]]) -> bytes:
    """Encode ``(symbol, cdf)`` pairs into one stream."""
    enc = RangeEncoder()
    for symbol, cdf in pairs:
        enc.encode(cdf, symbol)
    return enc.finish()


def decode(data: bytes, tables, n: int | None = None) -> list[int]:
    """Decode ``n`` symbols: one per table, or all under a single shared table.

    ``tables`` is either a sequence of CDFs (``n`` defaults to its length) or
    one CDF array applied to every symbol (``n`` then required).
    """
    if isinstance(tables, np.ndarray) and tables.ndim == 1:
        if n is None:
            raise ValueError("n is required when sharing one table")
        return RangeDecoder(data).decode_many(tables, n)
    tables = list(tables)
    if n is not None and n != len(tables):
        raise ValueError(f"n={n} does not match {len(tables)} tables")
    dec = RangeDecoder(data)
    return [dec.decode(cdf) for cdf in tables]
