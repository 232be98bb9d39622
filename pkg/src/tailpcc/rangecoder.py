"""32-bit carry-propagating range coder over 16-bit quantized frequency tables.

Each encoded block ends with a 4-byte flush of ``low``. The decoder checks
that it consumed exactly the block and that its residual is zero, which
catches corrupted or truncated input instead of returning garbage.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_MASK = 0xFFFFFFFF
_TOP = 1 << 24


class RangeCoderError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (symbol position {position})")
        self.position = position


def quantize_pmf(pmf, precision: int = PRECISION) -> np.ndarray:
    """Integer frequencies summing to ``2**precision`` with every entry >= 1."""
    p = np.asarray(pmf, dtype=np.float64)
    n = len(p)
    total = 1 << precision
    if n == 0 or n > total:
        raise ValueError(f"alphabet size {n} does not fit a {precision}-bit table")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or p.sum() <= 0:
        raise ValueError("pmf must be finite, non-negative and not all zero")
    p = p / p.sum()
    freqs = np.floor(p * (total - n)).astype(np.int64) + 1
    freqs[int(np.argmax(p))] += total - int(freqs.sum())
    return freqs


def _cumulative(freqs) -> np.ndarray:
    freqs = np.asarray(freqs, dtype=np.int64)
    cum = np.zeros(len(freqs) + 1, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    if cum[-1] != TOTAL or freqs.min() < 1:
        raise ValueError(f"frequency table must have positive entries summing to {TOTAL}")
    return cum


def encode(symbols, freqs) -> bytes:
    """Range-encode symbol indices ``0 .. len(freqs)-1``."""
    cum = _cumulative(freqs).tolist()
    n = len(cum) - 1
    low, rng = 0, _MASK
    out = bytearray()
    for pos, s in enumerate(np.asarray(symbols, dtype=np.int64).tolist()):
        if s < 0 or s >= n:
            raise RangeCoderError(f"symbol {s} outside table of size {n}", pos)
        r = rng >> PRECISION
        low += r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        if low > _MASK:
            low &= _MASK
            i = len(out) - 1
            while out[i] == 0xFF:
                out[i] = 0
                i -= 1
            out[i] += 1
        while rng < _TOP:
            out.append(low >> 24)
            low = (low << 8) & _MASK
            rng <<= 8
    out += low.to_bytes(4, "big")
    return bytes(out)


def decode(data: bytes, freqs, count: int) -> np.ndarray:
    """Inverse of :func:`encode` for ``count`` symbols."""
    cum = _cumulative(freqs).tolist()
    if len(data) < 4:
        raise RangeCoderError(f"block of {len(data)} bytes is shorter than the flush", 0)
    code = int.from_bytes(data[:4], "big")
    pos = 4
    rng = _MASK
    end = len(data)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        r = rng >> PRECISION
        v = code // r
        if v >= TOTAL:
            raise RangeCoderError("corrupt range-coded data", i)
        s = bisect_right(cum, v) - 1
        out[i] = s
        code -= r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        while rng < _TOP:
            if pos >= end:
                raise RangeCoderError("range-coded data ended early", i)
            code = (code << 8) | data[pos]
            pos += 1
            rng <<= 8
    if code != 0 or pos != end:
        raise RangeCoderError("range-coded data failed the end-of-block check", count)
    return out


def ideal_bits(symbols, freqs) -> float:
    """Information content of ``symbols`` under the quantized table, in bits."""
    f = np.asarray(freqs, dtype=np.float64)
    s = np.asarray(symbols, dtype=np.int64)
    return float(-np.log2(f[s] / TOTAL).sum())
