"""Static-model binary arithmetic coder with 32-bit state.

The coder is the lossless half of the weight compression pipeline: integer
symbols are coded against a fixed histogram (shared between encoder and
decoder, stored per stream in the container).  Renormalization follows the
classic carry-free scheme: matching top bits are shifted out, the straddling
middle case is counted as pending underflow bits.  decode(encode(x)) == x
exactly for every histogram that assigns nonzero mass to every coded symbol.

Each coder instance is strictly sequential; different streams encode and
decode independently.
"""
from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .errors import BitstreamError

_HALF = 1 << 31
_QUARTER = 1 << 30
_MASK = (1 << 32) - 1

# The coding interval never shrinks below a quarter of the state space, so
# cumulative totals must stay below it for every symbol to keep nonzero width.
MAX_TOTAL_FREQ = _QUARTER


def _cumulative(histogram) -> list:
    hist = np.asarray(histogram, dtype=np.int64)
    if hist.ndim != 1 or hist.size == 0:
        raise BitstreamError("histogram must be a non-empty 1-D array of counts")
    if np.any(hist <= 0):
        raise BitstreamError("histogram must give every symbol nonzero mass")
    cum = np.concatenate(([0], np.cumsum(hist)))
    if cum[-1] > MAX_TOTAL_FREQ:
        raise BitstreamError(f"total frequency {cum[-1]} exceeds coder precision limit")
    return cum.tolist()


def build_histogram(symbols, alphabet_size: int) -> np.ndarray:
    """Symbol counts with Laplace +1 smoothing: every symbol keeps nonzero mass."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size and (symbols.min() < 0 or symbols.max() >= alphabet_size):
        raise BitstreamError("symbol outside the requested alphabet")
    return np.bincount(symbols, minlength=alphabet_size) + 1


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, bit: int):
        self.acc = (self.acc << 1) | bit
        self.nbits += 1
        if self.nbits == 8:
            self.out.append(self.acc)
            self.acc = 0
            self.nbits = 0

    def flush(self) -> bytes:
        if self.nbits:
            self.out.append(self.acc << (8 - self.nbits))
        return bytes(self.out)


def arithmetic_encode(symbols, histogram) -> bytes:
    """Encode integer symbols against a fixed histogram; empty input gives empty bytes."""
    cum = _cumulative(histogram)
    total = cum[-1]
    nsym = len(cum) - 1
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return b""
    if symbols.min() < 0 or symbols.max() >= nsym:
        raise BitstreamError("symbol outside histogram support")

    writer = _BitWriter()
    low, high, pending = 0, _MASK, 0

    def emit(bit: int):
        nonlocal pending
        writer.write(bit)
        inv = bit ^ 1
        while pending:
            writer.write(inv)
            pending -= 1

    for s in symbols.tolist():
        span = high - low + 1
        high = low + span * cum[s + 1] // total - 1
        low = low + span * cum[s] // total
        while True:
            if high < _HALF:
                emit(0)
            elif low >= _HALF:
                emit(1)
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
    # termination: one more bit (plus pendings) pins the final interval
    pending += 1
    emit(0 if low < _QUARTER else 1)
    return writer.flush()


def arithmetic_decode(data: bytes, histogram, count: int) -> np.ndarray:
    """Decode exactly ``count`` symbols; exhausted payload bits read as zero."""
    cum = _cumulative(histogram)
    total = cum[-1]
    out = np.empty(count, dtype=np.int64)
    if count == 0:
        return out
    nbits_avail = len(data) * 8

    pos = 0
    code = 0
    for _ in range(32):
        code <<= 1
        if pos < nbits_avail:
            code |= (data[pos >> 3] >> (7 - (pos & 7))) & 1
        pos += 1

    low, high = 0, _MASK
    for i in range(count):
        span = high - low + 1
        value = ((code - low + 1) * total - 1) // span
        if value >= total:
            raise BitstreamError("truncated or corrupt arithmetic payload")
        s = bisect_right(cum, value) - 1
        out[i] = s
        high = low + span * cum[s + 1] // total - 1
        low = low + span * cum[s] // total
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                code -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                low -= _QUARTER
                high -= _QUARTER
                code -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
            code <<= 1
            if pos < nbits_avail:
                code |= (data[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
    return out
