"""Bit-exact range coding of integer symbols against quantized Gaussian CDFs.

32-bit carry-less range coder with 16-bit frequency precision. Each symbol
table covers a finite window around the distribution mean; the two boundary
symbols double as escapes whose overflow magnitude is coded with
Exp-Golomb(k=0) through the coder's raw-bit path, so every integer is
representable and the stream stays lossless.

Within a table the most probable symbol is moved to the end of the coding
layout: the last interval absorbs the slack left by the range/total integer
division, which keeps the per-symbol overhead of near-deterministic tables
far below a millibit.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .entropy import SIGMA_MIN, GaussianParams, bin_mass
from .quantize import round_half_away

__all__ = [
    "CdfTable", "Bitstream", "build_coding_tables", "rc_encode", "rc_decode",
    "RangeEncoder", "RangeDecoder",
]

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS          # frequencies always sum to exactly this
TOP = 1 << 24
BOTTOM = 1 << 16
MASK = 0xFFFFFFFF

MIN_WINDOW = 16                  # half-width floor: 33-symbol tables minimum
MAX_WINDOW = 4096                # escapes cover anything beyond


@dataclass
class Bitstream:
    data: bytes
    bit_length: int = field(default=-1)

    def __post_init__(self):
        if self.bit_length < 0:
            self.bit_length = 8 * len(self.data)
        if self.bit_length != 8 * len(self.data):
            raise ValueError("bit_length inconsistent with byte count")


@dataclass
class CdfTable:
    """Quantized pmf over the window [offset, offset + len(freqs) - 1].

    `freqs` is in natural symbol order. `cum` is the cumulative layout in
    coding order, which is natural order with the most probable symbol
    rotated to the end (slot n-1); both coder ends derive it the same way.
    """
    offset: int
    freqs: list[int]
    top_index: int = field(default=-1)
    cum: list[int] = field(default=None)
    escape_low: bool = True
    escape_high: bool = True

    def __post_init__(self):
        if min(self.freqs) < 1:
            raise ValueError("every frequency must be >= 1")
        if self.top_index < 0:
            self.top_index = max(range(len(self.freqs)), key=self.freqs.__getitem__)
        if self.cum is None:
            j = self.top_index
            cum = [0]
            for i, f in enumerate(self.freqs):
                if i != j:
                    cum.append(cum[-1] + f)
            cum.append(cum[-1] + self.freqs[j])
            self.cum = cum
        if self.cum[-1] != TOTAL:
            raise ValueError(f"frequencies sum to {self.cum[-1]}, expected {TOTAL}")

    def slot_of(self, index: int) -> int:
        n = len(self.freqs)
        if index == self.top_index:
            return n - 1
        return index if index < self.top_index else index - 1

    def index_of(self, slot: int) -> int:
        n = len(self.freqs)
        if slot == n - 1:
            return self.top_index
        return slot if slot < self.top_index else slot + 1


def build_coding_tables(params: GaussianParams) -> list[CdfTable]:
    """One table per element, in C order of the parameter arrays.

    Window half-width is max(16, ceil(8 sigma)); in-window masses are the
    Gaussian-convolved-uniform bin masses, with the boundary bins absorbing
    the full tails. Frequencies are floor-scaled to 2^16 with every bin held
    at >= 1, and the residual is settled on the most probable bin.
    """
    mu = params.mu.reshape(-1)
    sigma = params.sigma.reshape(-1)
    if sigma.size and float(sigma.min()) < SIGMA_MIN - 1e-12:
        raise ValueError("sigma below floor; clamp before building tables")
    n = mu.size
    if n == 0:
        return []
    center = round_half_away(mu)
    width = np.minimum(np.maximum(MIN_WINDOW, np.ceil(8.0 * sigma).astype(np.int64)),
                       MAX_WINDOW)
    wmax = int(width.max())
    ks = center[:, None] + np.arange(-wmax, wmax + 1)[None, :]
    mass = bin_mass(ks, mu[:, None], sigma[:, None])
    # boundary bins take the whole tail on their side
    rows = np.arange(n)
    lo_col = wmax - width
    hi_col = wmax + width
    lo_sym = center - width
    hi_sym = center + width
    mass[rows, lo_col] = ndtr((lo_sym + 0.5 - mu) / sigma)
    mass[rows, hi_col] = ndtr(-(hi_sym - 0.5 - mu) / sigma)
    inside = (ks >= lo_sym[:, None]) & (ks <= hi_sym[:, None])
    scaled = np.floor(mass * TOTAL)
    freqs = np.where(inside, np.maximum(scaled, 1.0), 0.0).astype(np.int64)

    totals = freqs.sum(axis=1)
    deficits = TOTAL - totals
    top = np.argmax(freqs, axis=1)
    tables: list[CdfTable] = []
    for i in range(n):
        row = freqs[i]
        lo, hi = int(lo_col[i]), int(hi_col[i])
        f = row[lo:hi + 1].tolist()
        d = int(deficits[i])
        j = int(top[i]) - lo
        if f[j] + d >= 1:
            f[j] += d
        else:
            # extremely flat rows: spread the (negative) residual largest-first
            order = sorted(range(len(f)), key=f.__getitem__, reverse=True)
            for j in order:
                take = min(f[j] - 1, -d)
                f[j] -= take
                d += take
                if d == 0:
                    break
            if d != 0:
                raise ValueError("cannot repair frequency table")
        tables.append(CdfTable(offset=int(lo_sym[i]), freqs=f))
    return tables


# --------------------------------------------------------------------------
# coder core
#
# Invariant maintained by both ends: low + range <= 2^32, so integer sums
# never carry past bit 32 and the xor test below matches the wrapping
# behaviour of a 32-bit implementation. Renormalization emits the top byte
# whenever it is settled; when the range dips under 2^16 while straddling a
# top-byte boundary, the range is clipped to the boundary (the carry-less
# compromise) and coding continues.
#
# The last cumulative interval of every table is coded as [r*cum_lo, range)
# rather than [r*cum_lo, r*total): it absorbs the division slack, and the
# decoder's clamp of the search value to total-1 lands in it consistently.

class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = MASK
        self._out = bytearray()
        self._finished = False

    def encode(self, cum_lo: int, freq: int, last: bool = False):
        r = self._range >> TOTAL_BITS
        self._low += r * cum_lo
        self._range = (self._range - r * cum_lo) if last else r * freq
        self._renorm()

    def encode_bit(self, bit: int):
        half = self._range >> 1
        if bit:
            self._low += half
            self._range -= half
        else:
            self._range = half
        self._renorm()

    def encode_eg0(self, magnitude: int):
        # Exp-Golomb order 0: (L-1) zeros then the L bits of magnitude+1
        n = magnitude + 1
        length = n.bit_length()
        for _ in range(length - 1):
            self.encode_bit(0)
        for i in range(length - 1, -1, -1):
            self.encode_bit((n >> i) & 1)

    def _renorm(self):
        low, rng, out = self._low, self._range, self._out
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOTTOM:
                rng = (-low) & (BOTTOM - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK
            rng <<= 8
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        if self._finished:
            raise ValueError("encoder already finished")
        self._finished = True
        low = self._low
        for _ in range(4):
            self._out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < 4:
            raise ValueError(f"truncated stream: {len(data)} bytes, need at least 4")
        self._data = data
        self._pos = 4
        self._code = int.from_bytes(data[:4], "big")
        self._low = 0
        self._range = MASK

    def decode(self, cum: list[int]) -> int:
        """Returns the coding-order slot for the next symbol."""
        r = self._range >> TOTAL_BITS
        val = (self._code - self._low) // r
        if val >= TOTAL:
            val = TOTAL - 1
        slot = bisect_right(cum, val) - 1
        cum_lo = cum[slot]
        self._low += r * cum_lo
        if slot == len(cum) - 2:
            self._range -= r * cum_lo
        else:
            self._range = r * (cum[slot + 1] - cum_lo)
        self._renorm()
        return slot

    def decode_bit(self) -> int:
        half = self._range >> 1
        if self._code - self._low < half:
            bit = 0
            self._range = half
        else:
            bit = 1
            self._low += half
            self._range -= half
        self._renorm()
        return bit

    def decode_eg0(self) -> int:
        zeros = 0
        while self.decode_bit() == 0:
            zeros += 1
            if zeros > 64:
                raise ValueError("corrupt escape code")
        n = 1
        for _ in range(zeros):
            n = (n << 1) | self.decode_bit()
        return n - 1

    def _renorm(self):
        low, rng, code = self._low, self._range, self._code
        data, pos, end = self._data, self._pos, len(self._data)
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOTTOM:
                rng = (-low) & (BOTTOM - 1)
            else:
                break
            if pos >= end:
                raise ValueError("truncated stream: renormalization ran past the end")
            code = ((code << 8) & MASK) | data[pos]
            pos += 1
            low = (low << 8) & MASK
            rng <<= 8
        self._low, self._range, self._code, self._pos = low, rng, code, pos


# --------------------------------------------------------------------------
# symbol-sequence interface

def rc_encode(symbols, tables) -> Bitstream:
    """Encodes integers against per-symbol tables (an iterable; the i-th
    table is consumed just before the i-th symbol)."""
    enc = RangeEncoder()
    it = iter(tables)
    for s in symbols:
        try:
            t = next(it)
        except StopIteration:
            raise ValueError("table provider exhausted before the symbols")
        s = int(s)
        idx = s - t.offset
        last = len(t.freqs) - 1
        if idx <= 0:
            slot = t.slot_of(0)
            enc.encode(t.cum[slot], t.freqs[0], last=slot == last)
            enc.encode_eg0(-idx)
        elif idx >= last:
            slot = t.slot_of(last)
            enc.encode(t.cum[slot], t.freqs[last], last=slot == last)
            enc.encode_eg0(idx - last)
        else:
            slot = t.slot_of(idx)
            enc.encode(t.cum[slot], t.freqs[idx], last=slot == last)
    return Bitstream(enc.finish())


def rc_decode(stream: Bitstream, tables, n: int) -> list[int]:
    """Exact inverse of rc_encode given the mirrored table provider."""
    if n == 0:
        return []
    dec = RangeDecoder(stream.data)
    it = iter(tables)
    out: list[int] = []
    for _ in range(n):
        try:
            t = next(it)
        except StopIteration:
            raise ValueError("table provider exhausted before the symbols")
        idx = t.index_of(dec.decode(t.cum))
        last = len(t.freqs) - 1
        if idx == 0:
            out.append(t.offset - dec.decode_eg0())
        elif idx == last:
            out.append(t.offset + last + dec.decode_eg0())
        else:
            out.append(t.offset + idx)
    return out
