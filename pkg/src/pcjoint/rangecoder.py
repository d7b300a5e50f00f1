"""Deterministic byte-oriented range coder.

Carry-less renormalization (Subbotin style) with a 32-bit range register
and 16-bit frequency precision: every cumulative table must sum to exactly
2^16 with no zero-frequency symbol. The same primitive backs the latent
coders and, through the adaptive binary wrapper, the octree occupancy
coder.
"""

from __future__ import annotations

import numpy as np

from .errors import CorruptStreamError, DomainError

MASK = 0xFFFFFFFF
TOP = 1 << 24
BOT = 1 << 16
PRECISION_BITS = 16
TOTAL = 1 << PRECISION_BITS


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, cum_lo, cum_hi):
        """Encode one symbol spanning [cum_lo, cum_hi) of the 2^16 total."""
        if not 0 <= cum_lo < cum_hi <= TOTAL:
            raise DomainError("invalid cumulative interval")
        r = self.range >> PRECISION_BITS
        self.low = (self.low + r * cum_lo) & MASK
        self.range = r * (cum_hi - cum_lo)
        while True:
            if (self.low ^ ((self.low + self.range) & MASK)) < TOP:
                pass
            elif self.range < BOT:
                self.range = (-self.low) & (BOT - 1)
            else:
                break
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = ((self.code << 8) | self._next_byte()) & MASK

    def _next_byte(self):
        if self.pos >= len(self.data):
            raise CorruptStreamError("range-coded payload truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_value(self):
        """Cumulative-scale value of the pending symbol (look, don't consume)."""
        r = self.range >> PRECISION_BITS
        value = ((self.code - self.low) & MASK) // r
        return min(value, TOTAL - 1)

    def consume(self, cum_lo, cum_hi):
        r = self.range >> PRECISION_BITS
        self.low = (self.low + r * cum_lo) & MASK
        self.range = r * (cum_hi - cum_lo)
        while True:
            if (self.low ^ ((self.low + self.range) & MASK)) < TOP:
                pass
            elif self.range < BOT:
                self.range = (-self.low) & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._next_byte()) & MASK
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK


def encode_symbols(symbols, cum_rows) -> bytes:
    """Encode a symbol sequence, one cumulative table row per symbol.

    ``cum_rows`` is either a single cumulative array (shared by all
    symbols) or a sequence of per-symbol arrays. Each cumulative array has
    length alphabet+1, starts at 0 and ends at 2^16, strictly increasing.
    """
    enc = RangeEncoder()
    shared = isinstance(cum_rows, np.ndarray) and cum_rows.ndim == 1
    for i, s in enumerate(symbols):
        cum = cum_rows if shared else cum_rows[i]
        s = int(s)
        if s < 0 or s + 1 >= len(cum):
            raise DomainError(f"symbol {s} outside table support")
        lo, hi = int(cum[s]), int(cum[s + 1])
        if lo >= hi:
            raise DomainError(f"symbol {s} has zero frequency")
        enc.encode(lo, hi)
    return enc.finish()


def decode_symbols(data: bytes, cum_rows, count) -> np.ndarray:
    """Inverse of :func:`encode_symbols`; raises on truncated input."""
    dec = RangeDecoder(data)
    shared = isinstance(cum_rows, np.ndarray) and cum_rows.ndim == 1
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        cum = cum_rows if shared else cum_rows[i]
        value = dec.decode_value()
        s = int(np.searchsorted(cum, value, side="right")) - 1
        dec.consume(int(cum[s]), int(cum[s + 1]))
        out[i] = s
    return out


class AdaptiveBinaryEncoder:
    """Binary coder with per-context adaptive counts.

    Context models hold (zeros, ones) counts starting at (1, 1); the
    probability is requantized to the coder precision before every bit and
    the counts are halved once their sum exceeds 1024, so encoder and
    decoder stay in lockstep.
    """

    def __init__(self, num_contexts):
        self.counts = [[1, 1] for _ in range(num_contexts)]
        self.enc = RangeEncoder()

    def _split(self, ctx):
        c0, c1 = self.counts[ctx]
        p1 = (c1 * TOTAL) // (c0 + c1)
        p1 = min(max(p1, 1), TOTAL - 1)
        return p1

    def _update(self, ctx, bit):
        c = self.counts[ctx]
        c[bit] += 1
        if c[0] + c[1] > 1024:
            c[0] = (c[0] + 1) >> 1
            c[1] = (c[1] + 1) >> 1

    def encode_bit(self, ctx, bit):
        p1 = self._split(ctx)
        if bit:
            self.enc.encode(TOTAL - p1, TOTAL)
        else:
            self.enc.encode(0, TOTAL - p1)
        self._update(ctx, bit)

    def finish(self) -> bytes:
        return self.enc.finish()


class AdaptiveBinaryDecoder:
    def __init__(self, data: bytes, num_contexts):
        self.counts = [[1, 1] for _ in range(num_contexts)]
        self.dec = RangeDecoder(data)

    def decode_bit(self, ctx):
        c0, c1 = self.counts[ctx]
        p1 = (c1 * TOTAL) // (c0 + c1)
        p1 = min(max(p1, 1), TOTAL - 1)
        value = self.dec.decode_value()
        if value >= TOTAL - p1:
            bit = 1
            self.dec.consume(TOTAL - p1, TOTAL)
        else:
            bit = 0
            self.dec.consume(0, TOTAL - p1)
        c = self.counts[ctx]
        c[bit] += 1
        if c[0] + c[1] > 1024:
            c[0] = (c[0] + 1) >> 1
            c[1] = (c[1] + 1) >> 1
        return bit
