"""rANS stream coder: 32-bit head, 16-bit words, 16-bit frequency tables.

The message is a stack.  ``push`` then ``pop`` with the same table is an
exact inverse pair, and a push grows the message by about -log2(freq/2^16)
bits.
"""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass, field
from itertools import accumulate

import numpy as np

PREC = 16
TOTAL = 1 << PREC
WORD = 16
L_BOUND = 1 << 16  # head lives in [2^16, 2^32)
WORD_MASK = (1 << WORD) - 1


class CodingError(ValueError):
    pass


class InsufficientBitsError(CodingError):
    """Popping needed more bits than the message holds (bits-back seeding)."""


class Pmf16:
    """Integer frequency table summing to 2^16 with every entry >= 1."""

    __slots__ = ("freqs", "cum")

    def __init__(self, freqs):
        f = [int(v) for v in freqs]
        if sum(f) != TOTAL:
            raise CodingError(f"frequencies sum to {sum(f)}, expected {TOTAL}")
        if min(f) < 1:
            raise CodingError("zero-frequency symbol")
        self.freqs = f
        self.cum = list(accumulate(f, initial=0))

    def __len__(self):
        return len(self.freqs)

    def bits(self, symbol: int) -> float:
        return PREC - float(np.log2(self.freqs[symbol]))


def quantize_pmf(probs) -> np.ndarray:
    """Scale probabilities to 2^16 integer frequencies, each at least 1.

    Largest-remainder rounding with index-order tie breaking; works row-wise
    on 2-D input.  Encoder and decoder must call this on identical floats.
    """
    p = np.asarray(probs, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    n = p.shape[-1]
    if n > TOTAL:
        raise CodingError("alphabet larger than the frequency precision")
    p = np.where(np.isfinite(p) & (p > 0), p, 0.0)
    s = p.sum(-1, keepdims=True)
    empty = s[:, 0] <= 0
    if empty.any():
        p[empty] = 1.0
        s = p.sum(-1, keepdims=True)
    budget = TOTAL - n
    scaled = p / s * budget
    base = np.floor(scaled)
    left = (budget - base.sum(-1)).astype(np.int64)
    frac = scaled - base
    order = np.argsort(-frac, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n)[None, :].repeat(p.shape[0], 0), axis=-1)
    freqs = base.astype(np.int64) + 1 + (ranks < left[:, None])
    return freqs[0] if squeeze else freqs


@dataclass
class AnsMessage:
    head: int = L_BOUND
    tail: list = field(default_factory=list)

    def copy(self) -> "AnsMessage":
        return AnsMessage(self.head, list(self.tail))

    def __len__(self) -> int:
        """Length in bits when serialised."""
        return 32 + WORD * len(self.tail)

    def content_bits(self) -> float:
        """Information held beyond the empty state; fractional, unlike ``len``."""
        return WORD * len(self.tail) + math.log2(self.head) - PREC

    def push(self, symbol: int, pmf: Pmf16) -> "AnsMessage":
        f = pmf.freqs[symbol]
        x = self.head
        if x >= f << WORD:
            self.tail.append(x & WORD_MASK)
            x >>= WORD
        self.head = ((x // f) << PREC) + (x % f) + pmf.cum[symbol]
        return self

    def pop(self, pmf: Pmf16) -> int:
        x = self.head
        slot = x & (TOTAL - 1)
        s = bisect.bisect_right(pmf.cum, slot) - 1
        x = pmf.freqs[s] * (x >> PREC) + slot - pmf.cum[s]
        if x < L_BOUND:
            if not self.tail:
                raise InsufficientBitsError("message exhausted while decoding")
            x = (x << WORD) | self.tail.pop()
        self.head = x
        return s

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.head, len(self.tail)) + np.asarray(self.tail, dtype="<u2").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AnsMessage":
        if len(blob) < 8:
            raise CodingError("truncated ANS message")
        head, n = struct.unpack_from("<II", blob, 0)
        if len(blob) != 8 + 2 * n:
            raise CodingError("ANS message length mismatch")
        if not L_BOUND <= head < (1 << 32):
            raise CodingError("ANS head out of range")
        tail = np.frombuffer(blob, dtype="<u2", offset=8, count=n).astype(np.int64).tolist()
        return cls(head, tail)

    @classmethod
    def random(cls, n_words: int, rng: np.random.Generator) -> "AnsMessage":
        """Seed message of random words (initial bits for bits-back coding)."""
        words = rng.integers(0, 1 << WORD, size=n_words + 2).tolist()
        head = L_BOUND | (words[0] << 16 | words[1]) & 0xFFFFFFFF
        head = max(head, L_BOUND)
        return cls(head, words[2:])


def ans_push(m: AnsMessage, symbol: int, pmf: Pmf16) -> AnsMessage:
    return m.push(symbol, pmf)


def ans_pop(m: AnsMessage, pmf: Pmf16) -> tuple[AnsMessage, int]:
    s = m.pop(pmf)
    return m, s
