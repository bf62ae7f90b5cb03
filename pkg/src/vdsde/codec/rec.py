"""Relative entropy coding of 1-D samples with global-bound A* coding.

Encoder and decoder share a seed.  From it both derive the same candidate
stream X_1, X_2, ... ~ p; the encoder picks the candidate maximising
G_i + log q(X_i)/p(X_i), where G_i are the decreasing Gumbel arrivals
-log(E_1 + ... + E_i), and transmits its index with an Elias delta code.
The chosen candidate is an exact draw from q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..tpp import LN2

CHUNK = 1024
MAX_CANDIDATES = 1 << 26


class RecRefused(ValueError):
    """The density ratio q/p is not bounded, so the search would not terminate."""


def rec_rate_bits(log_q, log_p):
    """Reported relative-entropy-coding rate of one sample, in bits."""
    return (np.asarray(log_q, dtype=np.float64) - np.asarray(log_p, dtype=np.float64)) / LN2


def _streams(seed: int, chunk: int):
    """Candidate uniforms and exponential spacings for one chunk of indices.

    Each chunk has its own key derived from (seed, chunk), so the decoder can
    regenerate any candidate without replaying the earlier ones.
    """
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), chunk])
    ku, ke = (np.random.Generator(np.random.Philox(c)) for c in ss.spawn(2))
    return ku.random(CHUNK), ke.standard_exponential(CHUNK)


def _candidates(p, u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return p.icdf(torch.from_numpy(u)).numpy()


@dataclass
class AStarResult:
    index: int  # 1-based candidate index
    sample: float
    n_searched: int


def astar_encode(q, p, seed: int, log_bound: float | None = None) -> AStarResult:
    """Pick an exact q-sample among seeded p-candidates.

    ``q`` and ``p`` are 1-D distributions exposing ``log_prob`` and ``icdf``
    (p only) over torch tensors.  ``log_bound`` is sup log(q/p); it is
    computed from ``q.log_ratio_bound(p)`` when omitted.
    """
    if log_bound is None:
        log_bound = q.log_ratio_bound(p)
    if not math.isfinite(log_bound):
        raise RecRefused("density ratio q/p is unbounded")
    best, best_i, best_x = -math.inf, 0, math.nan
    arrivals = 0.0
    start = 0
    while start < MAX_CANDIDATES:
        u, e = _streams(seed, start // CHUNK)
        t = arrivals + np.cumsum(e)
        arrivals = float(t[-1])
        g = -np.log(t)
        x = _candidates(p, u)
        xt = torch.from_numpy(x)
        lr = (q.log_prob(xt) - p.log_prob(xt)).numpy()
        scores = g + lr
        # stop before the first candidate that can no longer win
        running = np.maximum.accumulate(np.concatenate([[best], scores]))[:-1]
        done = g + log_bound < running
        n = int(np.argmax(done)) if done.any() else CHUNK
        if n > 0:
            j = int(np.argmax(scores[:n]))
            if scores[j] > best:
                best, best_i, best_x = float(scores[j]), start + j + 1, float(x[j])
        if done.any():
            return AStarResult(best_i, best_x, start + n)
        start += CHUNK
    raise RecRefused("A* search exceeded the candidate limit")


def astar_decode(p, seed: int, index: int) -> float:
    if index < 1:
        raise ValueError("A* indices start at 1")
    chunk, offset = divmod(index - 1, CHUNK)
    u, _ = _streams(seed, chunk)
    return float(_candidates(p, u[offset:offset + 1])[0])


# --- Elias delta -----------------------------------------------------------

class BitWriter:
    def __init__(self):
        self.bits: list[int] = []

    def write(self, value: int, n: int) -> None:
        self.bits.extend((value >> (n - 1 - i)) & 1 for i in range(n))

    def __len__(self):
        return len(self.bits)

    def to_bytes(self) -> bytes:
        return np.packbits(np.asarray(self.bits, dtype=np.uint8)).tobytes()


class BitReader:
    def __init__(self, data: bytes, n_bits: int | None = None):
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        self.bits = bits if n_bits is None else bits[:n_bits]
        self.pos = 0

    def read(self, n: int) -> int:
        if self.pos + n > len(self.bits):
            raise EOFError("bit stream exhausted")
        v = 0
        for b in self.bits[self.pos:self.pos + n]:
            v = (v << 1) | int(b)
        self.pos += n
        return v


def elias_delta_length(n: int) -> int:
    L = n.bit_length()
    return L - 1 + 2 * (L.bit_length() - 1) + 1


def elias_delta_encode(n: int, w: BitWriter) -> None:
    if n < 1:
        raise ValueError("Elias delta codes positive integers")
    L = n.bit_length()
    LL = L.bit_length() - 1
    w.write(0, LL)
    w.write(L, LL + 1)
    w.write(n & ((1 << (L - 1)) - 1), L - 1)


def elias_delta_decode(r: BitReader) -> int:
    LL = 0
    while r.read(1) == 0:
        LL += 1
        if LL > 64:
            raise ValueError("malformed Elias delta code")
    L = (1 << LL) | r.read(LL)
    return (1 << (L - 1)) | r.read(L - 1)
