"""Entropy coding of a quantized OU latent skeleton.

z_0 uses the stationary N(0, 1) bin masses (uniform under the max-entropy
quantizer); every later knot uses the OU transition from the previous
dequantized value.  Global (pruned) dimensions only code z_0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ou_prior import transition_params
from .ans import AnsMessage, Pmf16, quantize_pmf
from .quantizer import Quantizer


@dataclass
class LatentCodeStats:
    bits: float
    info_bits: float  # sum of -log2 of the coded 16-bit frequencies
    n_symbols: int


def _uniform_pmf(q: Quantizer) -> Pmf16:
    return Pmf16(np.full(q.precision, (1 << 16) // q.precision))


def transition_pmfs(q: Quantizer, nu: np.ndarray, dt: float, prev: np.ndarray) -> np.ndarray:
    m, v = transition_params(nu, np.full_like(nu, dt))
    return quantize_pmf(q.gaussian_pmf(m * prev, np.sqrt(v)))


def encode_latents(values: np.ndarray, times: np.ndarray, nu: np.ndarray, quantizer: Quantizer,
                   msg: AnsMessage, global_mask=None) -> tuple[AnsMessage, LatentCodeStats, np.ndarray]:
    """Push the quantized skeleton (K, D) onto ``msg``.

    Returns the message, coding statistics and the bin indices.
    """
    values = np.asarray(values, dtype=np.float64)
    K, D = values.shape
    local = np.ones(D, bool) if global_mask is None else ~np.asarray(global_mask, bool)
    loc = np.nonzero(local)[0]
    idx = quantizer.quantize(values)
    deq = quantizer.dequantize(idx)
    start = msg.content_bits()
    info = 0.0
    count = 0
    # LIFO: push the last knot first so the decoder walks forward in time
    for k in range(K - 1, 0, -1):
        if loc.size == 0:
            break
        freqs = transition_pmfs(quantizer, nu[loc], times[k] - times[k - 1], deq[k - 1, loc])
        for j in range(loc.size - 1, -1, -1):
            pmf = Pmf16(freqs[j])
            sym = int(idx[k, loc[j]])
            msg.push(sym, pmf)
            info += pmf.bits(sym)
            count += 1
    uni = _uniform_pmf(quantizer)
    for d in range(D - 1, -1, -1):
        msg.push(int(idx[0, d]), uni)
        info += uni.bits(int(idx[0, d]))
        count += 1
    return msg, LatentCodeStats(msg.content_bits() - start, info, count), idx


def decode_latents(msg: AnsMessage, times: np.ndarray, nu: np.ndarray, quantizer: Quantizer,
                   D: int, global_mask=None) -> tuple[AnsMessage, np.ndarray]:
    """Pop a skeleton coded by :func:`encode_latents`; returns dequantized values (K, D).

    Global dimensions are held at their decoded initial value.
    """
    K = len(times)
    local = np.ones(D, bool) if global_mask is None else ~np.asarray(global_mask, bool)
    loc = np.nonzero(local)[0]
    uni = _uniform_pmf(quantizer)
    idx = np.zeros((K, D), dtype=np.int64)
    for d in range(D):
        idx[0, d] = msg.pop(uni)
    deq = np.empty((K, D))
    deq[0] = quantizer.dequantize(idx[0])
    for k in range(1, K):
        deq[k] = deq[0]
        if loc.size == 0:
            continue
        freqs = transition_pmfs(quantizer, nu[loc], times[k] - times[k - 1], deq[k - 1, loc])
        for j in range(loc.size):
            idx[k, loc[j]] = msg.pop(Pmf16(freqs[j]))
        deq[k, loc] = quantizer.dequantize(idx[k, loc])
    return msg, deq


def latent_info_bits(values, times, nu, quantizer: Quantizer, global_mask=None) -> float:
    """Ideal code length (bits) of the skeleton under the same 16-bit tables."""
    values = np.asarray(values, dtype=np.float64)
    K, D = values.shape
    local = np.ones(D, bool) if global_mask is None else ~np.asarray(global_mask, bool)
    loc = np.nonzero(local)[0]
    idx = quantizer.quantize(values)
    deq = quantizer.dequantize(idx)
    bits = D * np.log2(quantizer.precision)
    for k in range(1, K):
        if loc.size == 0:
            break
        freqs = transition_pmfs(quantizer, nu[loc], times[k] - times[k - 1], deq[k - 1, loc])
        f = freqs[np.arange(loc.size), idx[k, loc]]
        bits += float(np.sum(16 - np.log2(f)))
    return bits
