"""Bits-back lossless coding of 8-bit sequences with the latent SDE.

All latents live on the shared quantizer grid over the full knot skeleton
(0, t_1, ..., t_T).  The discrete model is:

* prior: uniform bins for z_0, binned OU transitions afterwards;
* posterior: binned N(mu(h(0)), sigma(h(0))^2) for z_0, then binned Euler
  steps N(z + dt f(z, h(t)), dt nu^2) from the previous dequantized value;
* likelihood: discretised logistic mixture over 256 levels per channel.

Encoding pops z from the posterior, pushes x | z, then pushes z under the
prior.  Decoding runs the mirror image and returns the borrowed bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..model import LatentVDSDE, data_times
from ..ou_prior import transition_params
from .ans import AnsMessage, InsufficientBitsError, Pmf16, quantize_pmf
from .latents import decode_latents, encode_latents
from .quantizer import Quantizer

INITIAL_WORDS = 32


@dataclass
class BitsBackStats:
    net_bits: int  # change in message length
    elbo_bits: float  # -log2 p(x|z) - log2 p(z) + log2 q(z|x) at the coded z, float PMFs
    latents: np.ndarray  # dequantized skeleton (T+1, D)


class _Posterior:
    """Posterior tables for one sequence.  Both coder sides go through here."""

    def __init__(self, model: LatentVDSDE, levels: np.ndarray, quantizer: Quantizer):
        self.model = model
        self.q = quantizer
        T = levels.shape[0]
        self.knots = np.concatenate([[0.0], data_times(T, model.config.frame_dt)])
        self.dt = np.diff(self.knots)
        self.nu = model.nu.detach().numpy().copy()
        x = _scaled(levels)
        with torch.no_grad():
            h = model.encode(x[None])
            mean, std = model.z0_distribution(h)
            self.mean0 = mean[0].numpy().copy()
            self.std0 = std[0].numpy().copy()
            self._step = model.drift_fn(h).bind(torch.from_numpy(self.knots[:, None]))

    def initial(self) -> np.ndarray:
        return self.q.gaussian_pmf(self.mean0, self.std0)

    def step(self, k: int, prev: np.ndarray, dims: np.ndarray) -> np.ndarray:
        """Bin masses of z_k[dims] given the dequantized z_{k-1}."""
        with torch.no_grad():
            f = self._step(torch.from_numpy(prev[None]), k - 1)[0].numpy()
        mean = prev + self.dt[k - 1] * f
        std = np.sqrt(self.dt[k - 1]) * self.nu
        return self.q.gaussian_pmf(mean[dims], std[dims])


def _scaled(levels: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(levels, dtype=torch.float64) / 127.5 - 1.0


def _check_levels(levels) -> np.ndarray:
    a = np.asarray(levels)
    if a.ndim != 2:
        raise ValueError("expected a (T, D_x) array of 8-bit levels")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.array_equal(a, np.round(a)):
            raise ValueError("lossless input must be integer levels")
    if a.min() < 0 or a.max() > 255:
        raise ValueError("levels must lie in 0..255")
    return a.astype(np.int64)


def _obs_probs(model: LatentVDSDE, zdeq: np.ndarray) -> np.ndarray:
    """Float PMFs of every observed value, (T * D_x, 256), frame-major."""
    with torch.no_grad():
        out = model.decode(torch.from_numpy(zdeq[1:]))
        lp = model.obs_log_pmf(out)
    return torch.exp(lp).reshape(-1, lp.shape[-1]).numpy()


def _local_dims(model: LatentVDSDE) -> tuple[np.ndarray, np.ndarray]:
    g = model.global_mask().numpy()
    return g, np.nonzero(~g)[0]


def bitsback_encode(levels, model: LatentVDSDE, quantizer: Quantizer,
                    msg: AnsMessage) -> tuple[AnsMessage, BitsBackStats]:
    """Append one 8-bit sequence (T, D_x) to ``msg``.

    Raises InsufficientBitsError if ``msg`` cannot supply the posterior
    samples; the message is left unusable in that case.
    """
    if model.config.obs != "logistic-mixture":
        raise ValueError("lossless coding needs the logistic-mixture observation model")
    x = _check_levels(levels)
    post = _Posterior(model, x, quantizer)
    K = len(post.knots)
    D = model.config.d_z
    gmask, loc = _local_dims(model)
    start = len(msg)
    centers = quantizer.centers
    idx = np.zeros((K, D), dtype=np.int64)
    deq = np.zeros((K, D))
    log_q = 0.0

    probs = post.initial()
    freqs = quantize_pmf(probs)
    for d in range(D):
        idx[0, d] = msg.pop(Pmf16(freqs[d]))
    log_q += float(np.log2(probs[np.arange(D), idx[0]]).sum())
    deq[0] = centers[idx[0]]
    for k in range(1, K):
        deq[k] = deq[0]
        if loc.size == 0:
            continue
        probs = post.step(k, deq[k - 1], loc)
        freqs = quantize_pmf(probs)
        for j, d in enumerate(loc):
            idx[k, d] = msg.pop(Pmf16(freqs[j]))
        log_q += float(np.log2(probs[np.arange(loc.size), idx[k, loc]]).sum())
        deq[k, loc] = centers[idx[k, loc]]

    obs = _obs_probs(model, deq)
    flat = x.reshape(-1)
    obs_freqs = quantize_pmf(obs)
    for i in range(flat.size - 1, -1, -1):
        msg.push(int(flat[i]), Pmf16(obs_freqs[i]))
    log_px = float(np.log2(obs[np.arange(flat.size), flat]).sum())

    msg, _, _ = encode_latents(deq, post.knots, post.nu, quantizer, msg, gmask)
    log_pz = _prior_log2(deq, post.knots, post.nu, quantizer, gmask)
    stats = BitsBackStats(len(msg) - start, -log_px - log_pz + log_q, deq)
    return msg, stats


def bitsback_decode(msg: AnsMessage, model: LatentVDSDE, quantizer: Quantizer,
                    T: int) -> tuple[AnsMessage, np.ndarray]:
    """Pop one sequence of ``T`` frames; returns the message and the (T, D_x) levels."""
    dt = model.config.frame_dt
    knots = np.concatenate([[0.0], data_times(T, dt)])
    nu = model.nu.detach().numpy().copy()
    D, Dx = model.config.d_z, model.config.d_x
    gmask, loc = _local_dims(model)
    msg, deq = decode_latents(msg, knots, nu, quantizer, D, gmask)
    idx = quantizer.quantize(deq)

    obs_freqs = quantize_pmf(_obs_probs(model, deq))
    flat = np.empty(T * Dx, dtype=np.int64)
    for i in range(flat.size):
        flat[i] = msg.pop(Pmf16(obs_freqs[i]))
    x = flat.reshape(T, Dx)

    post = _Posterior(model, x, quantizer)
    for k in range(len(knots) - 1, 0, -1):
        if loc.size == 0:
            break
        freqs = quantize_pmf(post.step(k, deq[k - 1], loc))
        for j in range(loc.size - 1, -1, -1):
            msg.push(int(idx[k, loc[j]]), Pmf16(freqs[j]))
    freqs = quantize_pmf(post.initial())
    for d in range(D - 1, -1, -1):
        msg.push(int(idx[0, d]), Pmf16(freqs[d]))
    return msg, x


def _prior_log2(deq, knots, nu, quantizer: Quantizer, gmask) -> float:
    D = deq.shape[1]
    loc = np.nonzero(~np.asarray(gmask, bool))[0]
    idx = quantizer.quantize(deq)
    total = -D * np.log2(quantizer.precision)
    for k in range(1, len(knots)):
        if loc.size == 0:
            break
        m, v = transition_params(nu[loc], np.full(loc.size, knots[k] - knots[k - 1]))
        p = quantizer.gaussian_pmf(m * deq[k - 1, loc], np.sqrt(v))
        total += float(np.log2(p[np.arange(loc.size), idx[k, loc]]).sum())
    return total


def seed_message(seed: int, n_words: int = INITIAL_WORDS) -> AnsMessage:
    return AnsMessage.random(n_words, np.random.default_rng(seed))


def encode_with_seed(levels, model, quantizer, seed: int, n_words: int = INITIAL_WORDS):
    """Encode onto a fresh random message, doubling its size until the pops fit.

    Returns (message, stats, n_words actually used).
    """
    while True:
        try:
            msg, stats = bitsback_encode(levels, model, quantizer, seed_message(seed, n_words))
            return msg, stats, n_words
        except InsufficientBitsError:
            n_words *= 2
            if n_words > 1 << 20:
                raise
