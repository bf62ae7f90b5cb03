"""compress / decompress: the trained model plus the coders above."""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ..interp import evaluate_batched
from ..model import LatentVDSDE, Skeleton, data_times, full_discretization
from ..tpp import DiscretizationSet, Exponential, logq, prior_logp, sample_posterior
from .ans import AnsMessage, CodingError
from .bitsback import bitsback_decode, encode_with_seed, seed_message
from .container import (FLAG_PRUNED, MODE_LOSSLESS, MODE_LOSSY, TIMES_ESTIMATE,
                        TIMES_FULL, TIMES_MODES, Container, ContainerError, ModelMismatch)
from .latents import decode_latents, encode_latents
from .quantizer import Quantizer
from .rec import (BitReader, BitWriter, RecRefused, astar_decode, astar_encode, elias_delta_decode,
                  elias_delta_encode, rec_rate_bits)


@dataclass
class CompressStats:
    bits_latents: float
    info_bits_latents: float
    bits_times_estimate: float
    bits_times_coded: int
    M: int
    knots: np.ndarray = field(repr=False)
    latents: np.ndarray = field(repr=False)  # dequantized skeleton
    refused_gaps: int = 0

    @property
    def bits_total(self) -> float:
        return self.bits_latents + self.bits_times_estimate


@contextmanager
def pruned_mode(model: LatentVDSDE, on: bool):
    prev = model.pruned
    model.pruned = on
    try:
        yield model
    finally:
        model.pruned = prev


def _gap_seed(seed: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, 0x7A57, j]).generate_state(1, np.uint64)[0])


def _gap_prior(model: LatentVDSDE) -> Exponential:
    return Exponential(torch.tensor([model.config.lam]))


def astar_times(model: LatentVDSDE, h, t_end: float, seed: int) -> tuple[DiscretizationSet, bytes, int, int]:
    """Sample and code knot times gap by gap with A*.

    Each gap record is a flag bit followed by an Elias delta index (flag 0)
    or, when the gap law has an unbounded ratio to the prior, the raw 64-bit
    gap (flag 1).  Returns the set, the block, its bit count and the number
    of raw gaps.
    """
    prior = _gap_prior(model)
    w = BitWriter()
    cursor, points, refused, j = 0.0, [], 0, 0
    while True:
        c = torch.tensor([cursor])
        q = model.gaps(evaluate_batched(h, c).detach(), c, t_end)
        try:
            res = astar_encode(q, prior, _gap_seed(seed, j))
            w.write(0, 1)
            elias_delta_encode(res.index, w)
            gap = res.sample
        except RecRefused:
            u = np.random.default_rng(_gap_seed(seed, j)).random()
            gap = float(q.icdf(torch.tensor([min(max(u, 1e-12), 1 - 1e-12)]))[0])
            w.write(1, 1)
            w.write(struct.unpack("<Q", struct.pack("<d", gap))[0], 64)
            refused += 1
        j += 1
        nxt = cursor + gap
        if nxt >= t_end:
            break
        points.append(nxt)
        cursor = nxt
    n_bits = len(w)
    block = struct.pack("<I", n_bits) + w.to_bytes()
    return DiscretizationSet(np.array(points), t_end), block, n_bits, refused


def decode_astar_times(model: LatentVDSDE, block: bytes, t_end: float, seed: int) -> DiscretizationSet:
    if len(block) < 4:
        raise ContainerError("times block is truncated")
    (n_bits,) = struct.unpack_from("<I", block, 0)
    r = BitReader(block[4:], n_bits)
    prior = _gap_prior(model)
    cursor, points, j = 0.0, [], 0
    try:
        while True:
            if r.read(1) == 0:
                gap = astar_decode(prior, _gap_seed(seed, j), elias_delta_decode(r))
            else:
                gap = struct.unpack("<d", struct.pack("<Q", r.read(64)))[0]
            j += 1
            nxt = cursor + gap
            if nxt >= t_end:
                break
            points.append(nxt)
            cursor = nxt
    except EOFError as exc:
        raise ContainerError("times block ended early") from exc
    return DiscretizationSet(np.array(points), t_end)


def _model_nu(model: LatentVDSDE) -> np.ndarray:
    return model.nu.detach().numpy().copy()


def compress(x, model: LatentVDSDE, mode: str = "lossy", precision: int = 256, seed: int = 0,
             times_mode: str = "estimate", pruned: bool = False) -> tuple[bytes, CompressStats]:
    """Compress one sequence.

    Lossy: ``x`` is a normalised (T, D_x) float array.  Lossless: ``x`` holds
    8-bit levels and the model must use the logistic-mixture likelihood.
    """
    x = np.asarray(x)
    T = x.shape[0]
    quantizer = Quantizer(precision)
    if mode == "lossless":
        return _compress_lossless(x, model, quantizer, seed, pruned)
    if mode != "lossy":
        raise ValueError(f"unknown mode {mode!r}")
    if times_mode not in TIMES_MODES:
        raise ValueError(f"unknown times mode {times_mode!r}")
    t_end = model.t_end(T)
    rng = np.random.default_rng(seed)
    times_block, coded_bits, refused = b"", 0, 0
    with pruned_mode(model, pruned), torch.no_grad():
        xt = torch.as_tensor(x, dtype=torch.float64)[None]
        h = model.encode(xt)
        if times_mode == "full":
            s = full_discretization(T, model.config.frame_dt)
        elif times_mode == "estimate":
            s = sample_posterior(h, model.gaps, t_end, rng, 1)[0]
            times_block = s.times.astype("<f8").tobytes()
            coded_bits = 64 * s.M
        else:
            s, times_block, coded_bits, refused = astar_times(model, h, t_end, seed)
        est = 0.0
        if times_mode != "full":
            lq = float(logq([s], h, model.gaps)[0])
            est = float(rec_rate_bits(lq, prior_logp(model.config.lam, t_end, s.M)))
        grid = model.solver_grid([s], T)
        _, _, path = model.posterior_path(h, grid, rng)
        skel = model.skeleton(path, [s])
        gmask = model.global_mask().numpy()
    values = skel.values[:, 0].numpy()
    knots = s.knots()
    msg, st, idx = encode_latents(values, knots, _model_nu(model), quantizer, AnsMessage(), gmask)
    container = Container(MODE_LOSSY, TIMES_MODES[times_mode], FLAG_PRUNED if pruned else 0,
                          model.fingerprint(), model.config.lam, model.config.frame_dt, T, s.M,
                          precision, seed, 0, times_block, msg.to_bytes())
    stats = CompressStats(st.bits, st.info_bits, est, coded_bits, s.M, knots,
                          quantizer.dequantize(idx), refused)
    return container.to_bytes(), stats


def _compress_lossless(levels, model, quantizer, seed, pruned):
    with pruned_mode(model, pruned):
        msg, st, n_words = encode_with_seed(levels, model, quantizer, seed)
    T = levels.shape[0]
    container = Container(MODE_LOSSLESS, TIMES_FULL, FLAG_PRUNED if pruned else 0, model.fingerprint(),
                          model.config.lam, model.config.frame_dt, T, T - 1, quantizer.precision, seed,
                          n_words, b"", msg.to_bytes())
    knots = np.concatenate([[0.0], data_times(T, model.config.frame_dt)])
    stats = CompressStats(st.net_bits, st.elbo_bits, 0.0, 0, T - 1, knots, st.latents)
    return container.to_bytes(), stats


def read_container(blob: bytes, model: LatentVDSDE) -> Container:
    c = Container.from_bytes(blob)
    if c.model_hash != model.fingerprint():
        raise ModelMismatch("container was written with a different model")
    return c


def decompress(blob: bytes, model: LatentVDSDE, query_times: Optional[np.ndarray] = None) -> np.ndarray:
    """Lossy: decoded (Q, D_x) values at ``query_times`` (default: the frame
    times).  Lossless: the exact (T, D_x) integer levels."""
    c = read_container(blob, model)
    quantizer = Quantizer(c.precision)
    try:
        msg = AnsMessage.from_bytes(c.latents_block)
    except CodingError as exc:
        raise ContainerError(str(exc)) from exc
    with pruned_mode(model, c.pruned):
        if c.mode == MODE_LOSSLESS:
            try:
                msg, x = bitsback_decode(msg, model, quantizer, c.T)
            except CodingError as exc:
                raise ContainerError(f"corrupt bits-back payload: {exc}") from exc
            if msg != seed_message(c.seed, c.init_words):
                raise ContainerError("bits-back payload did not restore the seed message")
            return x
        t_end = model.t_end(c.T)
        if c.times_mode == TIMES_FULL:
            s = full_discretization(c.T, c.frame_dt)
        elif c.times_mode == TIMES_ESTIMATE:
            if len(c.times_block) != 8 * c.M:
                raise ContainerError("times block length does not match M")
            s = DiscretizationSet(np.frombuffer(c.times_block, dtype="<f8").copy(), t_end)
        else:
            s = decode_astar_times(model, c.times_block, t_end, c.seed)
        if s.M != c.M or not s.is_valid():
            raise ContainerError("decoded knot times are inconsistent with the header")
        knots = s.knots()
        gmask = model.global_mask().numpy()
        try:
            msg, deq = decode_latents(msg, knots, _model_nu(model), quantizer, model.config.d_z, gmask)
        except CodingError as exc:
            raise ContainerError(f"corrupt latent payload: {exc}") from exc
        if msg != AnsMessage():
            raise ContainerError("latent payload has leftover data")
        query = data_times(c.T, c.frame_dt) if query_times is None else np.asarray(query_times, dtype=np.float64)
        skel = Skeleton([s], knots[:, None], torch.from_numpy(deq)[:, None, :])
        with torch.no_grad():
            return model.reconstruct(skel, query)[0].numpy()


def parse_times(spec: str) -> np.ndarray:
    """``a:b:step`` to an inclusive grid (a, a+step, ..., b)."""
    try:
        a, b, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise ValueError(f"expected a:b:step, got {spec!r}") from exc
    if step <= 0 or b < a:
        raise ValueError("need step > 0 and b >= a")
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return a + step * np.arange(n)
