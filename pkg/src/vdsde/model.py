"""Latent SDE with a learned temporal discretization (Latent VD-SDE).

Time convention: frame i (1-based) sits at t_i = i * frame_dt, so a sequence
of T frames spans [0, t_end] with t_end = T * frame_dt.  The knot skeleton of
a discretization set is (0, t_1, ..., t_M, t_end).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nn as vnn
from .interp import Spline, evaluate_batched, fit
from .ou_prior import GLOBAL_NU_THRESHOLD, OuParams, joint_log_density, transition_params
from .sde_sim import BrownianPath, LatentPath, euler_solve, pseudo_log_likelihood, stack_grids, union_grid
from .tpp import DiscretizationSet, GapNet, logq, prior_logp, sample_posterior

_LOG_2PI = math.log(2.0 * math.pi)
N_LEVELS = 256


@dataclass
class ModelConfig:
    d_x: int
    d_z: int = 16
    hidden: int = 64
    embed: int = 64
    width: int = 128
    gap_width: int = 64
    frame_dt: float = 0.1
    n_substeps: int = 4
    sigma_obs: float = 0.1
    obs: str = "gaussian"
    mixture_k: int = 3
    lam: float = 5.0
    t_max: float = 1.0
    prune_threshold: float = GLOBAL_NU_THRESHOLD
    nu_init: float = 0.5
    zhat_kind: str = "linear"
    rate_precision: int = 256
    norm_mean: Optional[list] = None
    norm_std: Optional[list] = None

    def __post_init__(self):
        if self.obs not in ("gaussian", "logistic-mixture"):
            raise ValueError(f"unknown observation model {self.obs!r}")
        if self.lam <= 0 or self.sigma_obs <= 0 or self.frame_dt <= 0:
            raise ValueError("lam, sigma_obs and frame_dt must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def data_times(T: int, frame_dt: float) -> np.ndarray:
    return frame_dt * np.arange(1, T + 1, dtype=np.float64)


def full_discretization(T: int, frame_dt: float) -> DiscretizationSet:
    """Knots at every frame time (the end frame is the t_end knot)."""
    t = data_times(T, frame_dt)
    return DiscretizationSet(t[:-1], float(t[-1]))


def linear_weights(knots: np.ndarray, query: np.ndarray):
    """Segment indices and weights of a linear interpolant (clamped outside)."""
    q = np.clip(query, knots[0], knots[-1])
    hi = np.clip(np.searchsorted(knots, q, side="right"), 1, len(knots) - 1)
    lo = hi - 1
    w = (q - knots[lo]) / (knots[hi] - knots[lo])
    return lo, hi, w


@dataclass
class Skeleton:
    """Per-sequence knot times (padded with t_end) and latent values there."""

    sets: list
    times: np.ndarray  # (L, B)
    values: torch.Tensor  # (L, B, D)


class LatentVDSDE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        self.embed = vnn.mlp([c.d_x, c.embed, c.embed])
        self.gru = vnn.BiGRU(c.embed, c.hidden)
        self.z0_net = vnn.mlp([2 * c.hidden, 2 * c.d_z])
        self.drift = vnn.mlp([c.d_z + 2 * c.hidden, c.width, c.width, c.d_z])
        out = c.d_x if c.obs == "gaussian" else c.d_x * 3 * c.mixture_k
        self.decoder = vnn.mlp([c.d_z, c.width, c.width, out])
        self.gaps = GapNet(2 * c.hidden, c.gap_width, c.t_max)
        self.log_nu = nn.Parameter(torch.full((c.d_z,), math.log(c.nu_init)))
        self.pruned = False

    # -- parameters -------------------------------------------------------

    @property
    def nu(self) -> torch.Tensor:
        return torch.exp(self.log_nu)

    def ou_params(self) -> OuParams:
        return OuParams(self.nu.detach().numpy().copy(), self.config.prune_threshold)

    def theta_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("gaps.")]

    def phi_parameters(self):
        return list(self.gaps.parameters())

    def prune(self):
        """Split latent dimensions by diffusion; returns (global_dims, local_dims)."""
        g = self.ou_params().global_mask
        return np.nonzero(g)[0], np.nonzero(~g)[0]

    def global_mask(self) -> torch.Tensor:
        if not self.pruned:
            return torch.zeros(self.config.d_z, dtype=torch.bool)
        return torch.from_numpy(self.ou_params().global_mask)

    # -- encoder / posterior ------------------------------------------------

    def t_end(self, T: int) -> float:
        return T * self.config.frame_dt

    def encode(self, x: torch.Tensor) -> Spline:
        """Cubic spline through the bidirectional GRU outputs; x is (B, T, D_x)."""
        e = self.embed(x).transpose(0, 1)
        out = self.gru(e)
        return fit("cubic", data_times(x.shape[1], self.config.frame_dt), out)

    def z0_distribution(self, h: Spline):
        h0 = evaluate_batched(h, torch.zeros(h.knot_values.shape[1]))
        params = self.z0_net(h0)
        mean, raw = params.chunk(2, dim=-1)
        return mean, F.softplus(raw)

    def drift_fn(self, h: Spline) -> "PosteriorDrift":
        return PosteriorDrift(self.drift, h, self.config.d_z)

    def posterior_path(self, h: Spline, grid: np.ndarray, rng: np.random.Generator, drift=None):
        """Sample z0 (reparameterised) and Euler-solve the posterior SDE on ``grid`` (K+1, B)."""
        mean, std = self.z0_distribution(h)
        eps = torch.from_numpy(rng.standard_normal(mean.shape))
        z0 = mean + std * eps
        log_q0 = (-0.5 * (_LOG_2PI + eps * eps) - torch.log(std)).sum(-1)
        path = BrownianPath.sample(int(rng.integers(2**63)), grid, self.config.d_z)
        f = self.drift_fn(h) if drift is None else drift
        sol = euler_solve(z0, f, self.nu, path)
        if self.pruned:
            g = self.global_mask()
            if bool(g.any()):
                const = z0.unsqueeze(0).expand_as(sol.values)
                sol = LatentPath(sol.times, torch.where(g, const, sol.values))
        return z0, log_q0, sol

    def solver_grid(self, sets: Sequence[DiscretizationSet], T: int) -> np.ndarray:
        t = data_times(T, self.config.frame_dt)
        grids = [union_grid(0.0, s.t_end, self.config.n_substeps * T, np.concatenate([t, s.times])) for s in sets]
        return stack_grids(grids)

    @staticmethod
    def skeleton(path: LatentPath, sets: Sequence[DiscretizationSet]) -> Skeleton:
        grid = path.times.numpy()
        B = grid.shape[1]
        L = max(s.M for s in sets) + 2
        times = np.empty((L, B))
        idx = np.empty((L, B), dtype=np.int64)
        for b, s in enumerate(sets):
            k = s.knots()
            times[: len(k), b] = k
            times[len(k):, b] = k[-1]
            pos = np.searchsorted(grid[:, b], times[:, b])
            if not np.array_equal(grid[pos, b], times[:, b]):
                raise ValueError("knot times missing from the solver grid")
            idx[:, b] = pos
        cols = torch.arange(B).expand(L, B)
        return Skeleton(list(sets), times, path.values[torch.from_numpy(idx), cols])

    # -- reconstruction -----------------------------------------------------

    def interpolate(self, skel: Skeleton, query: np.ndarray) -> torch.Tensor:
        """z-hat at ``query`` times for every sequence; returns (Q, B, D)."""
        Q, B = len(query), len(skel.sets)
        if self.config.zhat_kind == "cubic":
            outs = []
            for b, s in enumerate(skel.sets):
                n = s.M + 2
                sp = fit("cubic", skel.times[:n, b], skel.values[:n, b])
                outs.append(sp(torch.from_numpy(np.asarray(query, dtype=np.float64))))
            return torch.stack(outs, dim=1)
        lo = np.empty((Q, B), dtype=np.int64)
        hi = np.empty((Q, B), dtype=np.int64)
        w = np.empty((Q, B))
        for b, s in enumerate(skel.sets):
            lo[:, b], hi[:, b], w[:, b] = linear_weights(s.knots(), query)
        cols = torch.arange(B).expand(Q, B)
        v_lo = skel.values[torch.from_numpy(lo), cols]
        v_hi = skel.values[torch.from_numpy(hi), cols]
        wt = torch.from_numpy(w).unsqueeze(-1)
        return (1.0 - wt) * v_lo + wt * v_hi

    def decode(self, zhat: torch.Tensor) -> torch.Tensor:
        return self.decoder(zhat)

    def reconstruct(self, skel: Skeleton, query: np.ndarray) -> torch.Tensor:
        """Decoded observations (mean for Gaussian, mixture mean otherwise), (B, Q, D_x)."""
        out = self.decode(self.interpolate(skel, query)).transpose(0, 1)
        if self.config.obs == "gaussian":
            return out
        logit_pi, means, _ = self._mixture_params(out)
        return (torch.softmax(logit_pi, -1) * torch.clamp(means, -1, 1)).sum(-1)

    # -- observation models -------------------------------------------------

    def _mixture_params(self, out):
        K = self.config.mixture_k
        out = out.reshape(*out.shape[:-1], self.config.d_x, 3, K)
        return out[..., 0, :], out[..., 1, :], torch.clamp(out[..., 2, :], min=-7.0)

    def obs_log_pmf(self, out: torch.Tensor) -> torch.Tensor:
        """Discretised logistic mixture: log PMF over the 256 levels, shape (..., D_x, 256)."""
        logit_pi, means, log_s = self._mixture_params(out)
        return logistic_mixture_log_pmf(logit_pi, means, log_s)

    def recon_nll(self, x: torch.Tensor, zhat: torch.Tensor) -> torch.Tensor:
        """-sum_i log p(x_i | zhat(t_i)) per sequence; x is (B, T, D_x), zhat (T, B, D)."""
        out = self.decode(zhat).transpose(0, 1)
        if self.config.obs == "gaussian":
            s2 = self.config.sigma_obs**2
            r = x - out
            return (0.5 * (_LOG_2PI + math.log(s2)) + 0.5 * r * r / s2).sum((1, 2))
        lp = self.obs_log_pmf(out)
        idx = to_levels(x).unsqueeze(-1)
        return -lp.gather(-1, idx).squeeze(-1).sum((1, 2))

    # -- rates --------------------------------------------------------------

    def prior_cross_entropy(self, skel: Skeleton) -> torch.Tensor:
        """-log p of the knot skeleton under the OU prior, nats per sequence."""
        mask = ~self.global_mask()
        return -joint_log_density(self.nu, skel.times, skel.values, transition_mask=mask,
                                  reduce=False, padded=True)

    def lossy_rate(self, skel: Skeleton) -> torch.Tensor:
        """Smooth estimate of the coded latent bits (in nats) at ``rate_precision`` bins.

        Each coded value costs about -log(p(z | prev) * w) with w the central
        max-entropy bin width 1 / (P phi(0)); softplus keeps every term
        non-negative since a PMF never exceeds one.  Dense knots therefore
        cannot buy a negative rate.  Pruned dimensions stop after z0.
        """
        values = skel.values
        offset = math.log(self.config.rate_precision) - 0.5 * _LOG_2PI
        z0 = values[0]
        first = F.softplus(0.5 * z0 * z0 + offset).sum(-1)
        times = torch.from_numpy(skel.times)
        dt = times[1:] - times[:-1]
        real = dt > 0
        m, v = transition_params(self.nu, torch.where(real, dt, torch.ones_like(dt)).unsqueeze(-1))
        z, prev = values[1:], values[:-1]
        nll = 0.5 * (_LOG_2PI + torch.log(v) + (z - m * prev) ** 2 / v)
        bits = F.softplus(nll + offset)
        keep = real.unsqueeze(-1) & ~self.global_mask()
        return first + torch.where(keep, bits, torch.zeros_like(bits)).sum((0, 2))

    def lossless_rate(self, skel: Skeleton, log_q0: torch.Tensor, h: Spline) -> torch.Tensor:
        """Euler pseudo-likelihood minus prior density at the skeleton, nats per sequence."""
        lq = pseudo_log_likelihood(self.drift_fn(h), self.nu, torch.from_numpy(skel.times), skel.values,
                                   log_q0, reduce=False)
        lp = joint_log_density(self.nu, skel.times, skel.values, reduce=False, padded=True)
        return lq - lp

    # -- objective ----------------------------------------------------------

    def objective(self, x: torch.Tensor, rng: np.random.Generator, stage: int,
                  rate: str = "lossy", sets: Optional[list] = None) -> dict:
        """Training loss and its components (nats, averaged over the batch).

        ``loss`` = reconstruction + latent rate + times rate; ``train_loss``
        has the same value but also carries the REINFORCE gradient for the
        gap model.
        """
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        B, T, _ = x.shape
        t_end = self.t_end(T)
        h = self.encode(x)
        if sets is None:
            if stage == 1:
                sets = [full_discretization(T, self.config.frame_dt) for _ in range(B)]
            else:
                sets = sample_posterior(h, self.gaps, t_end, rng, B)
        grid = self.solver_grid(sets, T)
        _, log_q0, path = self.posterior_path(h, grid, rng)
        skel = self.skeleton(path, sets)
        zhat = self.interpolate(skel, data_times(T, self.config.frame_dt))
        recon = self.recon_nll(x, zhat)
        latent = self.lossy_rate(skel) if rate == "lossy" else self.lossless_rate(skel, log_q0, h)
        per_seq = recon + latent
        out = {"recon": recon.mean(), "latent_rate": latent.mean(),
               "M": float(np.mean([s.M for s in sets])), "sets": sets}
        if stage == 2:
            lq = logq(sets, h, self.gaps)
            lp = torch.tensor([prior_logp(self.config.lam, t_end, s.M) for s in sets])
            times = lq - lp
            total_b = per_seq + times
            surrogate = vnn.reinforce_surrogate(total_b.detach(), lq)
            out["times_rate"] = times.mean()
            loss = out["recon"] + out["latent_rate"] + out["times_rate"]
            out["train_loss"] = loss + surrogate - surrogate.detach()
        else:
            out["times_rate"] = torch.zeros(())
            loss = out["recon"] + out["latent_rate"]
            out["train_loss"] = loss
        out["loss"] = loss
        if not bool(torch.isfinite(loss)):
            parts = {k: float(out[k]) for k in ("recon", "latent_rate", "times_rate")}
            raise vnn.TrainingError(f"non-finite loss: {parts}")
        return out

    # -- checkpoint ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {"model_config": asdict(self.config)}
        return vnn.save_tensors(self.state_dict(), header)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LatentVDSDE":
        tensors, header = vnn.load_tensors(blob)
        model = cls(ModelConfig.from_dict(header["model_config"]))
        model.load_state_dict(tensors)
        return model

    def fingerprint(self) -> int:
        """64-bit model hash stored in compressed containers."""
        digest = hashlib.sha256(self.to_bytes()).digest()
        return struct.unpack("<Q", digest[:8])[0]


class PosteriorDrift:
    """f_theta(z, h(t)) with the hidden-state half of the first layer folded into h.

    Because the spline is linear in its values, projecting the knot values
    once gives an exact spline of the projected features.
    """

    def __init__(self, net: nn.Sequential, h: Spline, d_z: int):
        first = net[0]
        self.w_z = first.weight[:, :d_z]
        self.bias = first.bias
        self.h_proj = h.linear_map(first.weight[:, d_z:])
        self.rest = net[1:]

    def __call__(self, z, t):
        return self.rest(z @ self.w_z.T + evaluate_batched(self.h_proj, t) + self.bias)

    def bind(self, times: torch.Tensor):
        # unbind: one backward stack instead of a dense scatter per step
        feats = torch.unbind(evaluate_batched(self.h_proj, times) + self.bias)

        def step(z, k):
            return self.rest(z @ self.w_z.T + feats[k])

        return step


def to_levels(x: torch.Tensor) -> torch.Tensor:
    """Map data scaled to [-1, 1] back to integer levels 0..255."""
    return torch.clamp(torch.round((x + 1.0) * 127.5), 0, N_LEVELS - 1).long()


def from_levels(levels) -> torch.Tensor:
    return torch.as_tensor(levels, dtype=torch.float64) / 127.5 - 1.0


def logistic_mixture_log_pmf(logit_pi, means, log_s) -> torch.Tensor:
    """Log PMF over 256 levels of a discretised logistic mixture.

    Inputs have trailing dimension K; output has trailing dimension 256 and
    sums to one exactly in exact arithmetic (edge bins absorb the tails).
    """
    centers = from_levels(torch.arange(N_LEVELS))
    half = 1.0 / 255.0
    u = centers.view(*([1] * logit_pi.dim()), N_LEVELS)
    mu = means.unsqueeze(-1)
    inv_s = torch.exp(-log_s).unsqueeze(-1)
    upper = (u + half - mu) * inv_s
    lower = (u - half - mu) * inv_s
    log_cdf_up = F.logsigmoid(upper)
    log_sf_low = F.logsigmoid(-lower)
    # sigmoid(a) - sigmoid(b) = sigmoid(a) sigmoid(-b) (1 - e^{b - a})
    mid = log_cdf_up + log_sf_low + torch.log(-torch.expm1(lower - upper))
    first = torch.zeros(N_LEVELS, dtype=torch.bool)
    first[0] = True
    last = torch.zeros(N_LEVELS, dtype=torch.bool)
    last[-1] = True
    comp = torch.where(first, log_cdf_up, torch.where(last, log_sf_low, mid))
    log_w = torch.log_softmax(logit_pi, -1).unsqueeze(-1)
    return torch.logsumexp(log_w + comp, dim=-2)
