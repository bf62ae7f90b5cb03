"""Euler-Maruyama simulation with reproducible Brownian paths.

Grids may be batched: times of shape (K+1, B) give every sequence its own
grid.  Shorter grids are padded by repeating ``t_end``; zero-length steps
leave the state untouched and add nothing to the pseudo-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .ou_prior import DomainError, _as_tensor, _normal_logpdf

Drift = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

DEFAULT_SUBSTEPS = 4


class SimulationError(RuntimeError):
    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.6g}")
        self.time = time


def standard_normals(seed: int, shape: Sequence[int]) -> np.ndarray:
    """Counter-based standard normals: entry order depends only on the seed.

    Row-major filling means element (k, ...) does not depend on how many rows
    were requested, so prefixes of longer draws agree bit-for-bit.
    """
    gen = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    return gen.standard_normal(tuple(shape))


@dataclass(frozen=True)
class BrownianPath:
    seed: int
    grid: np.ndarray
    increments: torch.Tensor

    @classmethod
    def sample(cls, seed: int, grid, dim: int) -> "BrownianPath":
        grid = np.asarray(grid, dtype=np.float64)
        dt = np.diff(grid, axis=0)
        if np.any(dt < 0):
            raise DomainError("Brownian grid must be non-decreasing")
        noise = standard_normals(seed, dt.shape + (dim,))
        inc = np.sqrt(dt)[..., None] * noise
        return cls(seed=seed, grid=grid, increments=torch.from_numpy(inc))

    @property
    def dim(self) -> int:
        return self.increments.shape[-1]


def union_grid(t0: float, t_end: float, n_steps: int, required=()) -> np.ndarray:
    """Uniform grid of ``n_steps`` steps merged with ``required`` times.

    Required times (and both endpoints) appear exactly; uniform points within
    1e-9 * span of a required time are dropped instead of duplicated.
    """
    if not t_end > t0 or n_steps < 1:
        raise DomainError("need t_end > t0 and n_steps >= 1")
    req = np.unique(np.concatenate([[t0, t_end], np.asarray(required, dtype=np.float64).ravel()]))
    if req[0] < t0 or req[-1] > t_end:
        raise DomainError("required times outside [t0, t_end]")
    uniform = t0 + (t_end - t0) * np.arange(1, n_steps) / n_steps
    tol = 1e-9 * (t_end - t0)
    pos = np.clip(np.searchsorted(req, uniform), 1, len(req) - 1)
    near = np.minimum(np.abs(uniform - req[pos - 1]), np.abs(uniform - req[pos]))
    return np.sort(np.concatenate([req, uniform[near > tol]]))


def stack_grids(grids: Sequence[np.ndarray]) -> np.ndarray:
    """Pad per-sequence grids to a common length by repeating the last time."""
    n = max(len(g) for g in grids)
    out = np.empty((n, len(grids)))
    for b, g in enumerate(grids):
        out[: len(g), b] = g
        out[len(g):, b] = g[-1]
    return out


@dataclass
class LatentPath:
    """Simulated trajectory: ``values[k]`` is the state at ``times[k]``."""

    times: torch.Tensor
    values: torch.Tensor

    def at(self, query, batch_index: int | None = None) -> torch.Tensor:
        """Values at times that lie exactly on the grid."""
        query = np.asarray(query, dtype=np.float64)
        grid = self.times.detach().numpy()
        vals = self.values
        if batch_index is not None:
            grid = grid[:, batch_index]
            vals = vals[:, batch_index]
        elif grid.ndim > 1:
            raise ValueError("batched path needs batch_index")
        idx = np.searchsorted(grid, query)
        idx = np.clip(idx, 0, len(grid) - 1)
        if not np.array_equal(grid[idx], query):
            raise DomainError("query times are not grid times")
        return vals[torch.from_numpy(idx)]


def euler_solve(z0, drift: Drift, nu, path: BrownianPath, grid=None) -> LatentPath:
    """z_{k+1} = z_k + dt_k * drift(z_k, t_k) + nu * dW_k on the path's grid.

    A drift exposing ``bind(times)`` is bound to the whole grid once and then
    called as ``step(z, k)``; this lets time features be evaluated in bulk.
    """
    z0 = _as_tensor(z0)
    times = torch.from_numpy(np.asarray(path.grid if grid is None else grid, dtype=np.float64))
    nu_t = _as_tensor(nu).to(z0.dtype)
    dW = path.increments
    if dW.shape[0] != times.shape[0] - 1:
        raise DomainError("Brownian path does not match the solver grid")
    dts = times[1:] - times[:-1]
    bind = getattr(drift, "bind", None)
    step = bind(times) if bind is not None else (lambda z, k: drift(z, times[k]))
    z = z0
    states = [z0]
    for k in range(dts.shape[0]):
        f = step(z, k)
        if not bool(torch.isfinite(f).all()):
            raise SimulationError("non-finite drift", float(times[k].min()))
        dt = dts[k].unsqueeze(-1) if dts.dim() > 1 else dts[k]
        z = z + dt * f + nu_t * dW[k]
        states.append(z)
    return LatentPath(times=times, values=torch.stack(states))


def pseudo_log_likelihood(drift: Drift, nu, times, values, q0_logpdf=0.0, *, reduce=True):
    """Euler pseudo-likelihood of a skeleton plus the initial-state term.

    log q(z_0) + sum_i log N(z_i; z_{i-1} + dt_i f(z_{i-1}, t_{i-1}), dt_i nu^2)
    """
    values = _as_tensor(values)
    times = _as_tensor(times).to(values.dtype)
    nu_t = _as_tensor(nu).to(values.dtype)
    if values.shape[0] != times.shape[0]:
        raise DomainError("values and times disagree in length")
    q0 = _as_tensor(q0_logpdf).to(values.dtype)
    if values.shape[0] == 1:
        return q0.sum() if reduce else q0
    dt = times[1:] - times[:-1]
    if bool((dt < 0).any()):
        raise DomainError("times must be non-decreasing")
    prev = values[:-1]
    f = drift(prev, times[:-1])
    while dt.dim() < values.dim():
        dt = dt.unsqueeze(-1)
    mean = prev + dt * f
    var = dt * nu_t * nu_t
    lp = _normal_logpdf(values[1:], mean, var.expand_as(mean)).sum(0).sum(-1)
    total = q0 + lp
    return total.sum() if reduce else total

