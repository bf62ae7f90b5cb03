"""Closed-form Ornstein-Uhlenbeck prior.

The prior latent process has drift ``-0.5 * nu**2 * z`` and diagonal diffusion
``nu``, which makes N(0, 1) its stationary marginal in every dimension.  All
densities are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

GLOBAL_NU_THRESHOLD = 1e-3
_LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class OuParams:
    """Diagonal diffusion of the OU prior, one entry per latent dimension."""

    nu: np.ndarray
    threshold: float = GLOBAL_NU_THRESHOLD

    def __post_init__(self):
        nu = np.atleast_1d(np.asarray(self.nu, dtype=np.float64))
        if not np.all(np.isfinite(nu)) or np.any(nu < 0):
            raise DomainError("nu must be finite and non-negative")
        object.__setattr__(self, "nu", nu)

    @property
    def dim(self) -> int:
        return self.nu.shape[0]

    @property
    def global_mask(self) -> np.ndarray:
        """True for dimensions that are effectively time-constant."""
        return self.nu <= self.threshold

    @property
    def local_mask(self) -> np.ndarray:
        return ~self.global_mask


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def transition_params(nu, dt):
    """Mean multiplier and variance of the OU transition over ``dt``.

    Works elementwise on floats, numpy arrays or tensors (tensors keep their
    autograd graph).  Floats in give floats out.
    """
    scalar = isinstance(nu, (int, float)) and isinstance(dt, (int, float))
    if not isinstance(nu, torch.Tensor) and not isinstance(dt, torch.Tensor):
        nu_a = np.asarray(nu, dtype=np.float64)
        dt_a = np.asarray(dt, dtype=np.float64)
        if not (np.all(np.isfinite(nu_a)) and np.all(nu_a >= 0)):
            raise DomainError(f"invalid nu: {nu}")
        if not (np.all(dt_a > 0) and np.all(~np.isnan(dt_a))):
            raise DomainError(f"invalid dt: {dt}")
    nu_t, dt_t = _as_tensor(nu), _as_tensor(dt)
    rate = nu_t * nu_t * dt_t
    mean_mult = torch.exp(-0.5 * rate)
    var = -torch.expm1(-rate)
    if scalar:
        return float(mean_mult), float(var)
    if not isinstance(nu, torch.Tensor) and not isinstance(dt, torch.Tensor):
        return mean_mult.numpy(), var.numpy()
    return mean_mult, var


def _normal_logpdf(x, mean, var):
    """log N(x; mean, var) with the var == 0 case mapped to 0 / -inf."""
    degenerate = var <= 0
    safe_var = torch.where(degenerate, torch.ones_like(var), var)
    diff = x - mean
    lp = -0.5 * (_LOG_2PI + torch.log(safe_var) + diff * diff / safe_var)
    if bool(degenerate.any()):
        exact = torch.zeros_like(lp)
        miss = torch.full_like(lp, -math.inf)
        lp = torch.where(degenerate, torch.where(diff == 0, exact, miss), lp)
    return lp


def joint_log_density(nu, times, values, *, transition_mask=None, reduce=True, padded=False):
    """Exact log density of an OU skeleton.

    ``times`` has shape (K,) or (K, *batch); ``values`` has shape
    (K, *batch, D).  ``transition_mask`` (broadcastable to D) switches off the
    transition terms of pruned dimensions, leaving their initial-value term.
    Returns the total over knots and dimensions, or per-batch totals when
    ``reduce=False``.  With ``padded=True`` zero-length steps are accepted;
    they contribute nothing when the value is repeated exactly.
    """
    values = _as_tensor(values)
    times = _as_tensor(times).to(values.dtype)
    nu_t = _as_tensor(nu).to(values.dtype)
    if values.shape[0] != times.shape[0]:
        raise DomainError("values and times disagree in length")
    lp = _normal_logpdf(values[0], torch.zeros_like(values[0]), torch.ones_like(values[0]))
    if values.shape[0] > 1:
        dt = times[1:] - times[:-1]
        if bool((dt < 0).any()) or (not padded and bool((dt == 0).any())):
            raise DomainError("times must be strictly increasing")
        while dt.dim() < values.dim():
            dt = dt.unsqueeze(-1)
        m, v = transition_params(nu_t, dt)
        trans = _normal_logpdf(values[1:], values[:-1] * m, v.expand_as(values[1:]))
        if transition_mask is not None:
            keep = _as_tensor(transition_mask).to(torch.bool)
            trans = torch.where(keep, trans, torch.zeros_like(trans))
        lp = lp + trans.sum(0)
    per_batch = lp.sum(-1)
    return per_batch.sum() if reduce else per_batch


def bridge_mean(nu: float, t: float, left: tuple[float, float], right: tuple[float, float]) -> float:
    """E[z(t) | z(t1), z(t2)] for the OU prior, t1 < t < t2."""
    (t1, z1), (t2, z2) = left, right
    if not t1 < t < t2:
        raise DomainError(f"t={t} outside ({t1}, {t2})")
    theta = 0.5 * nu * nu
    if theta * (t2 - t1) < 1e-8:
        w = (t - t1) / (t2 - t1)
        return (1.0 - w) * z1 + w * z2
    denom = math.sinh(theta * (t2 - t1))
    return (z1 * math.sinh(theta * (t2 - t)) + z2 * math.sinh(theta * (t - t1))) / denom
