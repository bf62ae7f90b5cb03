"""Differentiable natural-cubic and linear interpolating splines.

Both spline kinds are linear operators in the knot values, so gradients with
respect to knot values flow through plain tensor arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .ou_prior import DomainError

KINDS = ("cubic", "linear")


@dataclass(frozen=True)
class Spline:
    kind: str
    knot_times: torch.Tensor  # (n,)
    knot_values: torch.Tensor  # (n, *shape)
    coeffs: torch.Tensor  # (n - 1, 4, *shape), local power basis in (t - t_i)

    @property
    def t_start(self) -> float:
        return float(self.knot_times[0])

    @property
    def t_stop(self) -> float:
        return float(self.knot_times[-1])

    def __call__(self, t) -> torch.Tensor:
        return evaluate(self, t)

    def linear_map(self, weight: torch.Tensor) -> "Spline":
        """Spline of ``values @ weight.T``; exact because fitting is linear."""
        return Spline(
            self.kind,
            self.knot_times,
            self.knot_values @ weight.T,
            self.coeffs @ weight.T,
        )


def _second_derivatives(times: torch.Tensor, values: torch.Tensor, ends=(0.0, 0.0)) -> torch.Tensor:
    n = times.shape[0]
    flat = values.reshape(n, -1)
    first = torch.full_like(flat[:1], float(ends[0]))
    last = torch.full_like(flat[:1], float(ends[1]))
    if n <= 2:
        return torch.cat([first, last]).reshape(values.shape)
    h = times[1:] - times[:-1]
    slope = (flat[1:] - flat[:-1]) / h[:, None]
    rhs = 6.0 * (slope[1:] - slope[:-1])
    rhs = torch.cat([rhs[:1] - h[0] * first, rhs[1:]])
    rhs = torch.cat([rhs[:-1], rhs[-1:] - h[-1] * last])
    A = torch.zeros(n - 2, n - 2, dtype=times.dtype)
    idx = torch.arange(n - 2)
    A[idx, idx] = 2.0 * (h[:-1] + h[1:])
    A[idx[1:], idx[:-1]] = h[1:-1]
    A[idx[:-1], idx[1:]] = h[1:-1]
    m = torch.cat([first, torch.linalg.solve(A, rhs), last])
    return m.reshape(values.shape)


def fit(kind: str, times, values, end_curvature=(0.0, 0.0)) -> Spline:
    """Interpolating spline through ``(times[i], values[i])``.

    The cubic kind defaults to natural boundary conditions (zero second
    derivative at both ends); with two knots it reduces to the straight line.
    ``end_curvature`` prescribes other end second derivatives.
    """
    if kind not in KINDS:
        raise DomainError(f"unknown spline kind {kind!r}")
    values = torch.as_tensor(values, dtype=torch.float64)
    times = torch.as_tensor(np.asarray(times, dtype=np.float64) if not isinstance(times, torch.Tensor) else times)
    times = times.to(values.dtype)
    if times.dim() != 1 or times.shape[0] < 2:
        raise DomainError("need at least two knots")
    if times.shape[0] != values.shape[0]:
        raise DomainError("knot times and values disagree in length")
    h = times[1:] - times[:-1]
    if not bool((h > 0).all()):
        raise DomainError("knot times must be strictly increasing")
    hb = h.reshape(-1, *([1] * (values.dim() - 1)))
    y0, y1 = values[:-1], values[1:]
    if kind == "linear":
        zero = torch.zeros_like(y0)
        coeffs = torch.stack([y0, (y1 - y0) / hb, zero, zero], dim=1)
    else:
        m = _second_derivatives(times, values, end_curvature)
        m0, m1 = m[:-1], m[1:]
        b = (y1 - y0) / hb - hb * (2.0 * m0 + m1) / 6.0
        coeffs = torch.stack([y0, b, 0.5 * m0, (m1 - m0) / (6.0 * hb)], dim=1)
    return Spline(kind, times, values, coeffs)


def _segment(spline: Spline, t: torch.Tensor):
    knots = spline.knot_times
    t = torch.clamp(t, knots[0], knots[-1])
    idx = torch.searchsorted(knots, t.detach().contiguous(), right=True) - 1
    idx = idx.clamp(0, knots.shape[0] - 2)
    return t - knots[idx], idx


def _horner(c: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    # c: (..., 4, *shape), u broadcast over *shape
    return c[:, 0] + u * (c[:, 1] + u * (c[:, 2] + u * c[:, 3]))


def evaluate(spline: Spline, t) -> torch.Tensor:
    """Values at query times ``t`` (shape (Q,) or scalar); clamps outside."""
    t = torch.as_tensor(t, dtype=spline.knot_times.dtype)
    scalar = t.dim() == 0
    t = t.reshape(-1)
    u, idx = _segment(spline, t)
    c = spline.coeffs[idx]
    u = u.reshape(-1, *([1] * (spline.knot_values.dim() - 1)))
    out = _horner(c, u)
    return out[0] if scalar else out


def evaluate_batched(spline: Spline, t) -> torch.Tensor:
    """Per-sequence queries for a spline with values of shape (n, B, F).

    ``t`` has shape (..., B); entry ``t[..., b]`` is evaluated on sequence b.
    Returns shape (..., B, F).
    """
    t = torch.as_tensor(t, dtype=spline.knot_times.dtype)
    lead = t.shape[:-1]
    B = t.shape[-1]
    t2 = t.reshape(-1, B)
    u, idx = _segment(spline, t2)
    cols = torch.arange(B).expand_as(idx)
    c = spline.coeffs[idx, :, cols]  # (Q, B, 4, F)
    u = u.unsqueeze(-1)
    out = c[..., 0, :] + u * (c[..., 1, :] + u * (c[..., 2, :] + u * c[..., 3, :]))
    return out.reshape(*lead, B, -1)
