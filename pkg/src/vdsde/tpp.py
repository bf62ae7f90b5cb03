"""Latent temporal point process over knot times.

The posterior is an autoregressive renewal-style process: each inter-event
gap is drawn from a truncated SoftplusLogistic whose parameters depend on the
hidden state at the previous point.  The prior is a homogeneous Poisson
process with fixed intensity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .interp import Spline, evaluate_batched

T_MAX = 1.0
SCALE_FLOOR = 1e-3
LN2 = math.log(2.0)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def inverse_softplus(x):
    """g(x) = log(e^x - 1), written to stay accurate for tiny and large x."""
    x = _t(x)
    return x + torch.log(-torch.expm1(-x))


def _logistic_arg(x, mu, s):
    return (inverse_softplus(x) - mu) / s


def sl_logpdf(x, mu, s):
    """log density of SoftplusLogistic(mu, s); -inf for x <= 0."""
    x, mu, s = _t(x), _t(mu), _t(s)
    pos = x > 0
    xs = torch.where(pos, x, torch.ones_like(x))
    u = _logistic_arg(xs, mu, s)
    # logistic log-density at g(x), minus log sigmoid(g(x)) = log(1 - e^{-x})
    lp = -u - torch.log(s) - 2.0 * F.softplus(-u) - torch.log(-torch.expm1(-xs))
    return torch.where(pos, lp, torch.full_like(lp, -math.inf))


def sl_log_cdf(x, mu, s):
    x, mu, s = _t(x), _t(mu), _t(s)
    pos = x > 0
    xs = torch.where(pos, x, torch.ones_like(x))
    out = F.logsigmoid(_logistic_arg(xs, mu, s))
    out = torch.where(torch.isinf(xs) & (xs > 0), torch.zeros_like(out), out)
    return torch.where(pos, out, torch.full_like(out, -math.inf))


def sl_cdf(x, mu, s):
    return torch.exp(sl_log_cdf(x, mu, s))


def sl_sample(mu, s, u):
    """Inverse-CDF draw: softplus(mu + s * logit(u))."""
    mu, s, u = _t(mu), _t(s), _t(u)
    return F.softplus(mu + s * torch.logit(u))


def sl_truncated_logpdf(x, mu, s, t_max=T_MAX):
    x = _t(x)
    lp = sl_logpdf(x, mu, s) - sl_log_cdf(_t(t_max), mu, s)
    return torch.where(x <= t_max, lp, torch.full_like(lp, -math.inf))


def _log_diff_sigmoid(a, b):
    """log(sigmoid(a) - sigmoid(b)) for a >= b."""
    return F.logsigmoid(a) + F.logsigmoid(-b) + torch.log(-torch.expm1(b - a))


class SoftplusLogistic:
    """SoftplusLogistic(mu, s) truncated to (0, t_max]; batched over tensors."""

    def __init__(self, mu, s, t_max: float = T_MAX):
        self.mu, self.s = _t(mu), _t(s)
        self.t_max = float(t_max)

    def _arg(self, x):
        return _logistic_arg(x, self.mu, self.s)

    @property
    def log_norm(self):
        if math.isinf(self.t_max):
            return torch.zeros_like(self.mu)
        return sl_log_cdf(self.t_max, self.mu, self.s)

    def log_prob(self, x):
        return sl_truncated_logpdf(x, self.mu, self.s, self.t_max)

    def cdf(self, x):
        x = torch.minimum(_t(x), torch.tensor(self.t_max, dtype=torch.float64))
        return torch.exp(sl_log_cdf(x, self.mu, self.s) - self.log_norm)

    def log_sf(self, r):
        """log P(gap > r) under the truncated law; -inf once r >= t_max."""
        r = _t(r)
        beyond = r >= self.t_max
        small = r <= 0
        rs = torch.where(beyond | small, torch.full_like(r, 0.5 * min(self.t_max, 1.0)), r)
        if math.isinf(self.t_max):
            out = F.logsigmoid(-self._arg(rs))
        else:
            a = self._arg(torch.full_like(rs, self.t_max))
            out = _log_diff_sigmoid(a, self._arg(rs)) - self.log_norm
        out = torch.where(small, torch.zeros_like(out), out)
        return torch.where(beyond, torch.full_like(out, -math.inf), out)

    def icdf(self, u):
        return sl_sample(self.mu, self.s, _t(u) * torch.exp(self.log_norm))

    def log_ratio_bound(self, prior: "Exponential") -> float:
        """Upper bound of log(q/p) on the support; inf when unbounded."""
        if bool((self.s > 1.0).any()):
            return math.inf
        return _grid_sup(self, prior)


class Exponential:
    """Exponential(rate) gap law, optionally truncated (same interface)."""

    def __init__(self, rate, t_max: float = math.inf):
        self.rate = _t(rate)
        self.t_max = float(t_max)

    @property
    def log_norm(self):
        if math.isinf(self.t_max):
            return torch.zeros_like(self.rate)
        return torch.log(-torch.expm1(-self.rate * self.t_max))

    def log_prob(self, x):
        x = _t(x)
        lp = torch.log(self.rate) - self.rate * x - self.log_norm
        ok = (x > 0) & (x <= self.t_max)
        return torch.where(ok, lp, torch.full_like(lp, -math.inf))

    def cdf(self, x):
        x = torch.clamp(_t(x), min=0.0, max=self.t_max)
        return -torch.expm1(-self.rate * x) / torch.exp(self.log_norm)

    def log_sf(self, r):
        r = _t(r)
        if math.isinf(self.t_max):
            return torch.where(r > 0, -self.rate * r, torch.zeros_like(r))
        beyond = r >= self.t_max
        rs = torch.clamp(r, min=0.0, max=0.5 * self.t_max)
        rs = torch.where(beyond, rs, torch.clamp(r, min=0.0))
        out = -self.rate * rs + torch.log(-torch.expm1(-self.rate * (self.t_max - rs))) - self.log_norm
        return torch.where(beyond, torch.full_like(out, -math.inf), out)

    def icdf(self, u):
        return -torch.log1p(-_t(u) * torch.exp(self.log_norm)) / self.rate

    def log_ratio_bound(self, prior: "Exponential") -> float:
        if math.isinf(self.t_max) and bool((self.rate < prior.rate).any()):
            return math.inf
        return _grid_sup(self, prior)


def _grid_sup(q, p, n: int = 4001) -> float:
    """Numerical sup of log q/p over the support of q, with a safety margin."""
    hi = q.t_max if math.isfinite(q.t_max) else float(50.0 / float(torch.as_tensor(p.rate).min()))
    x = torch.cat([torch.logspace(-12, 0, n, dtype=torch.float64) * hi, torch.linspace(0, hi, n, dtype=torch.float64)[1:]])
    lr = q.log_prob(x) - p.log_prob(x)
    i = int(torch.argmax(lr))
    best = float(lr[i])
    lo_x, hi_x = float(x[max(i - 1, 0)]), float(x[min(i + 1, len(x) - 1)])
    if hi_x > lo_x:
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(lambda v: -float(q.log_prob(v) - p.log_prob(v)), bounds=(lo_x, hi_x),
                              method="bounded", options={"xatol": 1e-12})
        best = max(best, -float(res.fun))
    return best + 1e-6 + 1e-6 * abs(best)


GapModel = Callable[[Optional[torch.Tensor], torch.Tensor, float], object]


@dataclass
class DiscretizationSet:
    """Sampled knot times strictly inside (0, t_end) and their log densities."""

    times: np.ndarray
    t_end: float
    log_q: float = float("nan")
    log_p: float = float("nan")

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)

    @property
    def M(self) -> int:
        return int(self.times.shape[0])

    def is_valid(self) -> bool:
        t = self.times
        if t.size == 0:
            return True
        return bool(t[0] > 0 and t[-1] < self.t_end and np.all(np.diff(t) > 0))

    def knots(self) -> np.ndarray:
        """Knot skeleton ``0, t_1, ..., t_M, t_end``."""
        return np.concatenate([[0.0], self.times, [self.t_end]])


def _hidden_at(h: Optional[Spline], cursor: torch.Tensor) -> Optional[torch.Tensor]:
    if h is None:
        return None
    if h.knot_values.dim() == 3:
        return evaluate_batched(h, cursor).detach()
    return h(cursor).detach()


@torch.no_grad()
def sample_posterior(h: Optional[Spline], nets: GapModel, t_end: float,
                     rng: np.random.Generator, batch: int = 1) -> list[DiscretizationSet]:
    """Draw knot sets for ``batch`` sequences from the autoregressive posterior.

    ``h`` is the hidden-state spline (values (n, batch, F)) or None for
    data-independent gap models.  ``nets(h_c, cursor, t_end)`` returns a gap
    distribution batched over sequences.  Hidden-state features are
    detached: this density only trains the gap model.
    """
    cursor = torch.zeros(batch, dtype=torch.float64)
    alive = np.ones(batch, dtype=bool)
    log_q = torch.zeros(batch, dtype=torch.float64)
    points: list[list[float]] = [[] for _ in range(batch)]
    while alive.any():
        dist = nets(_hidden_at(h, cursor), cursor, t_end)
        u = torch.from_numpy(np.clip(rng.random(batch), 1e-12, 1.0 - 1e-12))
        gap = dist.icdf(u)
        new = cursor + gap
        stop = (new >= t_end).numpy()
        term = torch.where(torch.from_numpy(stop), dist.log_sf(t_end - cursor), dist.log_prob(gap))
        alive_t = torch.from_numpy(alive)
        log_q = log_q + torch.where(alive_t, term, torch.zeros_like(term))
        emit = alive & ~stop
        for b in np.nonzero(emit)[0]:
            points[b].append(float(new[b]))
        alive = emit
        cursor = torch.where(torch.from_numpy(alive), new, cursor)
    return [DiscretizationSet(np.array(p), t_end, log_q=float(log_q[b])) for b, p in enumerate(points)]


def logq(sets: Sequence[DiscretizationSet], h: Optional[Spline], nets: GapModel) -> torch.Tensor:
    """Autoregressive log density of given knot sets, differentiable in the gap model.

    Returns one value per set; invalid sets (unordered, out of support) get -inf.
    """
    B = len(sets)
    t_end = sets[0].t_end
    L = max(s.M for s in sets) + 1
    cursors = np.zeros((L, B))
    targets = np.zeros((L, B))
    kind = np.zeros((L, B), dtype=np.int8)  # 0 pad, 1 point, 2 survival
    valid = np.ones(B, dtype=bool)
    for b, s in enumerate(sets):
        valid[b] = s.is_valid() and s.t_end == t_end
        c = np.concatenate([[0.0], s.times])
        cursors[: s.M + 1, b] = c
        targets[: s.M, b] = np.diff(c) if s.M else []
        targets[s.M, b] = t_end - c[-1]
        kind[: s.M, b] = 1
        kind[s.M, b] = 2
        cursors[s.M + 1:, b] = c[-1]
    cur = torch.from_numpy(cursors)
    hid = None
    if h is not None:
        hid = evaluate_batched(h, cur).detach() if h.knot_values.dim() == 3 else h(cur.reshape(-1)).detach().reshape(L, B, -1)
    dist = nets(hid, cur, t_end)
    tgt = torch.from_numpy(np.where(kind == 1, targets, 1e-3))
    lp = dist.log_prob(tgt)
    sf = dist.log_sf(torch.from_numpy(targets))
    kind_t = torch.from_numpy(kind)
    terms = torch.where(kind_t == 1, lp, torch.where(kind_t == 2, sf, torch.zeros_like(lp)))
    total = terms.sum(0)
    return torch.where(torch.from_numpy(valid), total, torch.full_like(total, -math.inf))


def prior_logp(lam: float, t_end: float, M) -> float:
    """Homogeneous Poisson process density: M log(lam) - t_end * lam."""
    return M * math.log(lam) - t_end * lam


def times_rate_bits(sets, h, nets, lam: float, t_end: float) -> torch.Tensor:
    """Per-sample (log q - log p) / ln 2: the Monte-Carlo KL estimate in bits."""
    lq = logq(sets, h, nets)
    lp = torch.tensor([prior_logp(lam, t_end, s.M) for s in sets], dtype=torch.float64)
    return (lq - lp) / LN2


class ConstantGaps:
    """Data-independent gap model (testing and REC experiments)."""

    def __init__(self, make: Callable[[torch.Tensor], object]):
        self.make = make

    def __call__(self, hidden, cursor, t_end):
        return self.make(cursor)


def gap_features(hidden: torch.Tensor, cursor: torch.Tensor, t_end: float, t_max: float) -> torch.Tensor:
    """Gap-model input: hidden state, elapsed fraction, remaining time in t_max units."""
    extra = torch.stack([cursor / t_end, (t_end - cursor) / t_max], dim=-1)
    return torch.cat([hidden, extra], dim=-1)


class GapNet(torch.nn.Module):
    """Maps (h(c), c) to SoftplusLogistic parameters (mu, s)."""

    def __init__(self, hidden_dim: int, width: int, t_max: float = T_MAX, depth: int = 2):
        super().__init__()
        from .nn import mlp

        self.t_max = t_max
        self.net = mlp([hidden_dim + 2] + [width] * depth + [2])

    def forward(self, hidden, cursor, t_end):
        out = self.net(gap_features(hidden, cursor, t_end, self.t_max))
        mu, s_raw = out[..., 0], out[..., 1]
        return SoftplusLogistic(mu, F.softplus(s_raw) + SCALE_FLOOR, self.t_max)
