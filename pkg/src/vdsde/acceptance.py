"""Acceptance checks shared by ``vdsde selftest`` and the test suite.

Each check returns a :class:`Result`; ``run_all`` prints one PASS/FAIL line
per criterion.  Thresholds are fixed here and never relaxed by callers.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from scipy import integrate, stats

from . import nn as vnn
from .codec.ans import AnsMessage, Pmf16, quantize_pmf
from .codec.bitsback import bitsback_decode, bitsback_encode, seed_message
from .codec.pipeline import compress, decompress, parse_times
from .codec.quantizer import Quantizer
from .codec.rec import astar_decode, astar_encode, elias_delta_length
from .data import gen_synthetic
from .model import LatentVDSDE, ModelConfig
from .ou_prior import joint_log_density, transition_params
from .tpp import (ConstantGaps, DiscretizationSet, Exponential, SoftplusLogistic, logq, prior_logp,
                  sl_cdf)
from .train import TrainConfig, train


@dataclass
class Result:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _normal_pdf(x, m, v):
    return math.exp(-0.5 * (x - m) ** 2 / v) / math.sqrt(2 * math.pi * v)


# --- 1 ---------------------------------------------------------------------

def check_ou_exactness() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst_ck = worst_st = 0.0
    for _ in range(100):
        nu = rng.uniform(0.01, 3.0)
        dt1, dt2 = rng.uniform(0.001, 3.0, size=2)
        m1, v1 = transition_params(nu, dt1)
        m2, v2 = transition_params(nu, dt2)
        m, v = transition_params(nu, dt1 + dt2)
        worst_ck = max(worst_ck, abs(m1 * m2 - m) / m, abs(v2 + m2 * m2 * v1 - v) / v)
        worst_st = max(worst_st, abs(m1 * m1 + v1 - 1.0))
    worst_joint = 0.0
    for _ in range(20):
        nu = rng.uniform(0.1, 2.0)
        times = np.cumsum(rng.uniform(0.1, 1.5, size=4))
        z = rng.normal(size=4)
        ref = _normal_pdf(z[0], 0.0, 1.0)
        for i in range(1, 4):
            a = math.exp(-0.5 * nu * nu * (times[i] - times[i - 1]))
            ref *= _normal_pdf(z[i], a * z[i - 1], 1.0 - a * a)
        got = float(joint_log_density([nu], times, z[:, None]))
        worst_joint = max(worst_joint, abs(got - math.log(ref)) / abs(math.log(ref)))
    ok = worst_ck <= 1e-12 and worst_st <= 1e-12 and worst_joint <= 1e-10
    return ok, f"CK rel err {worst_ck:.1e}, stationarity {worst_st:.1e}, joint density {worst_joint:.1e}"


# --- 2 ---------------------------------------------------------------------

def _tiny_model(seed=0, **kw) -> LatentVDSDE:
    torch.manual_seed(seed)
    cfg = dict(d_x=2, d_z=2, hidden=3, embed=3, width=4, gap_width=3, n_substeps=2, lam=5.0)
    cfg.update(kw)
    return LatentVDSDE(ModelConfig(**cfg))


def check_gradients() -> tuple[bool, str]:
    model = _tiny_model()
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 5, 2)))

    def loss():
        return model.objective(x, np.random.default_rng(5), stage=1)["loss"]

    params = list(model.theta_parameters())
    model.zero_grad()
    loss().backward()
    auto = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    fd = torch.empty_like(auto)
    h = 1e-6
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss())
                flat[i] = old - h
                down = float(loss())
                flat[i] = old
                fd[k] = (up - down) / (2 * h)
                k += 1
    scale = torch.maximum(auto.abs(), fd.abs()).clamp(min=1e-3 * float(auto.abs().max()))
    rel = float(((auto - fd).abs() / scale).max())

    # the score-function surrogate must not reach theta or nu
    out = model.objective(x, np.random.default_rng(9), stage=2)
    extra = out["train_loss"] - out["loss"]
    grads = torch.autograd.grad(extra, params, allow_unused=True)
    leak = max(0.0 if g is None else float(g.abs().max()) for g in grads)
    phi = torch.autograd.grad(extra, model.phi_parameters(), allow_unused=True)
    phi_norm = sum(0.0 if g is None else float(g.abs().sum()) for g in phi)
    ok = rel <= 1e-4 and leak == 0.0 and phi_norm > 0.0
    return ok, (f"max rel FD error {rel:.1e} over {auto.numel()} params; surrogate grad on theta/nu "
                f"{leak:.1e}, on phi {phi_norm:.2e}")


# --- 3 ---------------------------------------------------------------------

def check_softplus_logistic() -> tuple[bool, str]:
    x = np.linspace(0.05, 8.0, 20)
    cdf = sl_cdf(torch.from_numpy(x), 0.0, 1.0).numpy()
    err = float(np.max(np.abs(cdf - (1.0 - np.exp(-x)))))
    worst_mass = 0.0
    rng = np.random.default_rng(3)
    for _ in range(5):
        d = SoftplusLogistic(rng.uniform(-2, 1), rng.uniform(0.3, 1.5), 1.0)
        f = lambda v: math.exp(float(d.log_prob(torch.tensor(v))))
        mass, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)
        worst_mass = max(worst_mass, abs(mass - 1.0))
    d = SoftplusLogistic(-0.4, 0.7, 1.0)
    u = torch.from_numpy(np.random.default_rng(4).random(100_000))
    samples = d.icdf(u).numpy()
    ks = stats.kstest(samples, lambda v: d.cdf(torch.from_numpy(np.asarray(v))).numpy())
    ok = err <= 1e-9 and worst_mass <= 1e-6 and ks.pvalue > 0.01
    return ok, f"Exp(1) reduction err {err:.1e}, truncated mass err {worst_mass:.1e}, KS p={ks.pvalue:.3f}"


# --- 4 ---------------------------------------------------------------------

def _toy_gaps():
    return ConstantGaps(lambda c: SoftplusLogistic(-0.3 + 0.5 * c, torch.full_like(c, 0.35), 1.0))


def posterior_mass_m_le_2(t_end: float = 0.6, n: int = 48) -> float:
    """Integral of exp(logq) over knot sets with at most two points."""
    nets = _toy_gaps()
    xg, wg = np.polynomial.legendre.leggauss(n)
    u = 0.5 * (xg + 1.0)
    w = 0.5 * wg
    sets = [DiscretizationSet(np.array([]), t_end)]
    weights = [1.0]
    for ui, wi in zip(u, w):
        sets.append(DiscretizationSet(np.array([ui * t_end]), t_end))
        weights.append(wi * t_end)
    for ui, wi in zip(u, w):
        t1 = ui * t_end
        for vj, wj in zip(u, w):
            t2 = t1 + vj * (t_end - t1)
            sets.append(DiscretizationSet(np.array([t1, t2]), t_end))
            weights.append(wi * t_end * wj * (t_end - t1))
    lq = logq(sets, None, nets).numpy()
    return float(np.sum(np.asarray(weights) * np.exp(lq)))


def reinforce_enumeration(n_draws: int = 100_000, batch: int = 4, seed: int = 0):
    """Estimator mean, its standard error and the exact gradient on a two-set toy.

    q picks knot set A with probability sigmoid(phi), else set B; losses are
    fixed per set.
    """
    phi0, L = 0.3, np.array([3.0, 1.0])
    rng = np.random.default_rng(seed)
    n_batches = n_draws // batch
    grads = np.empty(n_batches)
    phi = torch.tensor(phi0, requires_grad=True)
    for k in range(n_batches):
        pick_a = rng.random(batch) < 1.0 / (1.0 + math.exp(-phi0))
        losses = torch.from_numpy(np.where(pick_a, L[0], L[1]))
        lq = torch.where(torch.from_numpy(pick_a), torch.nn.functional.logsigmoid(phi),
                         torch.nn.functional.logsigmoid(-phi))
        (g,) = torch.autograd.grad(vnn.reinforce_surrogate(losses, lq), phi)
        grads[k] = float(g)
    s = 1.0 / (1.0 + math.exp(-phi0))
    exact = s * (1 - s) * (L[0] - L[1])
    return grads.mean(), grads.std(ddof=1) / math.sqrt(n_batches), exact


def check_tpp() -> tuple[bool, str]:
    lam, t_end = 5.0, 2.0
    series = math.fsum(math.exp(prior_logp(lam, t_end, M) + M * math.log(t_end) - math.lgamma(M + 1))
                       for M in range(200))
    mass = posterior_mass_m_le_2()
    mean, se, exact = reinforce_enumeration()
    ok = abs(series - 1.0) <= 1e-10 and abs(mass - 1.0) <= 1e-3 and abs(mean - exact) <= 3 * se
    return ok, (f"Poisson series {series:.12f}, posterior mass (M<=2) {mass:.5f}, "
                f"REINFORCE {mean:.4f} vs exact {exact:.4f} (SE {se:.4f})")


# --- 5 ---------------------------------------------------------------------

def ans_roundtrips(n_cases: int = 1000, seed: int = 0) -> int:
    """Number of random push/pop cases that restore message and symbols exactly."""
    rng = np.random.default_rng(seed)
    good = 0
    for _ in range(n_cases):
        n_sym = int(rng.integers(2, 300))
        pmf = Pmf16(quantize_pmf(rng.dirichlet(np.full(n_sym, rng.uniform(0.05, 2.0)))))
        msg = AnsMessage.random(int(rng.integers(0, 8)), rng)
        before = msg.copy()
        syms = rng.integers(0, n_sym, size=int(rng.integers(1, 60)))
        for s in syms:
            msg.push(int(s), pmf)
        back = [msg.pop(pmf) for _ in syms][::-1]
        good += int(back == syms.tolist() and msg == before)
    return good


def four_symbol_rate(n: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """(total bits, bits allowed by 1.75 bits/symbol + 0.1% + 64)."""
    rng = np.random.default_rng(seed)
    pmf = Pmf16(quantize_pmf([0.5, 0.25, 0.125, 0.125]))
    msg = AnsMessage()
    for s in rng.choice(4, size=n, p=[0.5, 0.25, 0.125, 0.125]):
        msg.push(int(s), pmf)
    return float(len(msg)), 1.75 * n * 1.001 + 64


@lru_cache(maxsize=1)
def lossless_model() -> tuple[LatentVDSDE, np.ndarray]:
    """Small logistic-mixture model trained briefly on 8-bit sinusoids."""
    ds = gen_synthetic("sinusoid-mix", 256, 20, 2, seed=11)
    levels = np.clip(np.rint(127.5 + 60.0 * ds.normalized()), 0, 255).astype(np.int64)
    data = levels / 127.5 - 1.0
    cfg = TrainConfig(iters=60, stage1_frac=1.0, batch_size=16, lr=3e-3, seed=3,
                      model=dict(d_z=4, hidden=16, embed=16, width=32, gap_width=8, n_substeps=2,
                                 obs="logistic-mixture"))
    model, _ = train(data, cfg)
    return model, levels


def check_coding(n_seq: int = 200) -> tuple[bool, str]:
    good = ans_roundtrips()
    bits, allowed = four_symbol_rate()
    model, levels = lossless_model()
    q = Quantizer(256)
    msg = seed_message(0, 256)
    start = len(msg)
    elbo = 0.0
    for i in range(n_seq):
        msg, st = bitsback_encode(levels[i], model, q, msg)
        elbo += st.elbo_bits
    net = len(msg) - start
    exact = True
    for i in reversed(range(n_seq)):
        msg, x = bitsback_decode(msg, model, q, levels.shape[1])
        exact &= bool(np.array_equal(x, levels[i]))
    exact &= msg == seed_message(0, 256)
    gap = abs(net - elbo) / elbo
    ok = good == 1000 and bits <= allowed and exact and gap <= 0.01
    return ok, (f"ANS inverse {good}/1000, 4-symbol {bits / 1e5:.5f} bits/sym, bits-back exact={exact}, "
                f"net {net / n_seq:.1f} vs ELBO {elbo / n_seq:.1f} bits/seq ({100 * gap:.2f}%)")


# --- 6 ---------------------------------------------------------------------

def kl_bits(q, p) -> float:
    hi = q.t_max if math.isfinite(q.t_max) else 60.0 / float(q.rate)

    def f(v):
        t = torch.tensor(v, dtype=torch.float64)
        lq = float(q.log_prob(t))
        return math.exp(lq) * (lq - float(p.log_prob(t))) if math.isfinite(lq) else 0.0

    pts = [hi * 10.0**-k for k in range(1, 8)]
    val, _ = integrate.quad(f, 0.0, hi, points=pts, limit=400, epsabs=1e-12)
    return val / math.log(2.0)


REC_PAIRS = (
    ("Exp(2) vs Exp(1)", lambda: (Exponential(2.0), Exponential(1.0))),
    ("Exp(20) vs Exp(1)", lambda: (Exponential(20.0), Exponential(1.0))),
    ("Exp(600) vs Exp(1)", lambda: (Exponential(600.0), Exponential(1.0))),
    ("SL(-2,0.5) vs Exp(5)", lambda: (SoftplusLogistic(-2.0, 0.5, 1.0), Exponential(5.0))),
    ("SL(-5,0.4) vs Exp(5)", lambda: (SoftplusLogistic(-5.0, 0.4, 1.0), Exponential(5.0))),
)


def rec_pair(q, p, runs: int = 10_000, seed: int = 0) -> dict:
    K = kl_bits(q, p)
    bound = q.log_ratio_bound(p)
    samples = np.empty(runs)
    bits = np.empty(runs)
    decoded_ok = True
    keys = np.random.SeedSequence([0x4EC, seed]).generate_state(runs, np.uint64)
    for r in range(runs):
        res = astar_encode(q, p, int(keys[r]), bound)
        samples[r] = res.sample
        bits[r] = elias_delta_length(res.index)
        if r < 200:
            decoded_ok &= astar_decode(p, int(keys[r]), res.index) == res.sample
    ks = stats.kstest(samples, lambda v: q.cdf(torch.from_numpy(np.asarray(v))).numpy())
    limit = K + math.log2(K + 1) + 16
    se = bits.std(ddof=1) / math.sqrt(runs)
    return {"K": K, "mean_bits": bits.mean(), "se": se, "limit": limit, "ks_p": ks.pvalue,
            "decoded": decoded_ok}


def check_rec(runs: int = 10_000) -> tuple[bool, str]:
    ok = True
    parts = []
    for i, (name, make) in enumerate(REC_PAIRS):
        q, p = make()
        r = rec_pair(q, p, runs, seed=i)
        good = (0.1 <= r["K"] <= 8 and r["ks_p"] > 0.01 and r["mean_bits"] + 3 * r["se"] <= r["limit"]
                and r["decoded"])
        ok &= good
        parts.append(f"{name}: K={r['K']:.2f} bits={r['mean_bits']:.2f}<= {r['limit']:.1f} KS p={r['ks_p']:.2f}")
    return ok, "; ".join(parts)


# --- 7 / 8: trained desk-scale model -------------------------------------

DESK = dict(N=64, T=100, D_x=4, lambda_frac=0.5, precision=256, seed=0)
DESK_MODEL = dict(d_z=8, hidden=32, embed=32, width=64, gap_width=32, n_substeps=2)
DESK_ITERS = 800
DESK_LR = 1e-3


@lru_cache(maxsize=1)
def desk_models():
    """(variable-discretization model, full-discretization baseline, dataset).

    Both share data, size, seed and iteration budget; the baseline never
    leaves stage 1, so it is a plain latent SDE knotted at every frame.
    """
    ds = gen_synthetic("sinusoid-mix", DESK["N"], DESK["T"], DESK["D_x"], seed=DESK["seed"])
    x = ds.normalized()
    common = dict(batch_size=16, lr=DESK_LR, lambda_frac=DESK["lambda_frac"], seed=DESK["seed"],
                  model=dict(DESK_MODEL, rate_precision=DESK["precision"]))
    half = DESK_ITERS // 2
    vd, _ = train(x, TrainConfig(stage1_iters=half, stage2_iters=DESK_ITERS - half, **common))
    full, _ = train(x, TrainConfig(stage1_iters=DESK_ITERS, stage2_iters=0, **common))
    return vd, full, ds


def _evaluate(model, ds, times_mode: str, pruned: bool = False):
    x = ds.normalized()
    bits, info, M, se, ae = [], [], [], [], []
    for i in range(x.shape[0]):
        blob, st = compress(x[i], model, precision=DESK["precision"], seed=i, times_mode=times_mode,
                            pruned=pruned)
        err = ds.denormalize(decompress(blob, model)) - ds.sequences[i]
        bits.append(st.bits_total)
        info.append(st.info_bits_latents)
        M.append(st.M)
        se.append(np.mean(err**2))
        ae.append(np.mean(np.abs(err)))
    return {k: np.asarray(v) for k, v in
            dict(bits=bits, info=info, M=M, mse=se, mae=ae).items()}


def check_rate_reduction() -> tuple[bool, str]:
    vd, full, ds = desk_models()
    a = _evaluate(vd, ds, "estimate", pruned=True)
    b = _evaluate(full, ds, "full", pruned=True)
    M = a["M"].mean()
    saving = 1.0 - a["bits"].mean() / b["bits"].mean()
    ratio = a["mae"].mean() / b["mae"].mean()
    ok = M <= 0.5 * DESK["T"] and saving >= 0.25 and ratio <= 1.5
    return ok, (f"M {M:.1f} (<= {0.5 * DESK['T']:.0f}), bits {a['bits'].mean():.0f} vs full "
                f"{b['bits'].mean():.0f} ({100 * saving:.1f}% lower, need 25%), MAE {a['mae'].mean():.4f} vs "
                f"{b['mae'].mean():.4f} (x{ratio:.2f}, need <= 1.5)")


def frozen_copy(model: LatentVDSDE, dims) -> LatentVDSDE:
    """Copy of ``model`` with ``dims`` made time-constant: nu = 1e-6 and zero drift there."""
    clone = LatentVDSDE.from_bytes(model.to_bytes())
    with torch.no_grad():
        clone.log_nu[dims] = math.log(1e-6)
        clone.drift[-1].weight[dims] = 0.0
        clone.drift[-1].bias[dims] = 0.0
    return clone


def check_pruning(n_seq: int = 16) -> tuple[bool, str]:
    vd, _, ds = desk_models()
    model = vd
    g, _ = model.prune()
    note = "trained"
    if g.size == 0:
        model = frozen_copy(vd, [0, 1])
        g, _ = model.prune()
        note = "frozen"
    sub = type(ds)(ds.sequences[:n_seq], ds.mean, ds.std, ds.frame_dt)
    on = _evaluate(model, sub, "estimate", pruned=True)
    off = _evaluate(model, sub, "estimate", pruned=False)
    rel = float(np.max(np.abs(on["mse"] - off["mse"]) / off["mse"]))
    fewer = bool(np.all(on["info"][off["M"] >= 1] < off["info"][off["M"] >= 1]))
    ok = g.size >= 1 and rel <= 0.01 and fewer
    return ok, (f"{g.size} {note} dims pruned, max MSE change {100 * rel:.3f}%, coded latent bits "
                f"{off['info'].mean():.2f} -> {on['info'].mean():.2f} per sequence "
                f"(strictly lower on every sequence: {fewer})")


# --- 9 ---------------------------------------------------------------------

def check_arbitrary_time() -> tuple[bool, str]:
    model = _tiny_model(seed=2, d_x=3, d_z=4, hidden=8, embed=8, width=16)
    ds = gen_synthetic("sinusoid-mix", 4, 100, 3, seed=5)
    x = ds.normalized()
    ok = True
    worst = 0
    for i in range(4):
        blob, _ = compress(x[i], model, precision=256, seed=i)
        one = decompress(blob, model)
        two = decompress(blob, model, parse_times(f"0:{model.t_end(100)}:{model.config.frame_dt / 2}"))
        ok &= two.shape[0] == 201 and np.array_equal(two[2::2], one)
        worst = max(worst, int(np.sum(two[2::2] != one)))
    return ok, f"2x decode has 201 frames; mismatching entries in the subsample: {worst}"


# --- 10 --------------------------------------------------------------------

def check_determinism() -> tuple[bool, str]:
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)
        cfg = d / "cfg.ini"
        cfg.write_text("[model]\nd_z = 4\nhidden = 8\nembed = 8\nwidth = 16\ngap_width = 8\n"
                       "n_substeps = 2\n\n[train]\niters = 10\nbatch_size = 4\n")
        codes = [main(["gen-data", "--n", "8", "--seq-len", "30", "--dx", "2", "--out", str(d / "data.npz")])]
        for k in (1, 2):
            codes.append(main(["--config", str(cfg), "train", "--data", str(d / "data.npz"), "--seed", "7",
                               "--out", str(d / f"m{k}.ckpt")]))
        same_ckpt = (d / "m1.ckpt").read_bytes() == (d / "m2.ckpt").read_bytes()
        for k in (1, 2):
            codes.append(main(["compress", "--model", str(d / "m1.ckpt"), str(d / "data.npz"), "--index", "3",
                               "--seed", "7", "--out", str(d / f"c{k}.bin")]))
            codes.append(main(["decompress", "--model", str(d / "m1.ckpt"), str(d / f"c{k}.bin"),
                               "--out", str(d / f"y{k}.csv")]))
        same_c = (d / "c1.bin").read_bytes() == (d / "c2.bin").read_bytes()
        same_y = (d / "y1.csv").read_bytes() == (d / "y2.csv").read_bytes()
    ok = same_ckpt and same_c and same_y and all(c == 0 for c in codes)
    return ok, f"checkpoints identical={same_ckpt}, containers identical={same_c}, decodes identical={same_y}"


CHECKS = {
    1: ("OU exactness", check_ou_exactness),
    2: ("gradient integrity", check_gradients),
    3: ("SoftplusLogistic correctness", check_softplus_logistic),
    4: ("TPP soundness", check_tpp),
    5: ("coding exactness", check_coding),
    6: ("relative entropy coding", check_rec),
    7: ("desk-scale rate reduction", check_rate_reduction),
    8: ("pruning", check_pruning),
    9: ("arbitrary-time decode", check_arbitrary_time),
    10: ("determinism", check_determinism),
}


def run(number: int) -> Result:
    name, fn = CHECKS[number]
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failure with its reason
        ok, detail = False, f"error: {type(exc).__name__}: {exc}"
    return Result(number, name, bool(ok), detail, time.perf_counter() - t0)


def run_all(only=None, log=print) -> list[Result]:
    results = []
    for n in sorted(CHECKS):
        if only and n not in only:
            continue
        r = run(n)
        log(r.line())
        results.append(r)
    return results
