import math

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import small_model
from vdsde.model import (LatentVDSDE, ModelConfig, Skeleton, data_times, from_levels, full_discretization,
                         logistic_mixture_log_pmf, to_levels)
from vdsde.ou_prior import transition_params
from vdsde.tpp import DiscretizationSet
from vdsde.train import TrainConfig, train

T_END = 12 * 0.1


def _path(model, x, sets, seed=0):
    h = model.encode(x)
    grid = model.solver_grid(sets, x.shape[1])
    z0, lq0, path = model.posterior_path(h, grid, np.random.default_rng(seed))
    return h, z0, lq0, path, model.skeleton(path, sets)


def test_encoder_interpolates_gru_outputs(model, batch):
    h = model.encode(batch)
    gru = model.gru(model.embed(batch).transpose(0, 1))
    t = torch.from_numpy(data_times(12, 0.1))
    assert torch.allclose(h(t), gru, atol=1e-12)
    assert torch.equal(model.encode(batch).knot_values, h.knot_values)


def test_encoder_gradient_matches_finite_differences(model):
    x = torch.from_numpy(np.random.default_rng(1).normal(size=(1, 5, 2))).requires_grad_(True)
    f = lambda v: model.encode(v)(torch.tensor(0.27)).sum()
    (g,) = torch.autograd.grad(f(x), x)
    eps = 1e-6
    for idx in [(0, 0, 0), (0, 2, 1), (0, 4, 0)]:
        e = torch.zeros_like(x)
        e[idx] = eps
        with torch.no_grad():
            fd = (float(f(x.detach() + e)) - float(f(x.detach() - e))) / (2 * eps)
        assert float(g[idx]) == pytest.approx(fd, rel=1e-4, abs=1e-10)


def test_posterior_path_reproducible(model, batch):
    sets = [full_discretization(12, 0.1)] * 3
    a = _path(model, batch, sets, seed=4)[3].values
    b = _path(model, batch, sets, seed=4)[3].values
    assert torch.equal(a, b)


def test_zero_drift_path_is_a_martingale(model):
    x = torch.zeros(1, 10, 2)
    h = model.encode(x)
    n = 10_000
    hb = type(h)(h.kind, h.knot_times, h.knot_values.expand(-1, n, -1), h.coeffs.expand(-1, -1, n, -1))
    with torch.no_grad():
        model.log_nu.fill_(0.0)
        grid = np.repeat(np.linspace(0, 1.0, 11)[:, None], n, 1)
        mean, _ = model.z0_distribution(hb)
        _, _, path = model.posterior_path(hb, grid, np.random.default_rng(0), drift=lambda z, t: torch.zeros_like(z))
    end = path.values[-1].numpy()
    se = end.std(0) / math.sqrt(n)
    assert np.all(np.abs(end.mean(0) - mean[0].numpy()) < 3 * se)


def test_reconstruct_full_set_hits_knots(model, batch):
    sets = [full_discretization(12, 0.1)] * 3
    *_, skel = _path(model, batch, sets)
    zhat = model.interpolate(skel, data_times(12, 0.1))
    assert torch.allclose(zhat, skel.values[1:], atol=1e-14)


def test_empty_set_reconstructs_a_line(model, batch):
    sets = [DiscretizationSet(np.array([]), T_END)] * 3
    *_, skel = _path(model, batch, sets)
    q = np.array([0.3, 0.6, 0.9])
    zhat = model.interpolate(skel, q)
    w = torch.from_numpy(q / T_END)[:, None, None]
    assert torch.allclose(zhat, (1 - w) * skel.values[0] + w * skel.values[1], atol=1e-14)


def test_double_resolution_is_linear_between_frames(model, batch):
    sets = [DiscretizationSet(np.array([0.35, 0.8]), T_END)] * 3
    *_, skel = _path(model, batch, sets)
    fine = np.arange(0, 24 + 1) * 0.05
    z = model.interpolate(skel, fine).detach().numpy()
    mids = z[1:-1:2]
    # midpoints between frames lie on the chord unless a knot falls between them
    chord = 0.5 * (z[0:-2:2] + z[2::2])
    k = np.array([0.35, 0.8])
    straddle = np.array([np.any((k > fine[i]) & (k < fine[i + 2])) for i in range(0, 23, 2)])
    assert np.allclose(mids[~straddle], chord[~straddle], atol=1e-12)


def test_prior_cross_entropy_hand_product(model):
    with torch.no_grad():
        model.log_nu.fill_(math.log(0.8))
    times = np.array([[0.0], [0.5], [1.2]])
    vals = torch.tensor([[[0.3, -0.2, 1.0]], [[0.1, 0.4, 0.9]], [[-0.5, 0.2, 0.7]]])
    skel = Skeleton([DiscretizationSet(np.array([0.5]), T_END)], times, vals)
    ref = 0.0
    for d in range(3):
        ref += stats.norm.logpdf(float(vals[0, 0, d]))
        for k in (1, 2):
            m, v = transition_params(0.8, times[k, 0] - times[k - 1, 0])
            ref += stats.norm.logpdf(float(vals[k, 0, d]), m * float(vals[k - 1, 0, d]), math.sqrt(v))
    assert float(model.prior_cross_entropy(skel).detach()) == pytest.approx(-ref, rel=1e-12)


def test_lossy_rate_bounded_below_by_initial_cost(model, batch):
    sets = [DiscretizationSet(np.array([0.3, 0.300001, 0.300002]), T_END)] * 3
    *_, skel = _path(model, batch, sets)
    r = model.lossy_rate(skel).detach().numpy()
    assert np.all(r >= 3 * math.log(model.config.rate_precision) - 3 * 0.5 * math.log(2 * math.pi))
    # the continuous cross entropy, in contrast, rewards clustered knots
    assert np.all(model.prior_cross_entropy(skel).detach().numpy() < r)


def test_adding_knots_does_not_lower_the_rate(model):
    x = torch.from_numpy(np.random.default_rng(2).normal(size=(1, 12, 2))).expand(400, -1, -1)
    few = [DiscretizationSet(np.array([0.5]), T_END)] * 400
    more = [DiscretizationSet(np.array([0.3, 0.5, 0.9]), T_END)] * 400
    with torch.no_grad():
        a = model.lossy_rate(_path(model, x, few, seed=3)[-1]).mean()
        b = model.lossy_rate(_path(model, x, more, seed=3)[-1]).mean()
    assert float(b) >= float(a)


def test_lossless_rate_is_kl_like_for_prior_posterior(model):
    # posterior drift = prior drift and q0 = N(0, 1): only the Euler gap remains
    n = 2000
    sets = [full_discretization(12, 0.1)] * n
    nu = float(model.nu[0].detach())
    prior = lambda z, t: -0.5 * nu * nu * z
    with torch.no_grad():
        grid = model.solver_grid(sets, 12)
        rng = np.random.default_rng(0)
        z0 = torch.from_numpy(rng.standard_normal((n, 3)))
        from vdsde.sde_sim import BrownianPath, euler_solve
        path = euler_solve(z0, prior, model.nu, BrownianPath.sample(1, grid, 3))
        skel = model.skeleton(path, sets)
        lq0 = torch.from_numpy(stats.norm.logpdf(z0.numpy()).sum(-1))
        from vdsde.sde_sim import pseudo_log_likelihood
        from vdsde.ou_prior import joint_log_density
        lq = pseudo_log_likelihood(prior, model.nu, torch.from_numpy(skel.times), skel.values, lq0, reduce=False)
        lp = joint_log_density(model.nu, skel.times, skel.values, reduce=False, padded=True)
    gap = (lq - lp).numpy() / (12 * 3)
    assert abs(gap.mean()) <= 0.05


def test_objective_bookkeeping(model, batch):
    out = model.objective(batch, np.random.default_rng(0), stage=2)
    parts = [float(out[k].detach()) for k in ("recon", "latent_rate", "times_rate")]
    assert all(math.isfinite(p) for p in parts)
    assert float(out["loss"].detach()) == pytest.approx(sum(parts), abs=1e-12)
    assert float(out["train_loss"].detach()) == pytest.approx(float(out["loss"].detach()), abs=1e-9)


def test_stage_two_on_full_set_matches_stage_one(model, batch):
    full = [full_discretization(12, 0.1)] * 3
    with torch.no_grad():
        a = model.objective(batch, np.random.default_rng(5), stage=1)
        b = model.objective(batch, np.random.default_rng(5), stage=2, sets=full)
    assert float(b["loss"] - b["times_rate"]) == pytest.approx(float(a["loss"]), abs=1e-9)


def test_perfect_gaussian_reconstruction_term():
    model = small_model(d_x=2)
    with torch.no_grad():
        for p in model.decoder.parameters():
            p.zero_()
    x = torch.zeros(2, 12, 2)
    out = model.objective(x, np.random.default_rng(0), stage=1)
    want = 12 * 2 * 0.5 * math.log(2 * math.pi * 0.01)
    assert float(out["recon"].detach()) == pytest.approx(want, rel=1e-12)


def test_surrogate_only_reaches_gap_parameters(model, batch):
    out = model.objective(batch, np.random.default_rng(1), stage=2)
    extra = out["train_loss"] - out["loss"]
    grads = torch.autograd.grad(extra, model.theta_parameters(), allow_unused=True)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in grads)


def test_stage_validation(model, batch):
    with pytest.raises(ValueError):
        model.objective(batch, np.random.default_rng(0), stage=3)


def test_logistic_mixture_pmf_sums_to_one():
    g = torch.Generator().manual_seed(0)
    lp = logistic_mixture_log_pmf(torch.randn(5, 3, generator=g), torch.randn(5, 3, generator=g),
                                  torch.randn(5, 3, generator=g) - 2)
    assert lp.shape == (5, 256)
    assert torch.allclose(torch.logsumexp(lp, -1), torch.zeros(5), atol=1e-12)


def test_level_mapping_roundtrip():
    lv = torch.arange(256)
    assert torch.equal(to_levels(from_levels(lv)), lv)


def test_checkpoint_roundtrip(model, batch):
    back = LatentVDSDE.from_bytes(model.to_bytes())
    assert back.fingerprint() == model.fingerprint()
    assert torch.equal(back.encode(batch).knot_values, model.encode(batch).knot_values)
    with torch.no_grad():
        back.log_nu[0] += 1e-9
    assert back.fingerprint() != model.fingerprint()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_x=2, obs="poisson")
    with pytest.raises(ValueError):
        ModelConfig(d_x=2, lam=0.0)


def test_prune_split(model):
    g, l = model.prune()
    assert g.size == 0 and l.size == 3
    with torch.no_grad():
        model.log_nu[1] = math.log(1e-4)
    g, l = model.prune()
    assert g.tolist() == [1] and l.tolist() == [0, 2]


def test_pruned_mode_holds_global_dims_constant(model, batch):
    with torch.no_grad():
        model.log_nu[1] = math.log(1e-4)
    model.pruned = True
    sets = [full_discretization(12, 0.1)] * 3
    *_, skel = _path(model, batch, sets)
    assert torch.all(skel.values[:, :, 1] == skel.values[:1, :, 1])
    assert not torch.all(skel.values[:, :, 0] == skel.values[:1, :, 0])


def test_training_smoke_and_determinism():
    data = np.random.default_rng(0).normal(size=(8, 12, 2))
    cfg = TrainConfig(stage1_iters=5, stage2_iters=5, batch_size=4, lr=1e-3, seed=3,
                      model=dict(d_z=2, hidden=4, embed=4, width=8, gap_width=4, n_substeps=1))
    m1, h1 = train(data, cfg)
    m2, h2 = train(data, cfg)
    assert m1.to_bytes() == m2.to_bytes()
    assert [r["loss"] for r in h1] == [r["loss"] for r in h2]
    assert all(math.isfinite(r["loss"]) for r in h1)
    assert {r["stage"] for r in h1} == {1, 2}


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_frac=1.5)
    with pytest.raises(ValueError):
        TrainConfig(stage1_iters=0, stage2_iters=0).stages()
    assert TrainConfig(iters=10).stages() == (4, 6)
