import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from vdsde.ou_prior import DomainError, OuParams, bridge_mean, joint_log_density, transition_params


def test_zero_diffusion_freezes_state():
    assert transition_params(0.0, 5.0) == (1.0, 0.0)


def test_long_horizon_relaxes_to_stationary():
    m, v = transition_params(1.0, 200.0)
    assert m < 1e-40 and v == pytest.approx(1.0)


def test_unit_values_against_high_precision():
    getcontext().prec = 40
    m, v = transition_params(1.0, 1.0)
    assert m == pytest.approx(float(Decimal(-0.5).exp()), rel=1e-15)
    assert v == pytest.approx(float(1 - Decimal(-1).exp()), rel=1e-15)


@pytest.mark.parametrize("nu,dt", [(-1.0, 1.0), (math.nan, 1.0), (1.0, 0.0), (1.0, -2.0), (math.inf, 1.0)])
def test_domain_errors(nu, dt):
    with pytest.raises(DomainError):
        transition_params(nu, dt)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 3.0), st.floats(1e-3, 5.0), st.floats(1e-3, 5.0))
def test_chapman_kolmogorov(nu, dt1, dt2):
    m1, v1 = transition_params(nu, dt1)
    m2, v2 = transition_params(nu, dt2)
    m, v = transition_params(nu, dt1 + dt2)
    assert m1 * m2 == pytest.approx(m, rel=1e-12)
    assert v2 + m2 * m2 * v1 == pytest.approx(v, rel=1e-12)
    assert m1 * m1 + v1 == pytest.approx(1.0, abs=1e-12)


def test_tensor_inputs_keep_graph():
    nu = torch.tensor([0.5, 1.0], requires_grad=True)
    m, v = transition_params(nu, torch.tensor(0.3))
    (m.sum() + v.sum()).backward()
    assert nu.grad is not None and torch.all(nu.grad != 0)


def test_single_point_density():
    got = float(joint_log_density([0.7], [0.0], np.zeros((1, 1))))
    assert got == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_nu_zero_collapses_to_initial_term():
    z = np.array([[0.4], [0.4]])
    got = float(joint_log_density([0.0], [0.0, 1.0], z))
    assert got == pytest.approx(stats.norm.logpdf(0.4), abs=1e-12)


def test_nu_zero_mismatch_is_minus_inf():
    z = np.array([[0.4], [0.5]])
    assert float(joint_log_density([0.0], [0.0, 1.0], z)) == -math.inf


def test_joint_density_scalar_product_oracle():
    times, z = [0.0, 1.0, 2.0], [0.5, 0.3, -0.1]
    a = math.exp(-0.5)
    ref = stats.norm.pdf(z[0]) * stats.norm.pdf(z[1], a * z[0], math.sqrt(1 - a * a)) \
        * stats.norm.pdf(z[2], a * z[1], math.sqrt(1 - a * a))
    got = float(joint_log_density([1.0], times, np.array(z)[:, None]))
    assert got == pytest.approx(math.log(ref), rel=1e-12)


def test_joint_density_integrates_to_one():
    f = lambda z1, z0: math.exp(float(joint_log_density([0.8], [0.0, 0.7], np.array([[z0], [z1]]))))
    mass, _ = integrate.dblquad(f, -8, 8, -8, 8, epsabs=1e-9)
    assert mass == pytest.approx(1.0, abs=1e-4)


def test_transition_mask_keeps_initial_term_only():
    z = np.array([[0.2, 0.1], [0.9, -0.3]])
    full = joint_log_density([0.5, 0.5], [0.0, 1.0], z, reduce=False)
    masked = joint_log_density([0.5, 0.5], [0.0, 1.0], z, transition_mask=[True, False], reduce=False)
    m, v = transition_params(0.5, 1.0)
    dropped = stats.norm.logpdf(-0.3, m * 0.1, math.sqrt(v))
    assert float(full - masked) == pytest.approx(dropped, abs=1e-12)


def test_non_increasing_times_rejected():
    with pytest.raises(DomainError):
        joint_log_density([1.0], [0.0, 0.0], np.zeros((2, 1)))


def test_padded_repeats_are_free():
    z = np.array([[0.3], [0.1], [0.1]])
    a = joint_log_density([0.6], [0.0, 1.0], z[:2])
    b = joint_log_density([0.6], [0.0, 1.0, 1.0], z, padded=True)
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_bridge_linear_limit():
    assert bridge_mean(0.0, 0.25, (0.0, 1.0), (1.0, 3.0)) == pytest.approx(1.5, abs=1e-15)


def test_bridge_shrinks_toward_zero():
    c = 0.8
    mid = bridge_mean(1.5, 1.0, (0.0, c), (2.0, c))
    assert 0 < mid <= c


def test_bridge_endpoints_and_monotonicity():
    left, right = (0.0, 0.4), (1.0, -0.7)
    assert bridge_mean(1.0, 1e-9, left, right) == pytest.approx(0.4, abs=1e-8)
    assert bridge_mean(1.0, 1 - 1e-9, left, right) == pytest.approx(-0.7, abs=1e-8)
    assert bridge_mean(1.0, 0.3, (0.0, 0.5), right) > bridge_mean(1.0, 0.3, left, right)
    assert bridge_mean(1.0, 0.3, left, (1.0, 0.0)) > bridge_mean(1.0, 0.3, left, right)


def test_bridge_outside_interval():
    with pytest.raises(DomainError):
        bridge_mean(1.0, 1.0, (0.0, 0.0), (1.0, 1.0))


def test_bridge_monte_carlo():
    # exact OU path sampling on a fine grid, conditioning by Gaussian regression on z(1)
    nu, n, K = 1.0, 1_000_000, 2
    rng = np.random.default_rng(0)
    m, v = transition_params(nu, 0.5)
    z0 = 1.0
    zh = m * z0 + math.sqrt(v) * rng.standard_normal(n)
    z1 = m * zh + math.sqrt(v) * rng.standard_normal(n)
    # E[z(0.5) | z(1) = -1] by linear regression (jointly Gaussian)
    slope = np.cov(zh, z1)[0, 1] / np.var(z1)
    est = zh.mean() + slope * (-1.0 - z1.mean())
    se = np.sqrt(np.var(zh - slope * z1) / n) * K
    assert abs(est - bridge_mean(nu, 0.5, (0.0, 1.0), (1.0, -1.0))) < 3 * se + 1e-3


def test_ou_params_masks():
    p = OuParams([1e-4, 1e-3, 0.5])
    assert p.global_mask.tolist() == [True, True, False]
    assert p.local_mask.tolist() == [False, False, True]
    with pytest.raises(DomainError):
        OuParams([-0.1])
