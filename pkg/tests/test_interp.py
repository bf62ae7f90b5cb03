import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vdsde.interp import evaluate, evaluate_batched, fit
from vdsde.ou_prior import DomainError, bridge_mean


def test_two_knot_cubic_is_a_line():
    s = fit("cubic", [0.0, 2.0], [1.0, 5.0])
    q = torch.linspace(0, 2, 9)
    assert torch.allclose(s(q), 1.0 + 2.0 * q, atol=1e-14)


def test_cubic_reproduces_linear_and_natural_cubic():
    # natural boundary conditions reproduce any polynomial with zero end curvature;
    # with prescribed end curvature any cubic is reproduced exactly
    p = np.polynomial.Polynomial([0.3, -1.0, 0.5, 0.2])
    t = np.array([0.0, 0.4, 1.1, 1.5, 2.3, 3.0])
    d2 = p.deriv(2)
    s = fit("cubic", t, p(t), end_curvature=(d2(t[0]), d2(t[-1])))
    q = np.linspace(0, 3, 100)
    assert np.max(np.abs(s(torch.from_numpy(q)).numpy() - p(q))) <= 1e-10


def test_linear_midpoint():
    s = fit("linear", [0.0, 1.0, 2.0], [0.0, 2.0, 0.0])
    assert float(s(0.5)) == 1.0


def test_invalid_knots():
    with pytest.raises(DomainError):
        fit("cubic", [0.0, 0.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        fit("linear", [0.0], [1.0])
    with pytest.raises(DomainError):
        fit("quintic", [0.0, 1.0], [1.0, 2.0])


def test_clamps_outside_domain():
    s = fit("cubic", [0.0, 1.0, 2.0], [1.0, -1.0, 3.0])
    assert float(s(-0.5)) == pytest.approx(1.0)
    assert float(s(2.5)) == pytest.approx(3.0)


knots = st.lists(st.floats(0.05, 1.0), min_size=2, max_size=8).map(lambda g: np.cumsum([0.0] + g))


@settings(max_examples=50, deadline=None)
@given(knots, st.integers(0, 2**31), st.sampled_from(["cubic", "linear"]))
def test_interpolation_and_linearity(t, seed, kind):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(len(t), 3))
    b = rng.normal(size=(len(t), 3))
    sa, sb, sab = fit(kind, t, a), fit(kind, t, b), fit(kind, t, a + b)
    assert np.allclose(sa(torch.from_numpy(t)).numpy(), a, atol=1e-12)
    q = torch.from_numpy(rng.uniform(t[0], t[-1], 20))
    assert torch.allclose(sab(q), sa(q) + sb(q), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.2, 1.0), min_size=3, max_size=7).map(lambda g: np.cumsum([0.0] + g)), st.integers(0, 999))
def test_cubic_is_c2_at_joints(t, seed):
    y = np.random.default_rng(seed).normal(size=len(t))
    s = fit("cubic", t, y)
    c = s.coeffs.numpy()
    h = np.diff(t)
    for i in range(len(t) - 2):
        u = h[i]
        left = [c[i, 0] + u * (c[i, 1] + u * (c[i, 2] + u * c[i, 3])),
                c[i, 1] + 2 * c[i, 2] * u + 3 * c[i, 3] * u * u,
                2 * c[i, 2] + 6 * c[i, 3] * u]
        right = [c[i + 1, 0], c[i + 1, 1], 2 * c[i + 1, 2]]
        assert np.allclose(left, right, atol=1e-9)
    assert abs(c[0, 2]) < 1e-12 and abs(2 * c[-1, 2] + 6 * c[-1, 3] * h[-1]) < 1e-9


def test_gradient_wrt_knot_values():
    rng = np.random.default_rng(0)
    t = np.cumsum(rng.uniform(0.2, 1.0, 6))
    y = torch.from_numpy(rng.normal(size=6)).requires_grad_(True)
    q = torch.from_numpy(rng.uniform(t[0], t[-1], 5))
    w = torch.from_numpy(rng.normal(size=5))
    f = lambda v: (fit("cubic", t, v)(q) * w).sum()
    (g,) = torch.autograd.grad(f(y), y)
    eps = 1e-6
    for i in range(6):
        e = torch.zeros(6)
        e[i] = eps
        fd = (float(f(y.detach() + e)) - float(f(y.detach() - e))) / (2 * eps)
        assert float(g[i]) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_linear_matches_bridge_when_mixing_is_slow():
    rng = np.random.default_rng(1)
    for _ in range(50):
        nu = rng.uniform(0.01, 0.3)
        dt = 0.1 / nu * rng.uniform(0.1, 1.0)
        z1, z2 = rng.uniform(0.5, 2.0, 2) * rng.choice([-1, 1])
        if z1 * z2 < 0:
            z2 = -z2
        t = dt * rng.uniform(0.05, 0.95)
        lin = float(evaluate(fit("linear", [0.0, dt], [z1, z2]), t))
        exact = bridge_mean(nu, t, (0.0, z1), (dt, z2))
        assert abs(lin - exact) <= 0.02 * abs(exact)


def test_evaluate_batched_matches_per_sequence():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 1, 6)
    vals = rng.normal(size=(6, 3, 2))
    s = fit("cubic", t, vals)
    q = torch.from_numpy(rng.uniform(0, 1, (4, 3)))
    out = evaluate_batched(s, q)
    for b in range(3):
        ref = fit("cubic", t, vals[:, b])(q[:, b])
        assert torch.allclose(out[:, b], ref, atol=1e-13)


def test_linear_map_commutes_with_fit():
    rng = np.random.default_rng(4)
    t = np.linspace(0, 2, 5)
    vals = torch.from_numpy(rng.normal(size=(5, 3)))
    W = torch.from_numpy(rng.normal(size=(2, 3)))
    a = fit("cubic", t, vals).linear_map(W)
    b = fit("cubic", t, vals @ W.T)
    q = torch.linspace(0, 2, 11)
    assert torch.allclose(a(q), b(q), atol=1e-12)
