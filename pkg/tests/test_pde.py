import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dklinv import pde
from dklinv.pde import LinearOperatorSpec, Term


@pytest.mark.parametrize("name, overrides", [
    ("heat1d", {}), ("heat50d", {"dim": 10}), ("adr50d", {"dim": 10}),
    ("heat50d", {}), ("adr50d", {}),
])
def test_manufactured_residual(name, overrides):
    pb = pde.make_problem(name, overrides)
    pts = pb.sample_points(100, np.random.default_rng(0))
    lhs = pde.apply_operator(pb.operator, pb.solution, pts, pb.phi_true, vectorized=True)
    assert np.max(np.abs(lhs - pb.forcing(pts))) <= 1e-5


def test_heat1d_source_value():
    pb = pde.make_problem("heat1d")
    assert pb.forcing([0.0, 0.5])[0] == pytest.approx(np.pi**2 - 1.0, abs=1e-14)
    assert pb.solution([[0.0, 0.5]])[0] == pytest.approx(1.0)


def test_adr_source_at_origin():
    pb = pde.make_problem("adr50d")
    assert pb.forcing(np.zeros(51))[0] == pytest.approx(-0.784, abs=1e-14)


def test_heat_nd_diffusivity_at_origin_is_one():
    pb = pde.make_problem("heat50d")
    assert pde.diffusivity_field(pb, np.zeros(50))[0] == 1.0


def test_heat1d_operator_on_polynomial():
    # u_t - alpha u_xx for u = t + x^2 is 1 - 2 alpha, exactly on quadratics
    pb = pde.make_problem("heat1d")
    val = pde.apply_operator(pb.operator, lambda p: p[0] + p[1] ** 2, [0.3, 0.4], [0.7])
    assert val == pytest.approx(1.0 - 1.4, abs=1e-10)


def test_coefficients_must_be_affine():
    op = LinearOperatorSpec((Term(lambda P, phi: np.full(len(P), phi[0] ** 2), (0, 2)),), 1, (0.1, 0.1))
    with pytest.raises(ValueError, match="affine"):
        op.functional(np.zeros((1, 2)), 1)


def test_operator_validation():
    with pytest.raises(ValueError):
        LinearOperatorSpec((), 1, (0.1, 0.1))
    with pytest.raises(ValueError):
        LinearOperatorSpec((Term(lambda P, phi: 1.0, (2, 0)),), 1, (0.1, 0.1))
    with pytest.raises(ValueError):
        LinearOperatorSpec((Term(lambda P, phi: 1.0, (0, 1)),), 1, (0.1,))


def test_make_problem_errors():
    with pytest.raises(KeyError):
        pde.make_problem("wave2d")
    with pytest.raises(ValueError):
        pde.make_problem("heat1d", {"dim": 3})
    with pytest.raises(ValueError):
        pde.make_problem("heat1d", {"phi_true": [2.5]})


def test_collocation_deterministic():
    pb = pde.make_problem("heat1d")
    a = pde.sample_collocation(pb, 50, 11)
    assert np.array_equal(a, pde.sample_collocation(pb, 50, 11))
    assert not np.array_equal(a, pde.sample_collocation(pb, 50, 12))
    with pytest.raises(ValueError):
        pde.sample_collocation(pb, 0, 1)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["heat1d", "heat50d", "adr50d"]), st.integers(0, 2**31))
def test_collocation_interior_and_uniform(name, seed):
    pb = pde.make_problem(name, {} if name == "heat1d" else {"dim": 3})
    n = 2000
    pts = pde.sample_collocation(pb, n, seed)
    lo, hi = np.array(pb.lower), np.array(pb.upper)
    assert pts.shape == (n, len(lo))
    assert np.all(pts > lo)
    assert np.all(pts[:, 0] <= hi[0]) and np.all(pts[:, 1:] < hi[1:])
    # uniform: each coordinate mean within 3 sigma of the box centre
    sigma = (hi - lo) / np.sqrt(12 * n)
    assert np.all(np.abs(pts.mean(axis=0) - 0.5 * (lo + hi)) <= 3 * sigma)


def test_observations_are_exact():
    pb = pde.make_problem("heat1d")
    obs = pde.generate_observations(pb, 20, 10, 3)
    assert obs.n_u == 20 and obs.n_f == 10
    np.testing.assert_array_equal(obs.u, pb.solution(obs.S_u))
    np.testing.assert_array_equal(obs.f, pb.forcing(obs.S_f))
    with pytest.raises(ValueError):
        pde.generate_observations(pb, 0, 1, 0)


def test_observations_without_sources():
    obs = pde.generate_observations(pde.make_problem("adr50d", {"dim": 2}), 5, 0, 0)
    assert obs.n_f == 0 and obs.S_f.shape == (0, 3)
