import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dklinv import diff, gp, nn, pde
from dklinv.pde import LinearOperatorSpec, Term


def test_chol_identity():
    cf = gp.chol_jitter(np.eye(3))
    assert cf.jitter == 0.0
    np.testing.assert_array_equal(cf.L, np.eye(3))


def test_chol_hand_example():
    cf = gp.chol_jitter(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(cf.L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)


def test_chol_rank_one_needs_jitter():
    v = np.array([1.0, 2.0, -1.0, 0.5])
    K = np.outer(v, v)
    cf = gp.chol_jitter(K)
    assert 0 < cf.jitter <= 1e-4
    np.testing.assert_allclose(cf.L @ cf.L.T, K + cf.jitter * np.eye(4), rtol=1e-8, atol=1e-12)


def test_chol_gives_up_on_indefinite():
    with pytest.raises(gp.CholeskyError):
        gp.chol_jitter(np.diag([1.0, -1.0]))


def test_single_observation_nlml():
    obs = gp.ObservationSet(np.zeros((1, 2)), [0.0], np.empty((0, 2)), [], 1e-300, 1e-6)
    val = gp.nlml_from_blocks(np.ones((1, 1)) - 1e-300, None, None, obs)
    assert val == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)


def test_observation_set_validation():
    with pytest.raises(ValueError):
        gp.ObservationSet(np.empty((0, 2)), [], np.empty((0, 2)), [])
    with pytest.raises(ValueError):
        gp.ObservationSet(np.zeros((2, 2)), [1.0, 2.0], np.zeros((1, 2)), [1.0], tau_u2=0.0)


def brute_predict(S, u, psi, tau2, test):
    K = np.array([[gp.np.exp(psi[0]) * np.exp(-0.5 * np.sum(((a - b) / np.exp(psi[1:])) ** 2))
                   for b in S] for a in S])
    Ks = np.array([[np.exp(psi[0]) * np.exp(-0.5 * np.sum(((a - b) / np.exp(psi[1:])) ** 2))
                    for b in S] for a in test])
    Kinv = np.linalg.inv(K + tau2 * np.eye(len(S)))
    return Ks @ Kinv @ u, np.exp(psi[0]) - np.sum((Ks @ Kinv) * Ks, axis=1)


def test_gpr_predict_three_points():
    S = np.array([[0.1, 0.2], [0.5, 0.9], [0.8, 0.3]])
    u = np.array([0.3, -1.0, 0.7])
    test = np.array([[0.4, 0.4], [0.0, 1.0]])
    psi = np.array([0.2, -0.5, -0.3])
    m, v = gp.gpr_predict(S, u, None, psi, 1e-3, test)
    mb, vb = brute_predict(S, u, psi, 1e-3, test)
    np.testing.assert_allclose(m, mb, atol=1e-10)
    np.testing.assert_allclose(v, vb, atol=1e-10)


def test_gpr_interpolates_and_reverts():
    rng = np.random.default_rng(0)
    S = rng.uniform(size=(8, 2))
    u = np.sin(S.sum(axis=1))
    m, v = gp.gpr_predict(S, u, None, np.array([0.0, -1.0, -1.0]), 1e-6, S)
    assert np.max(np.abs(m - u)) < 1e-4
    assert np.all(v <= 1e-6 + 1e-8)
    far, vfar = gp.gpr_predict(S, u, None, np.array([0.3, -3.0, -3.0]), 1e-6, np.array([[50.0, 50.0]]))
    assert abs(far[0]) < 1e-12
    assert vfar[0] == pytest.approx(np.exp(0.3))


def random_instance(seed, n_u=None, n_f=None, tau=1e-4):
    rng = np.random.default_rng(seed)
    pb = pde.make_problem("heat1d")
    n_u = n_u or int(rng.integers(2, 16))
    n_f = n_f if n_f is not None else int(rng.integers(1, 16))
    obs = pde.generate_observations(pb, n_u, n_f, seed)
    obs = gp.ObservationSet(obs.S_u, obs.u, obs.S_f, obs.f, tau, tau)
    arch = nn.Architecture.default(2, 2, (8,), pb.lower, pb.upper)
    params = nn.init(arch, seed)
    psi = rng.uniform(-0.5, 0.5, size=3)
    phi = rng.uniform(0.1, 1.9, size=1)
    return pb, obs, params, psi, phi


def test_joint_nlml_without_sources_is_standard_nlml():
    pb, obs, params, psi, phi = random_instance(1, n_u=7, n_f=0)
    Z = nn.forward(params, obs.S_u)
    K = np.array(gp.rbf_matrix(Z, Z, psi)) + obs.tau_u2 * np.eye(7)
    expected = 0.5 * obs.u @ np.linalg.solve(K, obs.u) + 0.5 * np.linalg.slogdet(K)[1] + 3.5 * gp.LOG_2PI
    assert gp.joint_nlml(obs, params, psi, phi, pb.operator) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_decomposition_matches_joint_nlml(seed):
    # a small nugget makes the quadratic form ill-conditioned and the two
    # factorisation paths then differ by cond * eps
    pb, obs, params, psi, phi = random_instance(seed, tau=1e-2)
    fid, comp, C = gp.decomposed_loglik(obs, params, psi, phi, pb.operator)
    assert fid >= 0
    nlml = gp.joint_nlml(obs, params, psi, phi, pb.operator)
    assert -0.5 * (fid + comp) + C == pytest.approx(-nlml, abs=1e-8)


def test_decomposition_with_uncoupled_sources():
    # zero-coefficient operator: K_uf = 0, so h = 0 and the Schur complement is K_ff + tau I
    op = LinearOperatorSpec((Term(lambda P, phi: np.zeros(len(P)), (0, 0)),), 1, (1e-2, 1e-2))
    rng = np.random.default_rng(0)
    obs = gp.ObservationSet(rng.uniform(size=(4, 2)), rng.normal(size=4),
                            rng.uniform(size=(3, 2)), rng.normal(size=3), 1e-2, 0.5)
    fid, comp, C = gp.decomposed_loglik(obs, None, np.zeros(3), [0.0], op)
    assert fid == pytest.approx(obs.f @ obs.f / 0.5, rel=1e-12)
    assert comp == pytest.approx(3 * np.log(0.5), rel=1e-12)


def test_joint_covariance_psd_and_symmetric():
    for seed in range(5):
        pb, obs, params, psi, phi = random_instance(seed, n_u=10, n_f=10)
        K = gp.joint_covariance(obs, params, psi, phi, pb.operator)
        nu = obs.n_u
        np.testing.assert_allclose(K[:nu, nu:], K[nu:, :nu].T, atol=1e-8)
        assert np.linalg.eigvalsh(K + 1e-6 * np.eye(len(K))).min() >= -1e-8


def test_nlml_permutation_invariant():
    pb, obs, params, psi, phi = random_instance(3, n_u=6, n_f=5)
    pu, pf = np.random.default_rng(0).permutation(6), np.random.default_rng(1).permutation(5)
    perm = gp.ObservationSet(obs.S_u[pu], obs.u[pu], obs.S_f[pf], obs.f[pf], obs.tau_u2, obs.tau_f2)
    assert gp.joint_nlml(perm, params, psi, phi, pb.operator) == pytest.approx(
        gp.joint_nlml(obs, params, psi, phi, pb.operator), abs=1e-10)


def fd5(fn, x, h):
    g = np.empty(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        g[i] = (8 * (fn(x + e) - fn(x - e)) - (fn(x + 2 * e) - fn(x - 2 * e))) / (12 * h)
    return g


@pytest.mark.parametrize("seed", range(4))
def test_nlml_psi_gradient_matches_fd(seed):
    # stencil cancellation leaves ~1e-8 noise in K_ff, so the reference
    # difference uses a wide five-point formula
    pb, obs, params, psi, phi = random_instance(seed + 4, n_u=3, n_f=2, tau=1e-1)
    fn = lambda p: gp.joint_nlml(obs, params, p, phi, pb.operator)
    _, g = diff.tape_gradient(fn, psi)
    fd = fd5(lambda p: float(fn(p)), psi, 1e-2)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) < 1e-6


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_fixed_feature_model_agrees(seed):
    pb, obs, params, psi, phi = random_instance(seed, n_u=8, n_f=6, tau=1e-1)
    model = gp.FixedFeatureGP(obs, params, pb.operator, 1)
    ref = gp.joint_nlml(obs, params, psi, phi, pb.operator)
    value, g_psi, g_phi = model.nlml_and_grad(psi, phi)
    assert value == pytest.approx(ref, rel=1e-6)
    assert model.nlml(psi, phi) == pytest.approx(value, rel=1e-12)
    fn = lambda x: gp.joint_nlml(obs, params, x[:3], x[3:], pb.operator)
    _, g = diff.tape_gradient(fn, np.r_[psi, phi])
    # both paths carry the K_ff stencil round-off, summed in a different order
    assert np.max(np.abs(np.r_[g_psi, g_phi] - g)) <= 2e-5 * np.abs(g).max()


def test_fixed_feature_predict_reduces_to_gpr():
    pb, obs, params, psi, phi = random_instance(6, n_u=9, n_f=0, tau=1e-4)
    test = np.random.default_rng(0).uniform(size=(5, 2))
    m, v = gp.FixedFeatureGP(obs, params, pb.operator, 1).predict(test, psi, phi, full_cov=False)
    m2, v2 = gp.gpr_predict(obs.S_u, obs.u, params, psi, obs.tau_u2, test)
    np.testing.assert_allclose(m, m2, atol=1e-10)
    np.testing.assert_allclose(v, v2, atol=1e-10)


def wide_source_block(model, psi, phi):
    """Double stencil contraction with every pairwise step in long double."""
    L = np.longdouble
    Z = model.Zf.astype(L)
    s = np.exp(-2.0 * np.asarray(psi[1:], dtype=L))
    sq = (Z[:, None, :] - Z[None, :, :]) ** 2
    E = np.exp(-0.5 * np.sum(s * sq, axis=2))
    nf, M = model.Ff.n_points, model.Ff.n_offsets
    W = np.asarray(model.Ff.weights(phi), dtype=L)
    K = np.exp(L(psi[0])) * np.einsum("nm,nmkl,kl->nk", W, E.reshape(nf, M, nf, M), W)
    return K.astype(np.float64)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_source_block_matches_extended_precision(seed):
    pb, obs, params, psi, phi = random_instance(seed, n_u=3, n_f=6)
    model = gp.FixedFeatureGP(obs, params, pb.operator, 1)
    K = model.covariance(psi, phi)[3:, 3:]
    ref = wide_source_block(model, psi, phi)
    # a plain float64 contraction is off by ~1e-7 here
    assert np.max(np.abs(K - ref)) <= 1e-9 * np.abs(ref).max()


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_fixed_feature_gradient_matches_fd(seed):
    pb, obs, params, psi, phi = random_instance(seed, n_u=8, n_f=6, tau=1e-2)
    model = gp.FixedFeatureGP(obs, params, pb.operator, 1)
    _, g_psi, g_phi = model.nlml_and_grad(psi, phi)
    x0 = np.r_[psi, phi]
    g = fd5(lambda x: model.nlml(x[:3], x[3:]), x0, 1e-3)
    assert np.max(np.abs(np.r_[g_psi, g_phi] - g)) <= 1e-6 * np.abs(g).max()
