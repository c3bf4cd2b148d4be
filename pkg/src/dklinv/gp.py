"""GP linear algebra: jittered Cholesky, predictions and the joint (u, f) likelihood."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff
from .kernel import _unpack, features, functional_gram, rbf_matrix
from .pde import Functional, LinearOperatorSpec

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_LADDER = (0.0,) + tuple(10.0**k for k in range(-10, -3))


@dataclass
class ObservationSet:
    S_u: np.ndarray
    u: np.ndarray
    S_f: np.ndarray
    f: np.ndarray
    tau_u2: float = 1e-6
    tau_f2: float = 1e-6

    def __post_init__(self):
        self.S_u = np.atleast_2d(np.asarray(self.S_u, dtype=np.float64))
        self.u = np.asarray(self.u, dtype=np.float64).ravel()
        dim = self.S_u.shape[1]
        self.S_f = np.asarray(self.S_f, dtype=np.float64).reshape(-1, dim)
        self.f = np.asarray(self.f, dtype=np.float64).ravel()
        if len(self.u) < 1 or len(self.u) != len(self.S_u):
            raise ValueError("need N_u >= 1 state observations matching their locations")
        if len(self.f) != len(self.S_f):
            raise ValueError("source values and locations differ in length")
        if not (self.tau_u2 > 0 and self.tau_f2 > 0):
            raise ValueError("nugget variances must be positive")

    @property
    def n_u(self) -> int:
        return len(self.u)

    @property
    def n_f(self) -> int:
        return len(self.f)

    @property
    def n_total(self) -> int:
        return self.n_u + self.n_f

    @property
    def d_joint(self) -> np.ndarray:
        return np.concatenate([self.u, self.f])

    @property
    def noise(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_u, self.tau_u2), np.full(self.n_f, self.tau_f2)])


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, ladder):
        super().__init__(f"Cholesky failed for every jitter in {list(ladder)}")
        self.ladder = tuple(ladder)


@dataclass
class CholFactor:
    L: object  # ndarray or tape Var
    jitter: float

    def solve(self, b):
        """(L Lᵀ)⁻¹ b."""
        return diff.solve_triangular(self.L, diff.solve_triangular(self.L, b), trans=True)

    def logdet(self):
        return 2.0 * diff.sum_(diff.log(diff.diag(self.L)))


def chol_jitter(K, base_nugget: float = 0.0) -> CholFactor:
    """Cholesky of K + (base_nugget + jitter) I, escalating jitter 0, 1e-10, ..., 1e-4."""
    Kv = diff._val(K)
    n = Kv.shape[0]
    eye = np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            np.linalg.cholesky(Kv + (base_nugget + jitter) * eye)
        except np.linalg.LinAlgError:
            continue
        shift = base_nugget + jitter
        A = diff.add(K, shift * eye) if shift else K
        return CholFactor(diff.cholesky(A), jitter)
    raise CholeskyError(JITTER_LADDER)


def _quad_logdet(K, y):
    """(yᵀK⁻¹y, log|K|) via a jittered Cholesky."""
    cf = chol_jitter(K)
    v = diff.solve_triangular(cf.L, y)
    return diff.sum_(diff.square(v)), cf.logdet()


def nlml_from_blocks(Kuu, Kuf, Kff, obs: ObservationSet):
    """Negative log marginal likelihood of d = [u; f] under N(0, K_joint + Σ_noise)."""
    if obs.n_f == 0:
        K = Kuu
    else:
        K = diff.block([[Kuu, Kuf], [diff.transpose(Kuf), Kff]])
    K = diff.add(K, np.diag(obs.noise))
    quad, logdet = _quad_logdet(K, obs.d_joint)
    return 0.5 * quad + 0.5 * logdet + 0.5 * obs.n_total * LOG_2PI


def decomposed_from_blocks(Kuu, Kuf, Kff, obs: ObservationSet):
    """(fidelity, complexity, C) with loglik = -0.5 (fidelity + complexity) + C.

    complexity is -log|R_ff| = log|Schur complement|.
    """
    Kuu_t = Kuu + obs.tau_u2 * np.eye(obs.n_u)
    cu = chol_jitter(Kuu_t)
    a = cu.solve(obs.u)
    const = -0.5 * float(obs.u @ a) - 0.5 * float(cu.logdet()) - 0.5 * obs.n_total * LOG_2PI
    if obs.n_f == 0:
        return 0.0, 0.0, const
    h = Kuf.T @ a
    V = diff.solve_triangular(cu.L, Kuf)
    schur = Kff + obs.tau_f2 * np.eye(obs.n_f) - V.T @ V
    schur = 0.5 * (schur + schur.T)
    cs = chol_jitter(schur)
    w = diff.solve_triangular(cs.L, obs.f - h)
    fidelity = float(w @ w)
    complexity = float(cs.logdet())
    return fidelity, complexity, const


def joint_blocks(obs: ObservationSet, params, psi, phi, op: LinearOperatorSpec):
    """K_uu, K_uf and K_ff for the observation set (any input may be on a tape)."""
    arch, theta = _unpack(params)
    phi_v = phi if isinstance(phi, diff.Var) else np.atleast_1d(np.asarray(phi, dtype=np.float64))
    n_phi = len(phi_v)
    Fu = Functional.identity(obs.S_u, n_phi)
    Zu = features(arch, theta, obs.S_u)
    Kuu = rbf_matrix(Zu, Zu, psi)
    if obs.n_f == 0:
        return Kuu, None, None
    Ff = op.functional(obs.S_f, n_phi)
    Zf = features(arch, theta, Ff.footprint())
    Kuf = functional_gram(Fu, Ff, arch, theta, psi, phi_v, Zr=Zu, Zc=Zf)
    Kff = functional_gram(Ff, Ff, arch, theta, psi, phi_v, Zr=Zf, Zc=Zf)
    Kff = 0.5 * (Kff + diff.transpose(Kff))
    return Kuu, Kuf, Kff


def joint_covariance(obs: ObservationSet, params, psi, phi, op: LinearOperatorSpec) -> np.ndarray:
    """The assembled K_joint (without the noise term)."""
    Kuu, Kuf, Kff = joint_blocks(obs, params, psi, phi, op)
    if Kuf is None:
        return np.asarray(Kuu)
    return np.block([[Kuu, Kuf], [Kuf.T, Kff]])


def joint_nlml(obs: ObservationSet, params, psi, phi, op: LinearOperatorSpec):
    return nlml_from_blocks(*joint_blocks(obs, params, psi, phi, op), obs)


def decomposed_loglik(obs: ObservationSet, params, psi, phi, op: LinearOperatorSpec):
    """Split of the joint log-likelihood into source-fit, complexity and a phi-free constant."""
    blocks = [None if b is None else np.asarray(diff._val(b)) for b in
              joint_blocks(obs, params, psi, phi, op)]
    return decomposed_from_blocks(*blocks, obs)


def gpr_predict(S_u, u, params, psi, tau_u2: float, test):
    """Zero-mean GP posterior mean and variance at ``test`` given state observations only."""
    arch, theta = _unpack(params)
    Zu = features(arch, theta, S_u)
    Zs = features(arch, theta, test)
    Kuu = rbf_matrix(Zu, Zu, psi)
    Ksu = rbf_matrix(Zs, Zu, psi)
    cf = chol_jitter(Kuu, tau_u2)
    mean = Ksu @ cf.solve(np.asarray(u, dtype=np.float64))
    V = diff.solve_triangular(cf.L, Ksu.T)
    prior = np.exp(np.asarray(psi)[0] if not hasattr(psi, "to_vector") else psi.to_vector()[0])
    var = prior - np.sum(V * V, axis=0)
    return mean, np.maximum(var, 0.0)


def _sqdiff(A, B):
    """Per-dimension squared differences, shape (p, len(A), len(B))."""
    return (A.T[:, :, None] - B.T[:, None, :]) ** 2


class FixedFeatureGP:
    """Joint (u, f) GP with the feature map frozen.

    Latent features of the state locations and of every stencil footprint
    point are computed once, so each likelihood evaluation costs a few
    exponentials and contractions. ``nlml_and_grad`` returns closed-form
    gradients via dNLML = 1/2 tr((K^-1 - a a^T) dK).

    The source block is a double stencil contraction, which amplifies any
    rounding that is independent per footprint pair by (sum |w|)^2. With
    z_nm = z_n + a_m and Delta = z_n - z_k the pair exponent splits as

        y_ml = y_00 + u_m + v_l + sum_p s_p a_mp b_lp,

    so only the small cross term is pair-specific. It enters through
    expm1, whose rounding is proportional to its (tiny) value; per-point
    factors are only amplified once.
    """

    def __init__(self, obs: ObservationSet, params, op: LinearOperatorSpec, n_phi: int):
        arch, theta = _unpack(params)
        self.obs = obs
        self.op = op
        self.n_phi = n_phi
        self.params = (arch, theta)
        self.Zu = np.asarray(features(arch, theta, obs.S_u))
        self.sq_uu = _sqdiff(self.Zu, self.Zu)
        if obs.n_f:
            self.Ff = op.functional(obs.S_f, n_phi)
            nf, M = self.Ff.n_points, self.Ff.n_offsets
            self.Zf = np.asarray(features(arch, theta, self.Ff.footprint()))
            self.sq_uf = _sqdiff(self.Zu, self.Zf)
            z0 = np.asarray(features(arch, theta, self.Ff.points))
            self.A = self.Zf.reshape(nf, M, -1) - z0[:, None, :]
            self.D = z0[:, None, :] - z0[None, :, :]
        else:
            self.Ff = None
        self.noise = np.diag(obs.noise)

    @property
    def latent_dim(self) -> int:
        return self.Zu.shape[1]

    def _E(self, sq, s):
        return np.exp(-0.5 * np.tensordot(s, sq, axes=1))

    def _source_parts(self, s, W):
        """Factors of the source-source block; everything indexed [n, k, m]."""
        A, D = self.A, self.D
        sA = A * s
        half_aa = 0.5 * np.einsum("nmp,nmp->nm", sA, A)
        C = np.exp(-0.5 * np.einsum("p,nkp->nk", s, D * D))
        eu = np.exp(-half_aa[:, None, :] - np.einsum("nkp,nmp->nkm", D, sA))
        ev = np.exp(-half_aa[None, :, :] + np.einsum("nkp,klp->nkl", D, sA))
        G = np.expm1(np.tensordot(sA, A, axes=([2], [2])))
        Lw = W[:, None, :] * eu
        Rw = W[None, :, :] * ev
        # inner[n, k, m] = sum_l Rw[n, k, l] (1 + G[n, m, k, l])
        inner = Rw.sum(axis=2)[:, :, None] + np.einsum("nmkl,nkl->nkm", G, Rw)
        return {"C": C, "eu": eu, "G": G, "Lw": Lw, "Rw": Rw, "inner": inner,
                "EW": C[:, :, None] * eu * inner}

    def _parts(self, psi, phi):
        psi = np.asarray(psi, dtype=np.float64)
        sig2 = np.exp(psi[0])
        s = np.exp(-2.0 * psi[1:])
        out = {"sig2": sig2, "s": s, "Euu": self._E(self.sq_uu, s)}
        Kuu = sig2 * out["Euu"]
        if self.Ff is None:
            out["K"] = Kuu
            return out
        nf, M = self.Ff.n_points, self.Ff.n_offsets
        W = np.asarray(self.Ff.weights(np.atleast_1d(np.asarray(phi, dtype=np.float64))))
        Euf = self._E(self.sq_uf, s)
        Euf3 = Euf.reshape(-1, nf, M)
        Kuf = sig2 * np.einsum("unm,nm->un", Euf3, W)
        src = self._source_parts(s, W)
        # EW[n, k, m] = sum_l E[(n, m), (k, l)] W[k, l]
        Kff = sig2 * np.einsum("nm,nkm->nk", W, src["EW"])
        Kff = 0.5 * (Kff + Kff.T)
        out.update(W=W, Euf=Euf, Euf3=Euf3, src=src, K=np.block([[Kuu, Kuf], [Kuf.T, Kff]]))
        return out

    def covariance(self, psi, phi) -> np.ndarray:
        """K_joint without the noise term."""
        return self._parts(psi, phi)["K"]

    def nlml(self, psi, phi) -> float:
        K = self.covariance(psi, phi) + self.noise
        quad, logdet = _quad_logdet(K, self.obs.d_joint)
        return float(0.5 * quad + 0.5 * logdet + 0.5 * self.obs.n_total * LOG_2PI)

    def _source_lengthscale_terms(self, src, s, Qff):
        """sum_nk Qff[n, k] sum_ml W W sq_p E for each latent dimension p.

        The squared difference splits as Delta^2 + alpha_m + beta_l - 2 a_m b_l;
        the beta terms equal the alpha terms by symmetry of Q and the kernel.
        """
        A, D = self.A, self.D
        QC = Qff * src["C"]
        Lw, Rw, inner, G = src["Lw"], src["Rw"], src["inner"], src["G"]
        S0 = np.sum(Lw * inner, axis=2)
        acc = np.empty(len(s))
        for p in range(len(s)):
            alpha = A[:, None, :, p] ** 2 + 2.0 * D[:, :, p, None] * A[:, None, :, p]
            S_alpha = np.sum(Lw * alpha * inner, axis=2)
            Rb = Rw * A[None, :, :, p]
            La = Lw * A[:, None, :, p]
            S_ab = La.sum(axis=2) * Rb.sum(axis=2) + np.sum(
                La * np.einsum("nmkl,nkl->nkm", G, Rb), axis=2)
            acc[p] = np.sum(QC * (D[:, :, p] ** 2 * S0 + 2.0 * S_alpha - 2.0 * S_ab))
        return acc

    def nlml_and_grad(self, psi, phi):
        """(nlml, d/dpsi, d/dphi)."""
        parts = self._parts(psi, phi)
        K = parts["K"]
        cf = chol_jitter(K + self.noise)
        d = self.obs.d_joint
        a = cf.solve(d)
        value = 0.5 * float(d @ a) + float(cf.logdet()) * 0.5 + 0.5 * self.obs.n_total * LOG_2PI
        Kinv = cf.solve(np.eye(len(d)))
        Q = Kinv - np.outer(a, a)
        sig2, s = parts["sig2"], parts["s"]
        nu = self.obs.n_u

        g_psi = np.empty(1 + len(s))
        g_psi[0] = 0.5 * np.sum(Q * K)
        Quu = Q[:nu, :nu]
        acc = np.tensordot(self.sq_uu, Quu * parts["Euu"], axes=([1, 2], [0, 1]))
        g_phi = np.zeros(self.n_phi)
        if self.Ff is not None:
            W = parts["W"]
            nf, M = W.shape
            Quf = Q[:nu, nu:]
            Qff = 0.5 * (Q[nu:, nu:] + Q[nu:, nu:].T)
            Auf = (Quf[:, :, None] * W[None]).reshape(nu, nf * M)
            acc = acc + 2.0 * np.tensordot(self.sq_uf, Auf * parts["Euf"], axes=([1, 2], [0, 1]))
            acc = acc + self._source_lengthscale_terms(parts["src"], s, Qff)
            T = np.einsum("un,unm->nm", Quf, parts["Euf3"])
            T = T + np.einsum("nkm,nk->nm", parts["src"]["EW"], Qff)
            g_phi = sig2 * np.tensordot(self.Ff.basis[1:], T, axes=([1, 2], [0, 1]))
        g_psi[1:] = 0.5 * sig2 * s * acc
        return value, g_psi, g_phi

    def decomposed(self, psi, phi):
        """(fidelity, complexity, C) for this parameter setting."""
        K = self.covariance(psi, phi)
        nu = self.obs.n_u
        if self.Ff is None:
            return decomposed_from_blocks(K, None, None, self.obs)
        return decomposed_from_blocks(K[:nu, :nu], K[:nu, nu:], K[nu:, nu:], self.obs)

    def cross(self, test, psi, phi) -> np.ndarray:
        """Covariance between the state at ``test`` and the joint observation vector."""
        psi = np.asarray(psi, dtype=np.float64)
        sig2 = np.exp(psi[0])
        s = np.exp(-2.0 * psi[1:])
        arch, theta = self.params
        Zs = np.asarray(features(arch, theta, test))
        Ksu = sig2 * self._E(_sqdiff(Zs, self.Zu), s)
        if self.Ff is None:
            return Ksu
        W = self.Ff.weights(np.atleast_1d(np.asarray(phi, dtype=np.float64)))
        Esf = self._E(_sqdiff(Zs, self.Zf), s).reshape(len(Zs), self.Ff.n_points, -1)
        return np.hstack([Ksu, sig2 * np.einsum("snm,nm->sn", Esf, W)])

    def predict(self, test, psi, phi, full_cov: bool = True):
        """Conditional mean and covariance (or variance) of the state at ``test`` given d_joint."""
        psi = np.asarray(psi, dtype=np.float64)
        K = self.covariance(psi, phi)
        cf = chol_jitter(K + self.noise)
        Ks = self.cross(test, psi, phi)
        mean = Ks @ cf.solve(self.obs.d_joint)
        V = diff.solve_triangular(cf.L, Ks.T)
        prior = np.exp(psi[0])
        if full_cov:
            arch, theta = self.params
            Zs = np.asarray(features(arch, theta, test))
            cov = rbf_matrix(Zs, Zs, psi) - V.T @ V
            return mean, 0.5 * (cov + cov.T)
        return mean, np.maximum(prior - np.sum(V * V, axis=0), 0.0)
