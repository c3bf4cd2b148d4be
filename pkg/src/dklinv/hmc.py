"""Stage 2: Hamiltonian Monte Carlo over (phi, psi) with the feature map frozen."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .gp import CholeskyError, FixedFeatureGP, ObservationSet
from .pde import LinearOperatorSpec
from .transforms import ParamTransform

PSI_PRIOR_SD = 0.5
FD_STEP = 1e-5
MAX_FD_DIM = 16
MIN_WARMUP_ACCEPTANCE = 0.05
# factorisation failures and overflow all mean "reject this state"
_FAILURES = (CholeskyError, np.linalg.LinAlgError, FloatingPointError, ValueError)


@dataclass(frozen=True)
class HmcConfig:
    n_warmup: int = 1500
    n_samples: int = 8500
    n_leapfrog: int = 20
    step_size: float = 0.05
    target_accept: float = 0.8
    mass: tuple[float, ...] | None = None  # None: identity
    seed: int = 0
    gradient: str = "analytic"  # or "fd"
    # post-warmup steps are drawn from eps * U(1 - j, 1 + j); a fixed step and
    # path length can make trajectories near-periodic (e.g. on a Gaussian)
    step_jitter: float = 0.1

    def __post_init__(self):
        if self.n_warmup < 0 or self.n_samples < 1 or self.n_leapfrog < 1:
            raise ValueError("iteration counts must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.4 < self.target_accept < 0.99:
            raise ValueError("target_accept must lie in (0.4, 0.99)")
        if self.mass is not None and any(m <= 0 for m in self.mass):
            raise ValueError("mass entries must be positive")
        if self.gradient not in ("analytic", "fd"):
            raise ValueError(f"unknown gradient mode '{self.gradient}'")
        if not 0.0 <= self.step_jitter < 1.0:
            raise ValueError("step_jitter must lie in [0, 1)")


@dataclass
class SampleChain:
    draws: np.ndarray  # (n_samples, dim) in constrained space
    names: tuple[str, ...]
    acceptance_rate: float
    step_size: float
    potential: np.ndarray
    seed: int
    warmup_acceptance: float = float("nan")
    n_phi: int = 0
    fd_fallbacks: int = 0
    divergences: int = 0

    @property
    def phi(self) -> np.ndarray:
        return self.draws[:, :self.n_phi]

    @property
    def psi(self) -> np.ndarray:
        """Draws of (log signal variance, log lengthscales)."""
        return np.log(self.draws[:, self.n_phi:])

    def to_csv(self, path) -> None:
        np.savetxt(path, self.draws, delimiter=",", header=",".join(self.names),
                   comments="", fmt="%.17g")

    @staticmethod
    def read_csv(path) -> tuple[tuple[str, ...], np.ndarray]:
        with open(path) as fh:
            names = tuple(fh.readline().strip().split(","))
        return names, np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))

    def diagnostics(self) -> dict:
        return {
            "acceptance_rate": self.acceptance_rate,
            "warmup_acceptance": self.warmup_acceptance,
            "step_size": self.step_size,
            "n_samples": int(len(self.draws)),
            "seed": self.seed,
            "fd_fallbacks": self.fd_fallbacks,
            "divergences": self.divergences,
            "ess": {n: float(effective_sample_size(self.draws[:, i]))
                    for i, n in enumerate(self.names)},
        }


class HmcAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# posterior

@dataclass
class Posterior:
    """Potential energy over unconstrained xi = (logit phi, log psi-scales).

    ``psi`` follows the kernel convention (log signal variance, log
    lengthscales), so its unconstrained coordinates are the psi values
    themselves; their prior is Gaussian around ``psi_pre``.
    """

    model: FixedFeatureGP
    prior_bounds: tuple[tuple[float, float], ...]
    psi_pre: np.ndarray
    psi_sd: float = PSI_PRIOR_SD
    transform: ParamTransform = field(init=False)

    def __post_init__(self):
        self.psi_pre = np.asarray(self.psi_pre, dtype=np.float64)
        self.transform = ParamTransform.for_problem(self.prior_bounds, len(self.psi_pre))
        self.n_phi = len(self.prior_bounds)

    @property
    def dim(self) -> int:
        return self.n_phi + len(self.psi_pre)

    def split(self, xi):
        x = self.transform.to_constrained(xi)
        return x[:self.n_phi], np.asarray(xi[self.n_phi:], dtype=np.float64)

    def log_prior(self, xi) -> float:
        """log p(phi) + log p(psi) in constrained coordinates."""
        xi = np.asarray(xi, dtype=np.float64)
        lp = -sum(np.log(hi - lo) for lo, hi in self.prior_bounds)
        z = (xi[self.n_phi:] - self.psi_pre) / self.psi_sd
        # log-normal density on exp(psi)
        lp += float(np.sum(-0.5 * z * z - np.log(self.psi_sd * np.sqrt(2 * np.pi))
                           - xi[self.n_phi:]))
        return float(lp)

    def potential(self, xi) -> float:
        xi = np.asarray(xi, dtype=np.float64)
        if not np.all(np.isfinite(xi)):
            return np.inf
        try:
            with np.errstate(over="raise", invalid="raise"):
                phi, psi = self.split(xi)
                nlml = self.model.nlml(psi, phi)
        except _FAILURES:
            return np.inf
        u = nlml - self.log_prior(xi) - self.transform.log_jacobian(xi)
        return float(u) if np.isfinite(u) else np.inf

    def potential_and_grad(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        try:
            with np.errstate(over="raise", invalid="raise"):
                phi, psi = self.split(xi)
                nlml, g_psi, g_phi = self.model.nlml_and_grad(psi, phi)
        except _FAILURES:
            return np.inf, np.full(self.dim, np.nan)
        u = nlml - self.log_prior(xi) - self.transform.log_jacobian(xi)
        eta = xi[:self.n_phi]
        sig = 1.0 / (1.0 + np.exp(-eta))
        width = np.array([hi - lo for lo, hi in self.prior_bounds])
        g = np.empty(self.dim)
        g[:self.n_phi] = g_phi * width * sig * (1.0 - sig) - (1.0 - 2.0 * sig)
        g[self.n_phi:] = g_psi + (xi[self.n_phi:] - self.psi_pre) / self.psi_sd**2
        return float(u), g


def potential_energy(xi, obs: ObservationSet, theta_fix, psi_pre, prior_bounds,
                     op: LinearOperatorSpec) -> float:
    """Negative log unnormalised posterior at unconstrained ``xi``."""
    model = FixedFeatureGP(obs, theta_fix, op, len(prior_bounds))
    return Posterior(model, tuple(prior_bounds), psi_pre).potential(xi)


def grad_potential(potential: Callable, xi, step: float = FD_STEP):
    """Central finite-difference gradient; returns (gradient, number of one-sided fallbacks)."""
    xi = np.asarray(xi, dtype=np.float64)
    if len(xi) > MAX_FD_DIM:
        raise ValueError(f"finite-difference gradient limited to {MAX_FD_DIM} dimensions")
    g = np.empty(len(xi))
    fallbacks = 0
    u0 = None
    for i in range(len(xi)):
        e = np.zeros(len(xi))
        e[i] = step
        up, um = potential(xi + e), potential(xi - e)
        if np.isfinite(up) and np.isfinite(um):
            g[i] = (up - um) / (2.0 * step)
            continue
        fallbacks += 1
        if u0 is None:
            u0 = potential(xi)
        if np.isfinite(up) and np.isfinite(u0):
            g[i] = (up - u0) / step
        elif np.isfinite(um) and np.isfinite(u0):
            g[i] = (u0 - um) / step
        else:
            g[i] = np.nan
    return g, fallbacks


# ---------------------------------------------------------------------------
# sampler

def leapfrog(xi, p, step_size: float, n_steps: int, grad: Callable, mass=None, g0=None):
    """Half kick, n_steps drifts with interleaved full kicks, final half kick.

    ``grad`` returns the potential gradient. Returns (xi, p, last gradient);
    a non-finite state ends the trajectory early with NaNs.
    """
    inv_mass = 1.0 if mass is None else 1.0 / np.asarray(mass, dtype=np.float64)
    xi = np.array(xi, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    g = grad(xi) if g0 is None else g0
    p = p - 0.5 * step_size * g
    for k in range(n_steps):
        xi = xi + step_size * inv_mass * p
        g = grad(xi)
        if not np.all(np.isfinite(g)):
            return np.full_like(xi, np.nan), np.full_like(p, np.nan), g
        if k < n_steps - 1:
            p = p - step_size * g
    p = p - 0.5 * step_size * g
    return xi, p, g


class DualAveraging:
    """Step-size adaptation toward a target acceptance probability."""

    def __init__(self, step_size: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step_size)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps = np.log(step_size)
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    @property
    def final(self) -> float:
        return float(np.exp(self.log_eps_bar))


def sample(potential_and_grad: Callable, xi0, cfg: HmcConfig, to_constrained=None,
           names=None, n_phi: int = 0) -> SampleChain:
    """Generic HMC on an unconstrained potential returning (U, grad U)."""
    rng = np.random.default_rng(cfg.seed)
    xi = np.array(xi0, dtype=np.float64)
    dim = len(xi)
    mass = np.ones(dim) if cfg.mass is None else np.asarray(cfg.mass, dtype=np.float64)
    if len(mass) != dim:
        raise ValueError(f"mass has {len(mass)} entries, state has {dim}")
    to_constrained = to_constrained or (lambda v: v)
    names = tuple(names or (f"x{i}" for i in range(dim)))

    u, g = potential_and_grad(xi)
    if not (np.isfinite(u) and np.all(np.isfinite(g))):
        raise HmcAborted("non-finite potential at the initial point", {"xi0": xi.tolist()})

    cache = {}

    def grad(x):
        uu, gg = potential_and_grad(x)
        cache["u"] = uu
        return gg if np.isfinite(uu) else np.full(dim, np.nan)

    adapter = DualAveraging(cfg.step_size, cfg.target_accept)
    eps = cfg.step_size
    n_total = cfg.n_warmup + cfg.n_samples
    draws = np.empty((cfg.n_samples, dim))
    energies = np.empty(cfg.n_samples)
    accepted_warm = accepted = divergences = 0
    for it in range(n_total):
        p0 = rng.standard_normal(dim) * np.sqrt(mass)
        h0 = u + 0.5 * np.sum(p0 * p0 / mass)
        eps_it = eps
        if it >= cfg.n_warmup and cfg.step_jitter > 0:
            eps_it = eps * (1.0 + cfg.step_jitter * (2.0 * rng.uniform() - 1.0))
        x1, p1, g1 = leapfrog(xi, p0, eps_it, cfg.n_leapfrog, grad, mass, g0=g)
        u1 = cache.get("u", np.inf) if np.all(np.isfinite(x1)) else np.inf
        h1 = u1 + 0.5 * np.sum(p1 * p1 / mass) if np.isfinite(u1) else np.inf
        if np.isfinite(h1):
            log_ratio = h0 - h1
            accept_prob = 1.0 if log_ratio >= 0 else float(np.exp(log_ratio))
        else:
            accept_prob = 0.0
            divergences += 1
        if rng.uniform() < accept_prob:
            xi, u, g = x1, u1, g1
            if it < cfg.n_warmup:
                accepted_warm += 1
            else:
                accepted += 1
        if it < cfg.n_warmup:
            eps = adapter.update(accept_prob)
            if it == cfg.n_warmup - 1:
                eps = adapter.final
                rate = accepted_warm / cfg.n_warmup
                if rate < MIN_WARMUP_ACCEPTANCE:
                    raise HmcAborted(f"warmup acceptance {rate:.3f} below {MIN_WARMUP_ACCEPTANCE}",
                                     {"warmup_acceptance": rate, "step_size": eps})
        else:
            j = it - cfg.n_warmup
            draws[j] = to_constrained(xi)
            energies[j] = u
    return SampleChain(draws, names, accepted / cfg.n_samples, float(eps), energies, cfg.seed,
                       accepted_warm / cfg.n_warmup if cfg.n_warmup else float("nan"),
                       n_phi=n_phi, divergences=divergences)


def run_hmc(obs: ObservationSet, theta_fix, psi_pre, phi_pre, prior_bounds,
            op: LinearOperatorSpec, cfg: HmcConfig, param_names=None) -> SampleChain:
    """Sample (phi, psi) starting from the pretrained estimates."""
    prior_bounds = tuple(tuple(b) for b in prior_bounds)
    model = FixedFeatureGP(obs, theta_fix, op, len(prior_bounds))
    post = Posterior(model, prior_bounds, psi_pre)
    x0 = np.concatenate([np.asarray(phi_pre, dtype=np.float64), np.exp(post.psi_pre)])
    xi0 = post.transform.to_unconstrained(x0)
    counter = {"fallbacks": 0}

    if cfg.gradient == "analytic":
        fn = post.potential_and_grad
    else:
        def fn(x):
            gg, nfb = grad_potential(post.potential, x)
            counter["fallbacks"] += nfb
            return post.potential(x), gg

    n_phi = len(prior_bounds)
    phi_names = tuple(param_names or (f"phi{i + 1}" for i in range(n_phi)))
    names = phi_names + ("signal_variance",) + tuple(
        f"lengthscale{i + 1}" for i in range(len(post.psi_pre) - 1))
    chain = sample(fn, xi0, cfg, post.transform.to_constrained, names, n_phi)
    chain.fd_fallbacks = counter["fallbacks"]
    return chain


# ---------------------------------------------------------------------------
# diagnostics and MAP

def effective_sample_size(x) -> float:
    """ESS by Geyer's initial positive sequence of autocorrelation pairs."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = np.dot(x, x) / n
    if var <= 0:
        return float(n)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(f * np.conj(f), nfft)[:n] / (n * var)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


@dataclass
class MapResult:
    phi: np.ndarray
    objective: float
    converged: bool
    iterations: int


def map_estimate(obs: ObservationSet, theta_fix, psi_fix, phi_pre, prior_cov,
                 op: LinearOperatorSpec, max_iter: int = 200) -> MapResult:
    """Minimise fidelity + log|Schur| + prior quadratic over phi.

    With psi fixed, fidelity + log|Schur| differs from twice the joint NLML by
    a phi-independent constant, so the gradient comes from the analytic NLML
    gradient.
    """
    phi_pre = np.atleast_1d(np.asarray(phi_pre, dtype=np.float64))
    P = np.linalg.inv(np.atleast_2d(np.asarray(prior_cov, dtype=np.float64)))
    model = FixedFeatureGP(obs, theta_fix, op, len(phi_pre))

    def fun(phi):
        try:
            fid, comp, _ = model.decomposed(psi_fix, phi)
            _, _, g_phi = model.nlml_and_grad(psi_fix, phi)
        except (CholeskyError, np.linalg.LinAlgError):
            return np.inf, np.zeros(len(phi))
        r = phi - phi_pre
        return fid + comp + float(r @ P @ r), 2.0 * g_phi + 2.0 * P @ r

    res = optimize.minimize(fun, phi_pre, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter})
    return MapResult(np.asarray(res.x), float(res.fun), bool(res.success), int(res.nit))


def save_diagnostics(chain: SampleChain, path) -> None:
    with open(path, "w") as fh:
        json.dump(chain.diagnostics(), fh, indent=2, sort_keys=True)


__all__ = [
    "HmcConfig", "SampleChain", "Posterior", "ParamTransform", "potential_energy",
    "grad_potential", "leapfrog", "DualAveraging", "sample", "run_hmc",
    "effective_sample_size", "map_estimate", "MapResult", "HmcAborted",
]
