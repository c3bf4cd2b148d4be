"""Stage 1: physics-informed pretraining of the deep kernel with Adam."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diff, nn
from .gp import ObservationSet, chol_jitter, nlml_from_blocks
from .kernel import functional_gram, rbf_matrix
from .pde import Functional, LinearOperatorSpec, ProblemSpec, coefficient_basis, sample_collocation
from .transforms import logit_to_box


@dataclass(frozen=True)
class LossWeights:
    w_data: float = 1.0
    w_PDE: float = 1.0
    w_GP: float = 1.0

    def __post_init__(self):
        vals = (self.w_data, self.w_PDE, self.w_GP)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class PretrainConfig:
    n_col: int = 100
    n_iter: int = 2000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    adam: AdamConfig = field(default_factory=AdamConfig)
    hidden: tuple[int, ...] = (32, 32)
    phi_init: tuple[float, ...] | None = None  # None: prior-box midpoint
    psi_init: tuple[float, ...] | None = None  # None: zeros (log scale)


@dataclass
class PretrainReport:
    theta: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    arch: nn.Architecture
    trace: np.ndarray  # (iterations, 4): total, L_data, L_PDE, L_GP
    iterations: int
    seed: int

    @property
    def params(self) -> nn.NetworkParams:
        return nn.NetworkParams.unflatten(self.arch, self.theta)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "architecture": self.arch.to_dict(),
            "theta": self.theta.tolist(),
            "psi": self.psi.tolist(),
            "phi": self.phi.tolist(),
            "trace": {k: self.trace[:, i].tolist()
                      for i, k in enumerate(("total", "L_data", "L_PDE", "L_GP"))},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainReport":
        tr = d["trace"]
        trace = np.column_stack([tr[k] for k in ("total", "L_data", "L_PDE", "L_GP")]) \
            if tr["total"] else np.empty((0, 4))
        return cls(np.array(d["theta"]), np.array(d["psi"]), np.array(d["phi"]),
                   nn.Architecture.from_dict(d["architecture"]), trace,
                   int(d["iterations"]), int(d["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PretrainReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


class CompositeLoss:
    """Weighted sum of data misfit, PDE residual and joint NLML.

    Point sets and stencil functionals are fixed at construction. The PDE
    residual is taken against ``source(col, phi)`` at the current phi; the
    source must be affine in phi and is stored as a basis so that phi may be
    a tape variable. ``__call__`` takes (theta, psi, phi).
    """

    def __init__(self, arch: nn.Architecture, obs: ObservationSet, col: np.ndarray,
                 op: LinearOperatorSpec, source, n_phi: int,
                 weights: LossWeights = LossWeights()):
        self.arch = arch
        self.obs = obs
        self.op = op
        self.w = weights
        self.Fu = Functional.identity(obs.S_u, n_phi)
        self.Ff = op.functional(obs.S_f, n_phi) if obs.n_f else None
        self.Fc = op.functional(col, n_phi)
        self.source_basis = coefficient_basis(source, self.Fc.points, n_phi)
        parts = [obs.S_u, self.Fc.footprint()]
        if self.Ff is not None:
            parts.append(self.Ff.footprint())
        self.points = np.vstack(parts)
        self._n_u = obs.n_u
        self._n_c = len(self.Fc.footprint())

    def __call__(self, theta, psi, phi):
        Z = nn.forward_flat(self.arch, theta, self.points)
        nu, nc = self._n_u, self._n_c
        Zu = Z[:nu]
        Zc = Z[nu:nu + nc]
        Kuu = rbf_matrix(Zu, Zu, psi)
        cf = chol_jitter(Kuu, self.obs.tau_u2)
        alpha = cf.solve(self.obs.u)

        mu_u = diff.matmul(Kuu, alpha)
        L_data = diff.mean(diff.square(diff.add(mu_u, -self.obs.u)))

        mu_c = diff.matmul(rbf_matrix(Zc, Zu, psi), alpha)
        src = diff.add(self.source_basis[0], diff.matmul(phi, self.source_basis[1:]))
        resid = diff.add(self.Fc.apply(mu_c, phi), -src)
        L_pde = diff.mean(diff.square(resid))

        if self.Ff is None:
            L_gp = nlml_from_blocks(Kuu, None, None, self.obs)
        else:
            Zf = Z[nu + nc:]
            Kuf = functional_gram(self.Fu, self.Ff, None, None, psi, phi, Zr=Zu, Zc=Zf)
            Kff = functional_gram(self.Ff, self.Ff, None, None, psi, phi, Zr=Zf, Zc=Zf)
            Kff = 0.5 * (Kff + diff.transpose(Kff))
            L_gp = nlml_from_blocks(Kuu, Kuf, Kff, self.obs)

        total = self.w.w_data * L_data + self.w.w_PDE * L_pde + self.w.w_GP * L_gp
        return total, L_data, L_pde, L_gp


def composite_loss(params, psi, phi, obs: ObservationSet, col, weights: LossWeights,
                   op: LinearOperatorSpec, source):
    """(total, L_data, L_PDE, L_GP) as floats for a fixed model state."""
    arch, theta = (params.arch, params.flatten()) if isinstance(params, nn.NetworkParams) else params
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    loss = CompositeLoss(arch, obs, np.atleast_2d(col), op, source, len(phi), weights)
    return tuple(float(v) for v in loss(theta, np.asarray(psi, dtype=np.float64), phi))


class PretrainObjective:
    """Composite loss on the flat vector x = (theta, psi, logit phi)."""

    def __init__(self, problem: ProblemSpec, obs: ObservationSet, col: np.ndarray,
                 arch: nn.Architecture, weights: LossWeights = LossWeights()):
        self.problem = problem
        self.arch = arch
        self.n_theta = arch.n_params
        self.n_psi = 1 + arch.latent_dim
        self.loss = CompositeLoss(arch, obs, col, problem.operator, problem.source,
                                  problem.n_phi, weights)

    def split(self, x):
        a, b = self.n_theta, self.n_theta + self.n_psi
        return x[:a], x[a:b], logit_to_box(x[b:], self.problem.prior_bounds)

    def value(self, x) -> tuple[float, ...]:
        return tuple(float(v) for v in self.loss(*self.split(np.asarray(x, dtype=np.float64))))

    def value_and_grad(self, x):
        """Components of the loss and the tape gradient of the total."""
        tape = diff.Tape()
        xv = tape.leaf(np.asarray(x, dtype=np.float64))
        out = self.loss(*self.split(xv))
        g = tape.backward(out[0])[xv.index]
        return tuple(float(diff._val(v)) for v in out), (np.zeros_like(xv.value) if g is None else g)


def adam(objective: PretrainObjective, x0: np.ndarray, n_iter: int, cfg: AdamConfig):
    """Full-batch Adam; returns (x, trace)."""
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = np.empty((n_iter, 4))
    for k in range(n_iter):
        try:
            comps, g = objective.value_and_grad(x)
        except diff.NonFiniteError as err:
            raise PretrainError(k, trace[:k]) from err
        if not np.all(np.isfinite(comps)) or not np.all(np.isfinite(g)):
            raise PretrainError(k, trace[:k])
        trace[k] = comps
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1 ** (k + 1))
        vhat = v / (1.0 - cfg.beta2 ** (k + 1))
        x = x - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return x, trace


class PretrainError(RuntimeError):
    def __init__(self, iteration: int, trace: np.ndarray):
        super().__init__(f"non-finite composite loss at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


def initial_vector(problem: ProblemSpec, arch: nn.Architecture, cfg: PretrainConfig) -> np.ndarray:
    theta = nn.init(arch, cfg.seed).flatten()
    psi = np.zeros(1 + arch.latent_dim) if cfg.psi_init is None else np.asarray(cfg.psi_init, float)
    if len(psi) != 1 + arch.latent_dim:
        raise ValueError(f"psi_init needs {1 + arch.latent_dim} entries")
    if cfg.phi_init is None:
        eta = np.zeros(problem.n_phi)
    else:
        eta = np.empty(problem.n_phi)
        for i, (v, (lo, hi)) in enumerate(zip(cfg.phi_init, problem.prior_bounds)):
            q = (v - lo) / (hi - lo)
            if not 0 < q < 1:
                raise ValueError(f"phi_init[{i}] = {v} outside the prior box")
            eta[i] = np.log(q) - np.log1p(-q)
    return np.concatenate([theta, psi, eta])


def run_pretraining(problem: ProblemSpec, obs: ObservationSet, cfg: PretrainConfig,
                    col: np.ndarray | None = None) -> PretrainReport:
    """Minimise the composite loss over (theta, psi, phi) from a seeded start."""
    arch = nn.Architecture.default(problem.operator.dim, problem.latent_dim, cfg.hidden,
                                   problem.lower, problem.upper)
    if col is None:
        col = sample_collocation(problem, cfg.n_col, cfg.seed)
    objective = PretrainObjective(problem, obs, col, arch, cfg.weights)
    x0 = initial_vector(problem, arch, cfg)
    x, trace = adam(objective, x0, cfg.n_iter, cfg.adam)
    theta, psi, phi = objective.split(x)
    phi = np.asarray(phi)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(psi))):
        raise PretrainError(cfg.n_iter, trace)
    # keep phi strictly inside the box even if the sigmoid saturates
    for i, (lo, hi) in enumerate(problem.prior_bounds):
        margin = 1e-9 * (hi - lo)
        phi[i] = min(max(phi[i], lo + margin), hi - margin)
    return PretrainReport(np.asarray(theta).copy(), np.asarray(psi).copy(), phi, arch,
                          trace, cfg.n_iter, cfg.seed)


__all__ = [
    "LossWeights", "AdamConfig", "PretrainConfig", "PretrainReport", "CompositeLoss",
    "composite_loss", "PretrainObjective", "run_pretraining", "sample_collocation",
    "PretrainError",
]
