"""Linear space-time operators, manufactured test problems and observation sampling.

Points are rows ``(t, x_1, ..., x_d)``. An operator is a sum of terms
``coefficient(points, phi) * D^alpha``; coefficients must be affine in phi,
which every shipped problem satisfies and which lets the stencil weights be
differentiated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diff

Coefficient = Callable[[np.ndarray, np.ndarray], np.ndarray]

KERNEL_STEP_FRACTION = 1e-2
ORIGIN_EXCLUSION = 1e-8
# alpha_1 = 0.3 would sit on the boundary of U(-0.3, 0.3); widened so the truth is interior
HEAT_ND_PRIOR = ((-0.5, 0.5),) * 3


@dataclass(frozen=True)
class Term:
    coefficient: Coefficient
    multi_index: tuple[int, ...]


@dataclass(frozen=True)
class LinearOperatorSpec:
    terms: tuple[Term, ...]
    d_x: int
    steps: tuple[float, ...]
    accuracy: int = 4

    def __post_init__(self):
        if not self.terms:
            raise ValueError("operator needs at least one term")
        D = self.d_x + 1
        if len(self.steps) != D:
            raise ValueError("one FD step per coordinate (t, x_1..x_d)")
        for term in self.terms:
            mi = term.multi_index
            if len(mi) != D:
                raise ValueError(f"multi-index {mi} has wrong length for d_x={self.d_x}")
            if mi[0] > 1 or sum(mi[1:]) > 2 or min(mi) < 0:
                raise ValueError(f"unsupported derivative order {mi}")

    @property
    def dim(self) -> int:
        return self.d_x + 1

    def functional(self, points: np.ndarray, n_phi: int) -> "Functional":
        return Functional.from_operator(self, points, n_phi)


@dataclass
class Functional:
    """Per-point linear functional ``sum_m w[n, m](phi) * g(points[n] + offsets[m])``.

    ``basis[0]`` is the phi-independent part of the weights and
    ``basis[1 + k]`` the slope along phi_k.
    """

    points: np.ndarray
    offsets: np.ndarray
    basis: np.ndarray

    @classmethod
    def identity(cls, points: np.ndarray, n_phi: int) -> "Functional":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        basis = np.zeros((1 + n_phi, len(points), 1))
        basis[0] = 1.0
        return cls(points, np.zeros((1, points.shape[1])), basis)

    @classmethod
    def from_operator(cls, op: LinearOperatorSpec, points, n_phi: int) -> "Functional":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.shape[1] != op.dim:
            raise ValueError(f"points have {points.shape[1]} coordinates, operator expects {op.dim}")
        n = len(points)
        index: dict[tuple, int] = {}
        offsets: list[np.ndarray] = []
        contributions = []
        for term in op.terms:
            cb = coefficient_basis(term.coefficient, points, n_phi)
            st = diff.Stencil.build(term.multi_index, op.steps, op.accuracy)
            for off, w in zip(st.offsets, st.weights):
                key = tuple(np.round(off / np.asarray(op.steps), 6))
                if key not in index:
                    index[key] = len(offsets)
                    offsets.append(off)
                contributions.append((index[key], w * cb))
        basis = np.zeros((1 + n_phi, n, len(offsets)))
        for m, c in contributions:
            basis[:, :, m] += c
        return cls(points, np.array(offsets), basis)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_offsets(self) -> int:
        return len(self.offsets)

    def footprint(self) -> np.ndarray:
        fp = self.points[:, None, :] + self.offsets[None, :, :]
        return fp.reshape(-1, self.points.shape[1])

    def weights(self, phi):
        """(n_points, n_offsets) weights; ``phi`` may be a tape variable."""
        if self.basis.shape[0] == 1:
            return self.basis[0]
        return diff.add(self.basis[0], diff.einsum("k,knm->nm", phi, self.basis[1:]))

    def apply(self, values, phi):
        """Contract footprint values (flattened, n_points * n_offsets) to one value per point."""
        W = self.weights(phi)
        vals = diff.reshape(values, (self.n_points, self.n_offsets))
        return diff.sum_(diff.mul(W, vals), axis=1)


def coefficient_basis(coef: Coefficient, points: np.ndarray, n_phi: int) -> np.ndarray:
    """Evaluate an affine-in-phi coefficient as [c(.,0), c(.,e_1)-c(.,0), ...]."""
    zero = np.zeros(n_phi)
    c0 = np.broadcast_to(np.asarray(coef(points, zero), dtype=np.float64), (len(points),))
    out = [c0]
    for k in range(n_phi):
        e = np.zeros(n_phi)
        e[k] = 1.0
        ck = np.broadcast_to(np.asarray(coef(points, e), dtype=np.float64), (len(points),))
        out.append(ck - c0)
    basis = np.array(out)
    # affinity check at a fixed off-axis phi
    probe = np.linspace(0.3, 0.7, n_phi) if n_phi else zero
    direct = np.broadcast_to(np.asarray(coef(points, probe), dtype=np.float64), (len(points),))
    recon = basis[0] + probe @ basis[1:] if n_phi else basis[0]
    scale = 1.0 + np.max(np.abs(direct))
    if np.max(np.abs(direct - recon)) > 1e-9 * scale:
        raise ValueError("operator coefficients must be affine in phi")
    return basis


def apply_operator(op: LinearOperatorSpec, field: Callable, s, phi, vectorized: bool = False):
    """Stencil estimate of op[field] at one point (returns float) or a batch (returns array).

    ``field`` maps a point to a scalar; with ``vectorized=True`` it maps an
    (n, D) array to n values instead.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    F = Functional.from_operator(op, np.atleast_2d(s), len(phi))
    fp = F.footprint()
    if vectorized:
        vals = np.asarray(field(fp), dtype=np.float64)
    else:
        vals = np.array([field(p) for p in fp], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise diff.NonFiniteError("field evaluation")
    out = F.apply(vals, phi)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# problem library
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    name: str
    operator: LinearOperatorSpec
    source: Callable[[np.ndarray, np.ndarray], np.ndarray]
    solution: Callable[[np.ndarray], np.ndarray]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    phi_true: tuple[float, ...]
    prior_bounds: tuple[tuple[float, float], ...]
    latent_dim: int
    exclude_origin: bool = False
    param_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        for v, (lo, hi) in zip(self.phi_true, self.prior_bounds):
            if not lo < v < hi:
                raise ValueError(f"true parameter {v} outside prior support ({lo}, {hi})")

    @property
    def d_x(self) -> int:
        return self.operator.d_x

    @property
    def n_phi(self) -> int:
        return len(self.phi_true)

    def forcing(self, points) -> np.ndarray:
        """The known source term, i.e. the source evaluated at the true parameters."""
        return self.source(np.atleast_2d(points), np.asarray(self.phi_true))

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform points in the open box, t in (0, T], away from the origin ball if needed."""
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        out = np.empty((0, len(lo)))
        while len(out) < n:
            u = rng.uniform(size=(n - len(out), len(lo)))
            # map [0,1) to (0,1]: never lands on the lower face (t = 0)
            pts = lo + (hi - lo) * (1.0 - u)
            pts = np.minimum(pts, hi)
            interior = np.all(pts[:, 1:] < hi[1:], axis=1) & np.all(pts > lo, axis=1)
            if self.exclude_origin:
                interior &= np.linalg.norm(pts[:, 1:], axis=1) > ORIGIN_EXCLUSION
            out = np.vstack([out, pts[interior]])
        return out


def _steps(lower, upper) -> tuple[float, ...]:
    return tuple(KERNEL_STEP_FRACTION * (h - l) for l, h in zip(lower, upper))


def _const(value: float) -> Coefficient:
    return lambda P, phi: np.full(len(P), value)


def _heat1d(overrides: dict) -> ProblemSpec:
    alpha_true = float(overrides.get("phi_true", [1.0])[0])
    lower, upper = (0.0, 0.0), (1.0, 1.0)
    terms = (
        Term(_const(1.0), (1, 0)),
        Term(lambda P, phi: np.full(len(P), -phi[0]), (0, 2)),
    )
    op = LinearOperatorSpec(terms, 1, _steps(lower, upper))

    def solution(P):
        P = np.atleast_2d(P)
        return np.exp(-P[:, 0]) * np.sin(np.pi * P[:, 1])

    def source(P, phi):
        P = np.atleast_2d(P)
        return np.exp(-P[:, 0]) * np.sin(np.pi * P[:, 1]) * (phi[0] * np.pi**2 - 1.0)

    return ProblemSpec("heat1d", op, source, solution, lower, upper, (alpha_true,),
                       ((0.0, 2.0),), latent_dim=2, param_names=("alpha",))


def _heat_nd(overrides: dict) -> ProblemSpec:
    d = int(overrides.get("dim", 50))
    alpha_true = tuple(float(v) for v in overrides.get("phi_true", (0.3, 0.1, 0.05)))
    lower, upper = (0.0,) * (d + 1), (1.0,) * (d + 1)
    root = np.sqrt(d)
    ks = np.arange(1, 4)

    def radius(P):
        return np.linalg.norm(P[:, 1:], axis=1)

    def diffusivity(P, phi):
        r = radius(P)
        return 1.0 + np.sin(np.outer(r, ks) * np.pi / root) @ np.asarray(phi)

    def radial_slope(P, phi):
        # d kappa / d r
        r = radius(P)
        return np.cos(np.outer(r, ks) * np.pi / root) @ (np.asarray(phi) * ks * np.pi / root)

    def grad_component(i):
        def coef(P, phi):
            r = radius(P)
            safe = np.where(r > 0, r, 1.0)
            return -np.where(r > 0, radial_slope(P, phi) * P[:, 1 + i] / safe, 0.0)
        return coef

    terms = [Term(_const(1.0), (1,) + (0,) * d)]
    for i in range(d):
        mi2 = [0] * (d + 1)
        mi2[1 + i] = 2
        terms.append(Term(lambda P, phi: -diffusivity(P, phi), tuple(mi2)))
        mi1 = [0] * (d + 1)
        mi1[1 + i] = 1
        terms.append(Term(grad_component(i), tuple(mi1)))
    op = LinearOperatorSpec(tuple(terms), d, _steps(lower, upper))

    def solution(P):
        P = np.atleast_2d(P)
        return np.exp(-P[:, 0]) * np.cos(P[:, 1:].sum(axis=1) / d)

    def source(P, phi):
        P = np.atleast_2d(P)
        s = P[:, 1:].sum(axis=1)
        r = radius(P)
        safe = np.where(r > 0, r, 1.0)
        kap = diffusivity(P, phi)
        ratio = np.where(r > 0, s / safe, 0.0)
        return np.exp(-P[:, 0]) * ((kap / d - 1.0) * np.cos(s / d)
                                   + radial_slope(P, phi) / d * ratio * np.sin(s / d))

    name = "heat50d" if d == 50 else f"heat50d[d={d}]"
    return ProblemSpec(name, op, source, solution, lower, upper, alpha_true,
                       HEAT_ND_PRIOR, latent_dim=4, exclude_origin=True,
                       param_names=("alpha1", "alpha2", "alpha3"))


def diffusivity_field(problem: ProblemSpec, x, phi=None) -> np.ndarray:
    """kappa(x; alpha) of the high-dimensional heat problem."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    phi = np.asarray(problem.phi_true if phi is None else phi)
    d = x.shape[1]
    r = np.linalg.norm(x, axis=1)
    ks = np.arange(1, 4)
    return 1.0 + np.sin(np.outer(r, ks) * np.pi / np.sqrt(d)) @ phi


def _adr_nd(overrides: dict) -> ProblemSpec:
    d = int(overrides.get("dim", 50))
    phi_true = tuple(float(v) for v in overrides.get("phi_true", (0.8, 0.5, 0.2)))
    lower = (0.0,) + (-2.0,) * d
    upper = (1.0,) + (2.0,) * d
    terms = [Term(_const(1.0), (1,) + (0,) * d),
             Term(lambda P, phi: np.full(len(P), phi[2]), (0,) * (d + 1))]
    for i in range(d):
        mi2 = [0] * (d + 1)
        mi2[1 + i] = 2
        terms.append(Term(lambda P, phi: np.full(len(P), -phi[0]), tuple(mi2)))
        mi1 = [0] * (d + 1)
        mi1[1 + i] = 1
        terms.append(Term(lambda P, phi: np.full(len(P), phi[1]), tuple(mi1)))
    op = LinearOperatorSpec(tuple(terms), d, _steps(lower, upper))

    def solution(P):
        P = np.atleast_2d(P)
        return np.exp(-P[:, 0]) * np.cos(P[:, 1:].sum(axis=1) / d)

    def source(P, phi):
        P = np.atleast_2d(P)
        s = P[:, 1:].sum(axis=1) / d
        a, b, g = phi
        return np.exp(-P[:, 0]) * ((g + a / d - 1.0) * np.cos(s) - b * np.sin(s))

    name = "adr50d" if d == 50 else f"adr50d[d={d}]"
    return ProblemSpec(name, op, source, solution, lower, upper, phi_true,
                       ((0.0, 2.0), (0.0, 1.0), (0.0, 1.0)), latent_dim=4,
                       param_names=("alpha", "beta", "gamma"))


PROBLEMS = {"heat1d": _heat1d, "heat50d": _heat_nd, "adr50d": _adr_nd}


def make_problem(name: str, overrides: dict | None = None) -> ProblemSpec:
    """Build one of the shipped manufactured problems.

    ``overrides`` may carry ``dim`` (spatial dimension for the 50D families)
    and ``phi_true``.
    """
    if name not in PROBLEMS:
        raise KeyError(f"unknown problem '{name}' (expected one of {sorted(PROBLEMS)})")
    overrides = dict(overrides or {})
    if name == "heat1d" and overrides.get("dim", 1) != 1:
        raise ValueError("heat1d has a fixed spatial dimension of 1")
    return PROBLEMS[name](overrides)


def generate_observations(problem: ProblemSpec, n_u: int, n_f: int, seed: int,
                          tau_u2: float = 1e-6, tau_f2: float = 1e-6):
    """Exact state and source observations at uniform random space-time points."""
    from .gp import ObservationSet

    if n_u < 1:
        raise ValueError("N_u must be >= 1")
    rng = np.random.default_rng(seed)
    S_u = problem.sample_points(n_u, rng)
    S_f = problem.sample_points(n_f, rng) if n_f > 0 else np.empty((0, problem.operator.dim))
    u = problem.solution(S_u)
    f = problem.forcing(S_f) if n_f > 0 else np.empty(0)
    return ObservationSet(S_u, u, S_f, f, tau_u2, tau_f2)


def sample_collocation(problem: ProblemSpec, n_col: int, seed: int) -> np.ndarray:
    if n_col < 1:
        raise ValueError("N_col must be >= 1")
    return problem.sample_points(n_col, np.random.default_rng(seed))


__all__ = [
    "Term", "LinearOperatorSpec", "Functional", "ProblemSpec", "apply_operator",
    "make_problem", "generate_observations", "sample_collocation", "diffusivity_field",
]
