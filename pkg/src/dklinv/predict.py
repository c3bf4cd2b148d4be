"""Posterior summaries of phi and Bayesian-model-averaged prediction of the state field."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gp import CholeskyError, FixedFeatureGP, ObservationSet
from .hmc import SampleChain
from .pde import LinearOperatorSpec

DEFAULT_THINNING = 10


@dataclass
class MarginalSummary:
    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray  # 2.5% quantile
    upper: np.ndarray  # 97.5% quantile
    cov: np.ndarray

    def to_dict(self) -> dict:
        return {
            n: {"mean": float(self.mean[i]), "sd": float(self.sd[i]),
                "ci95": [float(self.lower[i]), float(self.upper[i])]}
            for i, n in enumerate(self.names)
        } | {"covariance": self.cov.tolist()}

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return (self.lower <= values) & (values <= self.upper)


def marginal_stats(draws, indices=None, names=None) -> MarginalSummary:
    """Mean, sd, central 95% interval and covariance of the selected columns.

    Quantiles interpolate linearly between order statistics.
    """
    if isinstance(draws, SampleChain):
        names = names or draws.names
        indices = range(draws.n_phi) if indices is None else indices
        draws = draws.draws
    X = np.asarray(draws, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    indices = list(range(X.shape[1]) if indices is None else indices)
    if X.shape[0] < 2:
        raise ValueError("need at least two draws")
    X = X[:, indices]
    names = tuple(names[i] for i in indices) if names else tuple(f"phi{i + 1}" for i in indices)
    q = np.quantile(X, [0.025, 0.975], axis=0, method="linear")
    cov = np.atleast_2d(np.cov(X, rowvar=False))
    return MarginalSummary(names, X.mean(axis=0), X.std(axis=0, ddof=1), q[0], q[1],
                           0.5 * (cov + cov.T))


@dataclass
class PredictiveField:
    points: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    within: np.ndarray  # average conditional covariance
    between: np.ndarray  # covariance of conditional means
    n_draws: int
    skipped: list[int] = field(default_factory=list)

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    def to_csv(self, path, names=None) -> None:
        dim = self.points.shape[1]
        names = list(names or ["t"] + [f"x{i + 1}" for i in range(dim - 1)])
        data = np.column_stack([self.points, self.mean, self.variance])
        np.savetxt(path, data, delimiter=",", header=",".join(names + ["mean", "variance"]),
                   comments="", fmt="%.17g")


def bma_predict(chain: SampleChain, obs: ObservationSet, theta_fix, op: LinearOperatorSpec,
                test, thinning: int = DEFAULT_THINNING) -> PredictiveField:
    """Average the joint-conditional GP predictions over thinned posterior draws.

    Draws whose covariance cannot be factorised are skipped and listed in
    ``skipped``; the mixture covariance is the average conditional
    covariance plus the covariance of the conditional means.
    """
    if thinning < 1:
        raise ValueError("thinning stride must be >= 1")
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    rows = np.arange(0, len(chain.draws), thinning)
    if len(rows) == 0:
        raise ValueError("no draws retained after thinning")
    model = FixedFeatureGP(obs, theta_fix, op, chain.n_phi)
    phis, psis = chain.phi, chain.psi
    means, covs, skipped = [], [], []
    for j in rows:
        try:
            m, C = model.predict(test, psis[j], phis[j], full_cov=True)
        except (CholeskyError, np.linalg.LinAlgError):
            skipped.append(int(j))
            continue
        means.append(m)
        covs.append(C)
    if not means:
        raise RuntimeError("every retained draw failed to factorise")
    M = np.array(means)
    mean = M.mean(axis=0)
    within = np.mean(covs, axis=0)
    R = M - mean
    between = R.T @ R / len(M)
    cov = within + between
    return PredictiveField(test, mean, 0.5 * (cov + cov.T), within, between, len(M), skipped)


def grid(lower, upper, n: int = 21, fixed=None) -> np.ndarray:
    """Regular (t, x1) grid; remaining spatial coordinates held at ``fixed``."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    t = np.linspace(lower[0], upper[0], n)
    x = np.linspace(lower[1], upper[1], n)
    T, X = np.meshgrid(t, x, indexing="ij")
    pts = np.zeros((n * n, len(lower)))
    if fixed is not None:
        pts[:, 2:] = np.asarray(fixed, dtype=np.float64)
    pts[:, 0] = T.ravel()
    pts[:, 1] = X.ravel()
    return pts


def save_summary(summary: MarginalSummary, path, extra: dict | None = None) -> None:
    d = summary.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)


__all__ = ["MarginalSummary", "marginal_stats", "PredictiveField", "bma_predict", "grid",
           "save_summary", "DEFAULT_THINNING"]
