"""Bijections between constrained parameters and the unconstrained space used by optimisers and HMC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class ParamTransform:
    """Per-component maps: ("logit", lo, hi), ("log",) or ("identity",)."""

    tags: tuple[tuple, ...]

    @classmethod
    def for_problem(cls, prior_bounds, n_psi: int) -> "ParamTransform":
        return cls(tuple(("logit", float(lo), float(hi)) for lo, hi in prior_bounds)
                   + (("log",),) * n_psi)

    def __len__(self):
        return len(self.tags)

    def to_constrained(self, eta):
        eta = np.asarray(eta, dtype=np.float64)
        out = np.empty_like(eta)
        for i, tag in enumerate(self.tags):
            if tag[0] == "logit":
                lo, hi = tag[1], tag[2]
                out[i] = lo + (hi - lo) / (1.0 + np.exp(-eta[i]))
            elif tag[0] == "log":
                out[i] = np.exp(eta[i])
            else:
                out[i] = eta[i]
        return out

    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        for i, tag in enumerate(self.tags):
            if tag[0] == "logit":
                lo, hi = tag[1], tag[2]
                q = (x[i] - lo) / (hi - lo)
                if not 0.0 < q < 1.0:
                    raise ValueError(f"component {i} = {x[i]} outside ({lo}, {hi})")
                out[i] = np.log(q) - np.log1p(-q)
            elif tag[0] == "log":
                if not x[i] > 0:
                    raise ValueError(f"component {i} must be positive")
                out[i] = np.log(x[i])
            else:
                out[i] = x[i]
        return out

    def log_jacobian(self, eta) -> float:
        """log |d constrained / d unconstrained|."""
        eta = np.asarray(eta, dtype=np.float64)
        total = 0.0
        for i, tag in enumerate(self.tags):
            if tag[0] == "logit":
                total += np.log(tag[2] - tag[1]) - _softplus(eta[i]) - _softplus(-eta[i])
            elif tag[0] == "log":
                total += eta[i]
        return float(total)


def logit_to_box(eta, bounds):
    """Tape-friendly logit map of a vector onto a box."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return diff.add(lo, diff.mul(hi - lo, diff.sigmoid(eta)))
