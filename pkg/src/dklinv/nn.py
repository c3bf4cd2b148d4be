"""Feature extractor: a tanh MLP mapping (t, x) to a low-dimensional latent space."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diff


@dataclass(frozen=True)
class Architecture:
    """Layer widths from input to latent output, plus the input box mapped to [-1, 1].

    Hidden layers use tanh, the output layer is linear. ``input_lower`` and
    ``input_upper`` define the per-coordinate affine rescaling; leave them as
    None to feed raw coordinates (used by the identity-map oracles).
    """

    widths: tuple[int, ...]
    input_lower: tuple[float, ...] | None = None
    input_upper: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"invalid layer widths {self.widths}")
        if (self.input_lower is None) != (self.input_upper is None):
            raise ValueError("input_lower and input_upper must be given together")
        if self.input_lower is not None and len(self.input_lower) != self.widths[0]:
            raise ValueError("input box dimension must match the input width")

    @classmethod
    def default(cls, input_dim: int, latent_dim: int, hidden=(32, 32), lower=None, upper=None):
        if not hidden:
            raise ValueError("the default architecture needs at least one hidden layer")
        lo = None if lower is None else tuple(float(v) for v in lower)
        hi = None if upper is None else tuple(float(v) for v in upper)
        return cls((input_dim, *hidden, latent_dim), lo, hi)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def latent_dim(self) -> int:
        return self.widths[-1]

    @property
    def shapes(self) -> list[tuple[tuple[int, int], int]]:
        return [((a, b), b) for a, b in zip(self.widths[:-1], self.widths[1:])]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for (a, b), _ in self.shapes)

    def rescale(self, points: np.ndarray) -> np.ndarray:
        if self.input_lower is None:
            return points
        lo = np.asarray(self.input_lower)
        hi = np.asarray(self.input_upper)
        return 2.0 * (points - lo) / (hi - lo) - 1.0

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "input_lower": None if self.input_lower is None else list(self.input_lower),
            "input_upper": None if self.input_upper is None else list(self.input_upper),
            "activation": "tanh",
            "layout": "layer-major; weights (fan_in x fan_out) row-major, then bias",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        lo, hi = d.get("input_lower"), d.get("input_upper")
        return cls(
            tuple(int(w) for w in d["widths"]),
            None if lo is None else tuple(lo),
            None if hi is None else tuple(hi),
        )


@dataclass
class NetworkParams:
    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray] = field(default_factory=list)

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, arch: Architecture, theta) -> "NetworkParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != arch.n_params:
            raise ValueError(f"expected {arch.n_params} parameters, got {theta.size}")
        Ws, bs = [], []
        i = 0
        for (a, b), nb in arch.shapes:
            Ws.append(theta[i:i + a * b].reshape(a, b).copy())
            i += a * b
            bs.append(theta[i:i + nb].copy())
            i += nb
        return cls(arch, Ws, bs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"architecture": self.arch.to_dict(),
                                          "theta": self.flatten().tolist()}))

    @classmethod
    def load(cls, path) -> "NetworkParams":
        d = json.loads(Path(path).read_text())
        arch = Architecture.from_dict(d["architecture"])
        return cls.unflatten(arch, d["theta"])


def init(arch: Architecture, seed: int) -> NetworkParams:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for (a, b), nb in arch.shapes:
        bound = np.sqrt(6.0 / (a + b))
        Ws.append(rng.uniform(-bound, bound, size=(a, b)))
        bs.append(np.zeros(nb))
    return NetworkParams(arch, Ws, bs)


def forward_flat(arch: Architecture, theta, points):
    """Features for a batch of points; ``theta`` may be a tape variable.

    ``points`` has shape (n, input_dim) and is a constant (not differentiated).
    """
    h = arch.rescale(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    if h.shape[1] != arch.input_dim:
        raise ValueError(f"input dimension {h.shape[1]} != {arch.input_dim}")
    i = 0
    n_layers = len(arch.shapes)
    for k, ((a, b), nb) in enumerate(arch.shapes):
        W = diff.reshape(theta[i:i + a * b], (a, b))
        i += a * b
        bias = theta[i:i + nb]
        i += nb
        h = diff.add(diff.matmul(h, W), bias)
        if k < n_layers - 1:
            h = diff.tanh(h)
    return h


def forward(params: NetworkParams, s) -> np.ndarray:
    """Feature vector for one point, or a feature matrix for a batch."""
    s = np.asarray(s, dtype=np.float64)
    out = forward_flat(params.arch, params.flatten(), s)
    return out[0] if s.ndim == 1 else out
