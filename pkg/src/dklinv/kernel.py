"""ARD-RBF base kernel, the deep kernel, and PDE-operator-transformed kernel blocks."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.polynomial.hermite_e import hermeval

from . import diff
from .nn import Architecture, NetworkParams, forward_flat
from .pde import Functional, LinearOperatorSpec


class OperatorTag(str, Enum):
    NONE = "none"
    LEFT = "left"
    RIGHT = "right"
    BOTH = "both"

    @property
    def on_left(self) -> bool:
        return self in (OperatorTag.LEFT, OperatorTag.BOTH)

    @property
    def on_right(self) -> bool:
        return self in (OperatorTag.RIGHT, OperatorTag.BOTH)


@dataclass(frozen=True)
class KernelHyper:
    """Log signal variance and log ARD lengthscales."""

    log_signal_variance: float
    log_lengthscales: tuple[float, ...]

    @classmethod
    def default(cls, p: int) -> "KernelHyper":
        return cls(0.0, (0.0,) * p)

    @classmethod
    def from_vector(cls, psi) -> "KernelHyper":
        psi = np.asarray(psi, dtype=np.float64)
        return cls(float(psi[0]), tuple(float(v) for v in psi[1:]))

    def to_vector(self) -> np.ndarray:
        return np.array([self.log_signal_variance, *self.log_lengthscales])

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_lengthscales))


def _psi(psi):
    if isinstance(psi, KernelHyper):
        return psi.to_vector()
    if isinstance(psi, diff.Var):
        return psi
    return np.asarray(psi, dtype=np.float64)


def base_rbf(z, zp, psi) -> float:
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(zp, dtype=np.float64)
    psi = _psi(psi)
    if z.shape != zp.shape or z.shape[-1] != len(psi) - 1:
        raise ValueError("feature vectors and lengthscales must have equal length")
    r = (z - zp) / np.exp(psi[1:])
    return float(np.exp(psi[0]) * np.exp(-0.5 * np.dot(r, r)))


def features(arch: Architecture | None, theta, points):
    """Latent features; ``arch=None`` is the identity map on raw coordinates."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if arch is None:
        return points
    return forward_flat(arch, theta, points)


def rbf_matrix(Z1, Z2, psi):
    """Kernel matrix between two feature sets; any argument may live on a tape."""
    psi = _psi(psi)
    inv_ell = diff.exp(-psi[1:])
    A = diff.mul(Z1, inv_ell)
    B = diff.mul(Z2, inv_ell)
    n, p = np.shape(diff._val(A))
    m = np.shape(diff._val(B))[0]
    delta = diff.add(diff.reshape(A, (n, 1, p)), -diff.reshape(B, (1, m, p)))
    d2 = diff.sum_(diff.square(delta), axis=2)
    return diff.mul(diff.exp(psi[0]), diff.exp(-0.5 * d2))


def _unpack(params):
    if params is None:
        return None, None
    if isinstance(params, NetworkParams):
        return params.arch, params.flatten()
    return params  # (arch, theta)


def deep_kernel(s, sp, params, psi) -> float:
    """base_rbf(g(s), g(s')) for one pair of points; ``params=None`` means identity map."""
    arch, theta = _unpack(params)
    Z = features(arch, theta, np.vstack([np.asarray(s, float), np.asarray(sp, float)]))
    return float(rbf_matrix(Z[:1], Z[1:], psi)[0, 0])


def functional_gram(Fr: Functional, Fc: Functional, arch, theta, psi, phi, Zr=None, Zc=None):
    """Covariance between two sets of point functionals of the GP."""
    if Zr is None:
        Zr = features(arch, theta, Fr.footprint())
    if Zc is None:
        Zc = features(arch, theta, Fc.footprint())
    K = rbf_matrix(Zr, Zc, psi)
    if Fr.n_offsets == 1 and Fc.n_offsets == 1:
        return diff.mul(diff.mul(K, Fr.weights(phi)), diff.transpose(Fc.weights(phi)))
    K4 = diff.reshape(K, (Fr.n_points, Fr.n_offsets, Fc.n_points, Fc.n_offsets))
    return diff.einsum("nm,nmkl,kl->nk", Fr.weights(phi), K4, Fc.weights(phi))


def gram(row_points, row_op: bool, col_points, col_op: bool, params, psi, phi,
         op: LinearOperatorSpec):
    """Gram matrix with the operator applied to the row and/or column argument."""
    arch, theta = _unpack(params)
    phi_v = phi if isinstance(phi, diff.Var) else np.atleast_1d(np.asarray(phi, dtype=np.float64))
    n_phi = len(phi_v)
    Fr = op.functional(row_points, n_phi) if row_op else Functional.identity(row_points, n_phi)
    Fc = op.functional(col_points, n_phi) if col_op else Functional.identity(col_points, n_phi)
    return functional_gram(Fr, Fc, arch, theta, psi, phi_v)


def operator_kernel(s, sp, params, psi, phi, op: LinearOperatorSpec,
                    tag: OperatorTag | str = OperatorTag.NONE, backend: str = "stencil") -> float:
    """Kernel with the operator applied to the left, right, both or neither argument."""
    tag = OperatorTag(tag)
    if backend == "analytic":
        if params is not None:
            raise ValueError("the analytic backend only supports the identity feature map")
        return analytic_operator_kernel(s, sp, psi, phi, op, tag)
    if backend != "stencil":
        raise ValueError(f"unknown backend '{backend}'")
    K = gram(np.atleast_2d(s), tag.on_left, np.atleast_2d(sp), tag.on_right, params, psi, phi, op)
    value = float(np.asarray(K)[0, 0])
    if not np.isfinite(value):
        raise diff.NonFiniteError("stencil kernel evaluation")
    return value


def _rbf_derivative(r, orders, ell):
    """d^orders/dr^orders of exp(-sum r_i^2 / 2 ell_i^2), factorised per coordinate."""
    out = 1.0
    for ri, k, li in zip(r, orders, ell):
        c = np.zeros(k + 1)
        c[k] = 1.0
        out *= (-1.0 / li) ** k * hermeval(ri / li, c) * np.exp(-0.5 * (ri / li) ** 2)
    return out


def analytic_operator_kernel(s, sp, psi, phi, op: LinearOperatorSpec, tag: OperatorTag) -> float:
    """Closed-form operator-applied RBF on raw coordinates (identity feature map)."""
    psi = _psi(psi)
    s = np.asarray(s, dtype=np.float64)
    sp = np.asarray(sp, dtype=np.float64)
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    ell = np.exp(psi[1:])
    if len(ell) != len(s):
        raise ValueError("identity map needs one lengthscale per coordinate")
    zero = (0,) * len(s)
    left = [(t.coefficient(s[None], phi)[0], t.multi_index) for t in op.terms] if tag.on_left \
        else [(1.0, zero)]
    right = [(t.coefficient(sp[None], phi)[0], t.multi_index) for t in op.terms] if tag.on_right \
        else [(1.0, zero)]
    for _, mi in left + right:
        if sum(mi) > 2:
            raise ValueError("analytic backend supports derivative orders <= 2 per term")
    r = s - sp
    total = 0.0
    for ca, a in left:
        for cb, b in right:
            # d/ds' = -d/dr
            sign = (-1.0) ** sum(b)
            total += ca * cb * sign * _rbf_derivative(r, np.add(a, b), ell)
    return float(np.exp(psi[0]) * total)
