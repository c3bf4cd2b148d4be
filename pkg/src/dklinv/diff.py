"""Reverse-mode differentiation over numpy arrays, plus finite-difference stencils.

The tape records array-valued operations (not scalars), so a whole kernel
matrix or network layer is one node. Functions in this module accept either
plain ndarrays or :class:`Var` objects; plain arrays take the fast numpy path
and nothing is recorded.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla


class NonFiniteError(FloatingPointError):
    """Raised when a recorded operation produces NaN or inf."""

    def __init__(self, kind: str):
        super().__init__(f"non-finite value produced by operation '{kind}'")
        self.kind = kind


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple] | None


@dataclass
class Tape:
    """Ordered record of operations; parents always precede children."""

    nodes: list[Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    def leaf(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        return self._push("leaf", value, (), None)

    def record(self, kind, value, parents: Sequence["Var"], vjp) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(kind)
        return self._push(kind, value, tuple(p.index for p in parents), vjp)

    def _push(self, kind, value, parents, vjp) -> "Var":
        self.nodes.append(Node(kind, parents, vjp))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, root: "Var") -> list:
        """One reverse sweep from a scalar root; returns adjoints indexed by node."""
        if root.value.size != 1:
            raise ValueError("backward needs a scalar root")
        adj: list = [None] * len(self.nodes)
        adj[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None:
                    continue
                if not np.all(np.isfinite(gp)):
                    raise NonFiniteError(node.kind + " (backward)")
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return adj


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


class Var:
    __array_priority__ = 100

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(o))

    def __rsub__(self, o):
        return add(o, neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Var):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / np.asarray(o, dtype=np.float64))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None):
        return sum_(self, axis)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b):
    t = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = va + vb
    if t is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    parents = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        res = []
        if isinstance(a, Var):
            res.append(_unbroadcast(g, sa))
        if isinstance(b, Var):
            res.append(_unbroadcast(g, sb))
        return res

    return t.record("add", out, parents, vjp)


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a)
    return a.tape.record("neg", -a.value, (a,), lambda g: (-g,))


def mul(a, b):
    t = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = va * vb
    if t is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    parents = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        res = []
        if isinstance(a, Var):
            res.append(_unbroadcast(g * vb, sa))
        if isinstance(b, Var):
            res.append(_unbroadcast(g * va, sb))
        return res

    return t.record("mul", out, parents, vjp)


def reciprocal(a):
    if not isinstance(a, Var):
        return 1.0 / np.asarray(a)
    v = 1.0 / a.value
    return a.tape.record("reciprocal", v, (a,), lambda g: (-g * v * v,))


def power(a, k: float):
    if not isinstance(a, Var):
        return np.asarray(a) ** k
    x = a.value
    return a.tape.record("power", x**k, (a,), lambda g: (g * k * x ** (k - 1),))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    v = np.exp(a.value)
    return a.tape.record("exp", v, (a,), lambda g: (g * v,))


def log(a):
    if not isinstance(a, Var):
        return np.log(a)
    x = a.value
    return a.tape.record("log", np.log(x), (a,), lambda g: (g / x,))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    v = np.tanh(a.value)
    return a.tape.record("tanh", v, (a,), lambda g: (g * (1.0 - v * v),))


def sigmoid(a):
    if not isinstance(a, Var):
        return 1.0 / (1.0 + np.exp(-np.asarray(a)))
    v = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape.record("sigmoid", v, (a,), lambda g: (g * v * (1.0 - v),))


def square(a):
    return mul(a, a)


def sum_(a, axis=None):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis)
    shape = a.value.shape
    out = np.sum(a.value, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record("sum", out, (a,), vjp)


def mean(a, axis=None):
    n = np.size(_val(a)) if axis is None else np.shape(_val(a))[axis]
    return sum_(a, axis) * (1.0 / n)


def matmul(a, b):
    t = _tape_of(a, b)
    va, vb = _val(a), _val(b)
    out = va @ vb
    if t is None:
        return out
    parents = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        res = []
        if isinstance(a, Var):
            if va.ndim == 2:
                res.append(np.outer(g, vb) if vb.ndim == 1 else g @ vb.T)
            else:
                res.append(g * vb if vb.ndim == 1 else vb @ g)
        if isinstance(b, Var):
            if vb.ndim == 2:
                res.append(np.outer(va, g) if va.ndim == 1 else va.T @ g)
            else:
                res.append(g * va if va.ndim == 1 else va.T @ g)
        return res

    return t.record("matmul", out, parents, vjp)


def transpose(a):
    if not isinstance(a, Var):
        return np.transpose(a)
    return a.tape.record("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return a.tape.record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, idx):
    if not isinstance(a, Var):
        return np.asarray(a)[idx]
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record("getitem", a.value[idx], (a,), vjp)


def concatenate(xs: Sequence, axis=0):
    t = _tape_of(*xs)
    vals = [np.asarray(_val(x), dtype=np.float64) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if t is None:
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    is_var = [isinstance(x, Var) for x in xs]

    def vjp(g):
        parts = np.split(g, sizes, axis=axis)
        return [p for p, keep in zip(parts, is_var) if keep]

    return t.record("concatenate", out, [x for x in xs if isinstance(x, Var)], vjp)


def block(rows: Sequence[Sequence]):
    return concatenate([concatenate(r, axis=1) for r in rows], axis=0)


def diag(a):
    """Main diagonal of a square matrix."""
    if not isinstance(a, Var):
        return np.diag(a).copy()
    n = a.value.shape[0]
    return a.tape.record("diag", np.diag(a.value).copy(), (a,), lambda g: (np.diag(g) * np.eye(n),))


def einsum(subscripts: str, *operands):
    """Einsum over at most a handful of operands, without diagonal/trace subscripts."""
    t = _tape_of(*operands)
    vals = [_val(x) for x in operands]
    out = np.einsum(subscripts, *vals, optimize=True)
    if t is None:
        return out
    ins, outsub = subscripts.replace(" ", "").split("->")
    subs = ins.split(",")
    for s in subs:
        if len(set(s)) != len(s):
            raise ValueError("repeated index within an operand is not differentiable here")

    def vjp(g):
        res = []
        for i, x in enumerate(operands):
            if not isinstance(x, Var):
                continue
            others = [subs[j] for j in range(len(subs)) if j != i]
            other_vals = [vals[j] for j in range(len(subs)) if j != i]
            avail = set(outsub).union(*others) if others else set(outsub)
            missing = [c for c in subs[i] if c not in avail]
            target = "".join(c for c in subs[i] if c in avail)
            spec = ",".join([outsub] + others) + "->" + target
            gi = np.einsum(spec, g, *other_vals, optimize=True)
            if missing:
                # index summed away inside this operand only: broadcast back
                exp_shape = [vals[i].shape[k] if c in avail else 1 for k, c in enumerate(subs[i])]
                order = [c for c in subs[i] if c in avail]
                gi = np.einsum(target + "->" + "".join(order), gi).reshape(exp_shape)
                gi = np.broadcast_to(gi, vals[i].shape).copy()
            res.append(gi)
        return res

    return t.record("einsum", out, [x for x in operands if isinstance(x, Var)], vjp)


def cholesky_pullback(L: np.ndarray, Lbar: np.ndarray) -> np.ndarray:
    """Symmetric gradient w.r.t. A = L Lᵀ given the gradient w.r.t. the factor L."""
    d = np.diag(L)
    if np.any(~(d > 0)):
        raise ValueError("Cholesky factor must have a strictly positive diagonal")
    P = np.tril(L.T @ np.tril(Lbar))
    P[np.diag_indices_from(P)] *= 0.5
    # S = L^{-T} P L^{-1}
    S = sla.solve_triangular(L, P, trans="T", lower=True)
    S = sla.solve_triangular(L, S.T, trans="T", lower=True).T
    return 0.5 * (S + S.T)


def cholesky(a):
    """Lower Cholesky factor; raises numpy.linalg.LinAlgError when not PD."""
    va = _val(a)
    L = np.linalg.cholesky(va)
    if not isinstance(a, Var):
        return L
    return a.tape.record("cholesky", L, (a,), lambda g: (cholesky_pullback(L, g),))


def solve_triangular(L, B, trans: bool = False):
    """Solve L X = B (or Lᵀ X = B when ``trans``) for lower-triangular L."""
    t = _tape_of(L, B)
    vL, vB = _val(L), _val(B)
    X = sla.solve_triangular(vL, vB, lower=True, trans="T" if trans else "N")
    if t is None:
        return X
    parents = [x for x in (L, B) if isinstance(x, Var)]

    def vjp(g):
        Bbar = sla.solve_triangular(vL, g, lower=True, trans="N" if trans else "T")
        res = []
        if isinstance(L, Var):
            B2 = Bbar if Bbar.ndim == 2 else Bbar[:, None]
            X2 = X if X.ndim == 2 else X[:, None]
            Lbar = -(X2 @ B2.T) if trans else -(B2 @ X2.T)
            res.append(np.tril(Lbar))
        if isinstance(B, Var):
            res.append(Bbar)
        return res

    return t.record("solve_triangular", X, parents, vjp)


def tape_gradient(fn: Callable, x) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``fn`` at parameter vector ``x``, one reverse sweep."""
    tape = Tape()
    leaf = tape.leaf(np.array(x, dtype=np.float64))
    out = fn(leaf)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(leaf.value)
    if not np.isfinite(out.value).all():
        raise NonFiniteError(tape.nodes[out.index].kind)
    adj = tape.backward(out)
    g = adj[leaf.index]
    return float(out.value), (np.zeros_like(leaf.value) if g is None else g)


def fd_gradient(fn: Callable, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# finite-difference stencils over coordinates
# ---------------------------------------------------------------------------

# 1D central tableaux: accuracy -> order -> (offsets in units of h, weights × h^order)
_TABLEAU = {
    2: {
        0: ((0,), (1.0,)),
        1: ((-1, 1), (-0.5, 0.5)),
        2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    },
    4: {
        0: ((0,), (1.0,)),
        1: ((-2, -1, 1, 2), (1 / 12, -8 / 12, 8 / 12, -1 / 12)),
        2: ((-2, -1, 0, 1, 2), (-1 / 12, 16 / 12, -30 / 12, 16 / 12, -1 / 12)),
    },
}


@dataclass(frozen=True)
class Stencil:
    orders: tuple[int, ...]
    steps: tuple[float, ...]
    offsets: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, orders: Sequence[int], steps: Sequence[float] | float, accuracy: int = 2) -> "Stencil":
        orders = tuple(int(k) for k in orders)
        if np.isscalar(steps):
            steps = (float(steps),) * len(orders)
        steps = tuple(float(h) for h in steps)
        if len(steps) != len(orders):
            raise ValueError("one step per coordinate")
        if any(k < 0 for k in orders) or any(h <= 0 for h in steps):
            raise ValueError("orders must be >= 0 and steps > 0")
        if accuracy not in _TABLEAU:
            raise ValueError(f"unsupported accuracy {accuracy}")
        per_axis = []
        for k, h in zip(orders, steps):
            if k not in _TABLEAU[accuracy]:
                raise ValueError(f"unsupported derivative order {k}")
            offs, ws = _TABLEAU[accuracy][k]
            per_axis.append([(o * h, w / h**k) for o, w in zip(offs, ws)])
        offsets, weights = [], []
        for combo in itertools.product(*per_axis):
            offsets.append([c[0] for c in combo])
            weights.append(np.prod([c[1] for c in combo]))
        return cls(orders, steps, np.array(offsets), np.array(weights))


def fd_derivative(field: Callable, point, stencil: Stencil) -> float:
    """Apply ``stencil`` to a scalar field at ``point``."""
    point = np.asarray(point, dtype=np.float64)
    total = 0.0
    for off, w in zip(stencil.offsets, stencil.weights):
        v = field(point + off)
        if not np.isfinite(v):
            raise NonFiniteError("field evaluation")
        total += w * v
    return float(total)
