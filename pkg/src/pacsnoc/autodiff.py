"""Tape-based reverse-mode differentiation on numpy arrays.

A ``Tape`` records every elementary operation applied to its variables as an
append-only list of nodes (operation kind, parent ids, local partials encoded
as vector-Jacobian closures).  One reverse sweep over the tape yields the
gradient of a scalar output with respect to every leaf, in O(tape length).

All op functions below dispatch on their arguments: if any operand is a
``Var`` the result is recorded on that variable's tape, otherwise plain numpy
is used.  Library code can therefore be written once and evaluated either
numerically or differentiably.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self) -> None:
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple[Callable[[Array], Array], ...]] = []
        self._values: list[Array] = []
        self._leaf_ids: list[int] = []

    def __len__(self) -> int:
        return len(self._ops)

    def leaf(self, value) -> "Var":
        """Register an independent variable (gradient target)."""
        var = self._record("leaf", value, (), ())
        self._leaf_ids.append(var.node_id)
        return var

    def _record(self, op: str, value, parents, vjps) -> "Var":
        if not isinstance(value, np.ndarray) or value.dtype != np.float64:
            value = np.asarray(value, dtype=float)
        self._ops.append(op)
        self._parents.append(tuple(parents))
        self._vjps.append(tuple(vjps))
        self._values.append(value)
        return Var(self, len(self._ops) - 1, value)

    def backward(self, output: "Var") -> dict[int, Array]:
        """Adjoints of a scalar output w.r.t. every leaf, keyed by node id."""
        out_val = self._values[output.node_id]
        if out_val.ndim != 0:
            raise ValueError("backward requires a scalar output")
        adjoint: list[Array | None] = [None] * len(self._ops)
        adjoint[output.node_id] = np.ones(())
        for nid in range(output.node_id, -1, -1):
            g = adjoint[nid]
            if g is None:
                continue
            for pid, vjp in zip(self._parents[nid], self._vjps[nid]):
                contrib = vjp(g)
                if adjoint[pid] is None:
                    adjoint[pid] = np.array(contrib, dtype=float)
                else:
                    adjoint[pid] = adjoint[pid] + contrib
        result = {}
        for lid in self._leaf_ids:
            g = adjoint[lid]
            result[lid] = np.zeros_like(self._values[lid]) if g is None else g
        return result

    def grad(self, output: "Var", wrt: Sequence["Var"]) -> list[Array]:
        """Gradient of scalar ``output`` with respect to the given leaves."""
        table = self.backward(output)
        return [table[v.node_id] for v in wrt]


class Var:
    """A value recorded on a tape. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "node_id", "value")
    __array_ufunc__ = None  # keep numpy from consuming Var operands

    def __init__(self, tape: Tape, node_id: int, value: Array) -> None:
        self.tape = tape
        self.node_id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.node_id}, value={self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p == 2:
            return pow2(self)
        raise NotImplementedError("only squaring is supported on tape")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


def value_of(x) -> Array:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _find_tape(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(grad: Array, shape) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op, a, b, fwd, vjp_a, vjp_b):
    tape = _find_tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.node_id)
        vjps.append(lambda g, av=av, bv=bv: _unbroadcast(vjp_a(g, av, bv), av.shape))
    if isinstance(b, Var):
        parents.append(b.node_id)
        vjps.append(lambda g, av=av, bv=bv: _unbroadcast(vjp_b(g, av, bv), bv.shape))
    return tape._record(op, out, parents, vjps)


def _unary(op, a, fwd, vjp):
    if not isinstance(a, Var):
        return fwd(np.asarray(a, dtype=float))
    av = a.value
    out = fwd(av)
    return a.tape._record(
        op, out, (a.node_id,), (lambda g, av=av, out=out: vjp(g, av, out),)
    )


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    def vjp_b(g, x, y):
        return -g * x / (y * y)

    bv = value_of(b)
    if np.any(bv == 0.0):
        raise ZeroDivisionError("division by zero on tape")
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, vjp_b)


def neg(a):
    return _unary("neg", a, lambda x: -x, lambda g, x, out: -g)


def pow2(a):
    return _unary("pow2", a, lambda x: x * x, lambda g, x, out: 2.0 * g * x)


def sqrt(a):
    av = value_of(a)
    if np.any(av < 0.0):
        raise ValueError("sqrt of negative operand")
    return _unary("sqrt", a, np.sqrt, lambda g, x, out: 0.5 * g / out)


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x, out: g * out)


def log(a):
    av = value_of(a)
    if np.any(av <= 0.0):
        raise ValueError("log of non-positive operand")
    return _unary("log", a, np.log, lambda g, x, out: g / x)


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda g, x, out: g * (1.0 - out * out))


def abs_smooth(a, eps: float = 1.0e-12):
    """sqrt(x^2 + eps^2): smooth |x| with derivative x/sqrt(x^2+eps^2)."""
    def fwd(x):
        return np.sqrt(x * x + eps * eps)

    return _unary("abs_smooth", a, fwd, lambda g, x, out: g * x / out)


def sum_(a, axis=None):
    if not isinstance(a, Var):
        return np.sum(np.asarray(a, dtype=float), axis=axis)
    av = a.value

    def vjp(g, x=av):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy()

    out = np.sum(av, axis=axis)
    return a.tape._record("sum", out, (a.node_id,), (lambda g: vjp(g),))


def mean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return div(sum_(a, axis=axis), float(n))


def dot(a, b):
    """Inner product of two vectors."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 1 or bv.ndim != 1:
        raise ValueError("dot expects two vectors; use matmul for matrices")
    return _binary("dot", a, b, np.dot,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b):
    """Matrix product covering the (m,n)@(n,), (s,n)@(n,m), (m,n)@(n,k) cases."""
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def vjp_a(g, x, y):
        if y.ndim == 1:
            return np.outer(g, y) if x.ndim == 2 else g * y
        if x.ndim == 1:
            return g @ y.T
        return g @ y.T

    def vjp_b(g, x, y):
        if x.ndim == 1:
            return np.outer(x, g) if y.ndim == 2 else g * x
        if y.ndim == 1:
            return x.T @ g
        return x.T @ g

    tape = _find_tape(a, b)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.node_id)
        vjps.append(lambda g, x=av, y=bv: vjp_a(g, x, y).reshape(x.shape))
    if isinstance(b, Var):
        parents.append(b.node_id)
        vjps.append(lambda g, x=av, y=bv: vjp_b(g, x, y).reshape(y.shape))
    return tape._record("matmul", out, parents, vjps)


def where(cond, a, b):
    """Select by a constant boolean mask; adjoints follow the active branch."""
    mask = np.asarray(value_of(cond), dtype=bool)
    return _binary("where", a, b,
                   lambda x, y: np.where(mask, x, y),
                   lambda g, x, y: np.where(mask, g, 0.0),
                   lambda g, x, y: np.where(mask, 0.0, g))


def maximum(a, b):
    av, bv = value_of(a), value_of(b)
    mask = av >= bv
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y: np.where(mask, g, 0.0),
                   lambda g, x, y: np.where(mask, 0.0, g))


def concat(parts, axis=-1):
    tape = _find_tape(*parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    parents, vjps = [], []
    offset = 0
    ax = axis if axis >= 0 else out.ndim + axis
    for p, v in zip(parts, vals):
        width = v.shape[ax]
        if isinstance(p, Var):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(offset, offset + width)
            parents.append(p.node_id)
            vjps.append(lambda g, sl=tuple(sl): g[sl])
        offset += width
    return tape._record("concat", out, parents, vjps)


def take(a, key):
    """Basic slicing/indexing; the adjoint scatters into a zero array."""
    if not isinstance(a, Var):
        return np.asarray(a, dtype=float)[key]
    av = a.value
    out = av[key]

    def vjp(g, key=key, shape=av.shape):
        full = np.zeros(shape)
        full[key] = g
        return full

    return a.tape._record("take", out, (a.node_id,), (vjp,))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.asarray(a, dtype=float).reshape(shape)
    old = a.value.shape
    out = a.value.reshape(shape)
    return a.tape._record(
        "reshape", out, (a.node_id,), (lambda g: g.reshape(old),)
    )


def transpose(a):
    if not isinstance(a, Var):
        return np.asarray(a, dtype=float).T
    out = a.value.T
    return a.tape._record(
        "transpose", out, (a.node_id,), (lambda g: np.asarray(g).T,)
    )


def backward(tape: Tape, output_id: int) -> dict[int, Array]:
    """Spec-shaped entry point: gradients over leaf ids for a scalar node."""
    return tape.backward(Var(tape, output_id, tape._values[output_id]))


def gradient(f: Callable, x0: Array) -> tuple[float, Array]:
    """Value and gradient of ``f`` (built from the ops above) at ``x0``."""
    tape = Tape()
    leaf = tape.leaf(np.asarray(x0, dtype=float))
    out = f(leaf)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(np.asarray(x0, dtype=float))
    (g,) = tape.grad(out, [leaf])
    return float(out.value), g


def finite_difference(f: Callable, x0: Array, h: float = 1.0e-5) -> Array:
    """Central-difference gradient of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(value_of(f(xp.reshape(x0.shape))))
        fm = float(value_of(f(xm.reshape(x0.shape))))
        grad.ravel()[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(f: Callable, point: Array, h: float = 1.0e-5,
               tol: float = 1.0e-4) -> tuple[bool, float]:
    """Compare the tape gradient of ``f`` against central differences.

    Returns (pass, max relative error), comparing per coordinate with the
    error floored by the gradient's own scale.  Fails loudly only through the
    returned flag; kinked points are the caller's concern.
    """
    _, g_ad = gradient(f, point)
    g_fd = finite_difference(f, point, h=h)
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1.0)
    max_rel = float(np.max(np.abs(g_ad - g_fd) / denom)) if g_fd.size else 0.0
    return max_rel < tol, max_rel
