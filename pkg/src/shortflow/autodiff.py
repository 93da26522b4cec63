"""Minimal array-valued automatic differentiation.

A ``Tape`` records an append-only list of primitive operations (each node
stores the op kind, the indices of its input nodes, the primal value and an
optional forward tangent; adjoints are filled in by the backward pass).
Reverse mode differentiates a scalar root with respect to leaf arrays.
Forward mode propagates directional derivatives as *additional tape nodes*,
so quantities assembled from tangents -- notably the divergence of a vector
field -- remain differentiable with respect to other leaves (reverse over
forward).

Everything is float64. Primals may be scalars or numpy arrays of any shape;
a batch of points is just a leading axis. The primitive set is fixed:
add, sub, neg, mul, div, exp, log, tanh, sigmoid, sin, cos, pow (constant
exponent), sum, matmul, concat, getitem, reshape. Anything else is composed
from these.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Dual",
    "NonFiniteError",
    "grad",
    "value_and_grad",
    "jvp",
    "divergence",
    "velocity_and_divergence",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "swish",
    "sin",
    "cos",
    "sqrt",
    "asum",
    "amean",
    "concat",
    "reshape",
]


class NonFiniteError(ArithmeticError):
    """A primal, tangent, or adjoint became NaN/inf during evaluation."""


class Node:
    __slots__ = ("op", "args", "val", "tan", "adj", "aux")

    def __init__(self, op, args, val, aux=None):
        self.op = op
        self.args = args
        self.val = val
        self.tan = None
        self.adj = None
        self.aux = aux


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Append-only computation record; one loss evaluation per tape."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, op, args, val, aux=None) -> "Var":
        self.nodes.append(Node(op, args, val, aux))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> "Var":
        return self._push("leaf", (), _as_array(value))

    def constant(self, value) -> "Var":
        return self._push("const", (), _as_array(value))

    def adjoint(self, v: "Var") -> np.ndarray:
        a = self.nodes[v.idx].adj
        if a is None:
            return np.zeros_like(self.nodes[v.idx].val)
        return a

    def first_nonfinite(self):
        for i, n in enumerate(self.nodes):
            if not np.all(np.isfinite(n.val)):
                return i, n
        return None

    def backward(self, root: "Var") -> None:
        """Populate adjoints of every node feeding the scalar ``root``."""
        nodes = self.nodes
        rnode = nodes[root.idx]
        if rnode.val.size != 1:
            raise ValueError("backward root must be a scalar")
        rnode.adj = np.ones_like(rnode.val)
        for i in range(root.idx, -1, -1):
            node = nodes[i]
            g = node.adj
            if g is None or not node.args:
                continue
            for j, contrib in _vjp(node, g, nodes):
                tgt = nodes[j]
                c = _unbroadcast(contrib, tgt.val.shape)
                if tgt.adj is None:
                    tgt.adj = c.copy() if c is contrib else c
                else:
                    tgt.adj = tgt.adj + c


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _vjp(node, g, nodes):
    """Yield (input-index, adjoint-contribution) pairs for one node."""
    op = node.op
    a = node.args
    if op == "add":
        yield a[0], g
        yield a[1], g
    elif op == "sub":
        yield a[0], g
        yield a[1], -g
    elif op == "neg":
        yield a[0], -g
    elif op == "mul":
        yield a[0], g * nodes[a[1]].val
        yield a[1], g * nodes[a[0]].val
    elif op == "div":
        bv = nodes[a[1]].val
        yield a[0], g / bv
        yield a[1], -g * node.val / bv
    elif op == "exp":
        yield a[0], g * node.val
    elif op == "log":
        yield a[0], g / nodes[a[0]].val
    elif op == "tanh":
        yield a[0], g * (1.0 - node.val * node.val)
    elif op == "sigmoid":
        yield a[0], g * node.val * (1.0 - node.val)
    elif op == "sin":
        yield a[0], g * np.cos(nodes[a[0]].val)
    elif op == "cos":
        yield a[0], -g * np.sin(nodes[a[0]].val)
    elif op == "pow":
        c = node.aux
        base = nodes[a[0]].val
        yield a[0], g * c * base ** (c - 1.0)
    elif op == "sum":
        axis, keepdims, in_shape = node.aux
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        yield a[0], np.broadcast_to(g, in_shape)
    elif op == "matmul":
        av, bv = nodes[a[0]].val, nodes[a[1]].val
        if av.ndim == 1 and bv.ndim == 1:
            yield a[0], g * bv
            yield a[1], g * av
        elif av.ndim == 1:
            yield a[0], g @ bv.T
            yield a[1], np.outer(av, g)
        elif bv.ndim == 1:
            yield a[0], np.outer(g, bv)
            yield a[1], av.T @ g
        else:
            yield a[0], g @ bv.T
            yield a[1], av.T @ g
    elif op == "concat":
        axis, sizes = node.aux
        offset = 0
        for j, sz in zip(a, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + sz)
            yield j, g[tuple(sl)]
            offset += sz
    elif op == "getitem":
        idx = node.aux
        buf = np.zeros_like(nodes[a[0]].val)
        if _is_fancy(idx):
            np.add.at(buf, idx, g)
        else:
            buf[idx] += g
        yield a[0], buf
    elif op == "reshape":
        yield a[0], g.reshape(nodes[a[0]].val.shape)
    else:  # pragma: no cover - unknown op means an implementation bug
        raise NotImplementedError(op)


def _is_fancy(idx):
    if isinstance(idx, (np.ndarray, list)):
        return True
    if isinstance(idx, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in idx)
    return False


class Var:
    """Handle to one tape node; supports numpy-style operators."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # keep numpy from absorbing us in mixed ops

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def val(self):
        return self.tape.nodes[self.idx].val

    @property
    def shape(self):
        return self.val.shape

    def _lift(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.constant(other)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = self._lift(other)
        return self.tape._push("add", (self.idx, o.idx), self.val + o.val)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = self._lift(other)
        return self.tape._push("sub", (self.idx, o.idx), self.val - o.val)

    def __rsub__(self, other):
        o = self._lift(other)
        return self.tape._push("sub", (o.idx, self.idx), o.val - self.val)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = self._lift(other)
        return self.tape._push("mul", (self.idx, o.idx), self.val * o.val)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = self._lift(other)
        return self.tape._push("div", (self.idx, o.idx), self.val / o.val)

    def __rtruediv__(self, other):
        o = self._lift(other)
        return self.tape._push("div", (o.idx, self.idx), o.val / self.val)

    def __neg__(self):
        return self.tape._push("neg", (self.idx,), -self.val)

    def __pow__(self, c):
        c = float(c)
        return self.tape._push("pow", (self.idx,), self.val ** c, aux=c)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = self._lift(other)
        return self.tape._push("matmul", (self.idx, o.idx), self.val @ o.val)

    def __rmatmul__(self, other):
        o = self._lift(other)
        return self.tape._push("matmul", (o.idx, self.idx), o.val @ self.val)

    def __getitem__(self, idx):
        return self.tape._push("getitem", (self.idx,), self.val[idx], aux=idx)

    def sum(self, axis=None, keepdims=False):
        val = self.val.sum(axis=axis, keepdims=keepdims)
        return self.tape._push(
            "sum", (self.idx,), np.asarray(val), aux=(axis, keepdims, self.val.shape)
        )

    def reshape(self, shape):
        return self.tape._push(
            "reshape", (self.idx,), self.val.reshape(shape), aux=shape
        )


class Dual:
    """Forward-mode pair (primal, tangent); both live on one tape.

    ``tan is None`` means a structurally-zero tangent, which lets constant
    branches skip building dead nodes.
    """

    __slots__ = ("p", "t")
    __array_ufunc__ = None

    def __init__(self, primal: Var, tangent: Var | None = None):
        self.p = primal
        self.t = tangent
        if tangent is not None:
            # mirror the tangent onto the primal's node for introspection
            primal.tape.nodes[primal.idx].tan = tangent.val

    @property
    def val(self):
        return self.p.val

    @property
    def shape(self):
        return self.p.val.shape

    def _lift(self, other) -> "Dual":
        if isinstance(other, Dual):
            return other
        if isinstance(other, Var):
            return Dual(other, None)
        return Dual(self.p.tape.constant(other), None)

    def __add__(self, other):
        o = self._lift(other)
        t = _tan_add(self.t, o.t)
        return Dual(self.p + o.p, t)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        t = _tan_sub(self.t, o.t)
        return Dual(self.p - o.p, t)

    def __rsub__(self, other):
        o = self._lift(other)
        return o.__sub__(self)

    def __mul__(self, other):
        o = self._lift(other)
        t = None
        if self.t is not None:
            t = self.t * o.p
        if o.t is not None:
            t2 = self.p * o.t
            t = t2 if t is None else t + t2
        return Dual(self.p * o.p, t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        p = self.p / o.p
        t = None
        if self.t is not None:
            t = self.t / o.p
        if o.t is not None:
            t2 = p * o.t / o.p
            t = -t2 if t is None else t - t2
        return Dual(p, t)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return Dual(-self.p, None if self.t is None else -self.t)

    def __pow__(self, c):
        c = float(c)
        p = self.p ** c
        t = None
        if self.t is not None:
            t = c * self.p ** (c - 1.0) * self.t
        return Dual(p, t)

    def __matmul__(self, other):
        o = self._lift(other)
        t = None
        if self.t is not None:
            t = self.t @ o.p
        if o.t is not None:
            t2 = self.p @ o.t
            t = t2 if t is None else t + t2
        return Dual(self.p @ o.p, t)

    def __rmatmul__(self, other):
        return self._lift(other).__matmul__(self)

    def __getitem__(self, idx):
        return Dual(self.p[idx], None if self.t is None else self.t[idx])

    def sum(self, axis=None, keepdims=False):
        t = None if self.t is None else self.t.sum(axis=axis, keepdims=keepdims)
        return Dual(self.p.sum(axis=axis, keepdims=keepdims), t)

    def reshape(self, shape):
        t = None if self.t is None else self.t.reshape(shape)
        return Dual(self.p.reshape(shape), t)


def _tan_add(ta, tb):
    if ta is None:
        return tb
    if tb is None:
        return ta
    return ta + tb


def _tan_sub(ta, tb):
    if ta is None:
        return None if tb is None else -tb
    if tb is None:
        return ta
    return ta - tb


# ---------------------------------------------------------------------------
# unary dispatchers: accept ndarray/float, Var, or Dual
# ---------------------------------------------------------------------------

def _unary(x, op, npf, dual_tan):
    if isinstance(x, Dual):
        p = _unary(x.p, op, npf, dual_tan)
        t = None if x.t is None else dual_tan(x, p)
        return Dual(p, t)
    if isinstance(x, Var):
        return x.tape._push(op, (x.idx,), npf(x.val))
    return npf(np.asarray(x, dtype=np.float64))


def exp(x):
    return _unary(x, "exp", np.exp, lambda d, p: p * d.t)


def log(x):
    return _unary(x, "log", np.log, lambda d, p: d.t / d.p)


def tanh(x):
    return _unary(x, "tanh", np.tanh, lambda d, p: (1.0 - p * p) * d.t)


def _np_sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    return _unary(x, "sigmoid", _np_sigmoid, lambda d, p: p * (1.0 - p) * d.t)


def swish(x):
    return x * sigmoid(x)


def sin(x):
    return _unary(x, "sin", np.sin, lambda d, p: cos(d.p) * d.t)


def cos(x):
    return _unary(x, "cos", np.cos, lambda d, p: -sin(d.p) * d.t)


def sqrt(x):
    if isinstance(x, (Var, Dual)):
        return x ** 0.5
    return np.sqrt(np.asarray(x, dtype=np.float64))


def asum(x, axis=None, keepdims=False):
    if isinstance(x, (Var, Dual)):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.asarray(x, dtype=np.float64).sum(axis=axis, keepdims=keepdims)


def amean(x, axis=None, keepdims=False):
    if isinstance(x, (Var, Dual)):
        shape = x.shape
    else:
        shape = np.shape(x)
    if axis is None:
        n = int(np.prod(shape)) if shape else 1
    else:
        n = shape[axis]
    return asum(x, axis=axis, keepdims=keepdims) / float(n)


def concat(parts, axis=0):
    """Concatenate a mix of arrays/Vars/Duals along ``axis``."""
    if any(isinstance(p, Dual) for p in parts):
        tape = next(p.p.tape for p in parts if isinstance(p, Dual))
        duals = []
        for p in parts:
            if isinstance(p, Dual):
                duals.append(p)
            elif isinstance(p, Var):
                duals.append(Dual(p, None))
            else:
                duals.append(Dual(tape.constant(p), None))
        prim = concat([d.p for d in duals], axis=axis)
        if all(d.t is None for d in duals):
            return Dual(prim, None)
        tans = [
            d.t if d.t is not None else tape.constant(np.zeros(d.p.shape))
            for d in duals
        ]
        return Dual(prim, concat(tans, axis=axis))
    if any(isinstance(p, Var) for p in parts):
        tape = next(p.tape for p in parts if isinstance(p, Var))
        vs = [p if isinstance(p, Var) else tape.constant(p) for p in parts]
        vals = [v.val for v in vs]
        return tape._push(
            "concat",
            tuple(v.idx for v in vs),
            np.concatenate(vals, axis=axis),
            aux=(axis, [v.shape[axis] for v in vals]),
        )
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)


def reshape(x, shape):
    if isinstance(x, (Var, Dual)):
        return x.reshape(shape)
    return np.asarray(x, dtype=np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# driver entry points
# ---------------------------------------------------------------------------

def _check_scalar_finite(tape, out):
    if not np.all(np.isfinite(out.val)):
        hit = tape.first_nonfinite()
        if hit is not None:
            i, n = hit
            raise NonFiniteError(f"non-finite value at node {i} (op '{n.op}')")
        raise NonFiniteError("non-finite output with finite intermediates")


def grad(f, theta):
    """Value and gradient of scalar ``f`` at parameter vector ``theta``.

    ``f`` receives a 1-D ``Var`` and must return a scalar ``Var`` built from
    the supported primitives.
    """
    theta = _as_array(theta)
    tape = Tape()
    tv = tape.leaf(theta)
    out = f(tv)
    if not isinstance(out, Var):
        raise TypeError("f must return a Var")
    _check_scalar_finite(tape, out)
    tape.backward(out)
    return float(out.val), tape.adjoint(tv)


def value_and_grad(f, params: dict):
    """Like :func:`grad` for a dict of named parameter arrays.

    ``f`` receives ``dict[str, Var]`` and returns a scalar ``Var``; the
    result is ``(value, dict[str, ndarray])`` with one gradient per entry.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = f(leaves)
    _check_scalar_finite(tape, out)
    tape.backward(out)
    return float(out.val), {k: tape.adjoint(v) for k, v in leaves.items()}


def jvp(f, x, u):
    """Evaluate ``f`` and its exact directional derivative ``J_f(x) u``.

    Tangents propagate symbolically on the tape; no finite differencing.
    """
    x = _as_array(x)
    u = _as_array(u)
    if x.shape != u.shape:
        raise ValueError(f"direction shape {u.shape} != point shape {x.shape}")
    tape = Tape()
    out = f(Dual(tape.leaf(x), tape.constant(u)))
    if isinstance(out, Dual):
        t = np.zeros_like(out.p.val) if out.t is None else out.t.val
        return out.p.val.copy(), t.copy()
    raise TypeError("f must return a Dual")


def velocity_and_divergence(v, x, tape=None):
    """Field values and divergence of ``v`` at point batch ``x``.

    ``v`` maps a Dual batch ``(B, d)`` to a Dual batch ``(B, d)``. One JVP
    pass per basis direction; the first pass's primal is reused as the
    field value. With ``tape`` given, both results are Vars on that tape
    (differentiable further); otherwise plain arrays come back.
    """
    x = _as_array(x)
    squeeze = x.ndim == 1
    xb = np.atleast_2d(x)
    B, d = xb.shape
    own_tape = tape is None
    if own_tape:
        tape = Tape()
    xleaf = tape.constant(xb)
    vel = None
    div = None
    for i in range(d):
        e = np.zeros((1, d))
        e[0, i] = 1.0
        u = tape.constant(np.broadcast_to(e, (B, d)).copy())
        out = v(Dual(xleaf, u))
        if not isinstance(out, Dual):
            raise TypeError("vector field must return a Dual")
        if vel is None:
            vel = out.p
        comp = (
            tape.constant(np.zeros(B))
            if out.t is None
            else out.t[(slice(None), i)]
        )
        div = comp if div is None else div + comp
    if own_tape:
        dv = div.val.copy()
        vv = vel.val.copy()
        if not np.all(np.isfinite(dv)):
            hit = tape.first_nonfinite()
            where = f"node {hit[0]} (op '{hit[1].op}')" if hit else "output"
            raise NonFiniteError(f"non-finite Jacobian entry at {where}")
        if squeeze:
            return vv[0], dv[0]
        return vv, dv
    return vel, div


def divergence(v, x, tape=None):
    """Divergence of vector field ``v`` at ``x`` (sum of d JVP passes)."""
    out = velocity_and_divergence(v, x, tape=tape)
    return out[1]
