"""Reverse-mode differentiation on a recorded tape of numpy array operations.

Values are ``Var`` handles into a ``Tape``. Every primitive appends one node
holding its cached primal output, the indices of its inputs and any static
arguments, so the tape can be replayed forward or swept backward.

The same numerical code runs on plain arrays and on ``Var`` objects: the
module-level functions (``tanh``, ``matmul``, ``stack``, ...) dispatch on
their argument types and only touch the tape when a ``Var`` is involved.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

KAPPA = 1e-8


class NonFiniteError(FloatingPointError):
    """A recorded node produced inf or nan."""

    def __init__(self, node: int, op: str):
        super().__init__(f"non-finite value at tape node {node} ({op})")
        self.node = node
        self.op = op


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    # vjp(g, out, inputs, **static) -> tuple of cotangents, one per input;
    # with masked=True it also receives need=(bool per input)
    vjp: Callable
    masked: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, forward: Callable, vjp: Callable, masked: bool = False) -> Primitive:
    prim = Primitive(name, forward, vjp, masked)
    PRIMITIVES[name] = prim
    return prim


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Ordered record of primitive applications.

    Node ``k`` only refers to nodes ``< k``, so the list is already in
    topological order.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple] = []
        self.values: list[np.ndarray] = []
        self.static: list[dict] = []
        self.live: list[bool] = []  # node depends on some leaf
        self.leaves: list[int] = []

    def __len__(self):
        return len(self.values)

    def _push(self, op, parents, value, static, live) -> "Var":
        self.ops.append(op)
        self.parents.append(parents)
        self.values.append(value)
        self.static.append(static)
        self.live.append(live)
        return Var(self, len(self.values) - 1)

    def leaf(self, value) -> "Var":
        v = self._push("leaf", (), np.asarray(value, dtype=float), {}, True)
        self.leaves.append(v.index)
        return v

    def const(self, value) -> "Var":
        return self._push("const", (), np.asarray(value, dtype=float), {}, False)

    def apply(self, name: str, inputs: Sequence, **static) -> "Var":
        prim = PRIMITIVES[name]
        parents = []
        args = []
        live = False
        values = self.values
        for x in inputs:
            if type(x) is Var:
                if x.tape is not self:
                    raise ValueError("mixing Vars from different tapes")
                parents.append(x.index)
                args.append(values[x.index])
                live = live or self.live[x.index]
            else:
                v = np.asarray(x, dtype=float)
                parents.append(self.const(v).index)
                args.append(v)
        out = prim.forward(*args, **static)
        return self._push(name, tuple(parents), out, static, live)

    def first_nonfinite(self) -> int | None:
        for k, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                return k
        return None

    def check_finite(self):
        k = self.first_nonfinite()
        if k is not None:
            raise NonFiniteError(k, self.ops[k])

    def backward(self, output: "Var") -> list:
        """Cotangents of every node w.r.t. the scalar ``output``."""
        grads: list = [None] * len(self.values)
        grads[output.index] = np.ones_like(self.values[output.index])
        values = self.values
        live = self.live
        for k in range(output.index, -1, -1):
            g = grads[k]
            if g is None:
                continue
            parents = self.parents[k]
            if not parents or not live[k]:
                continue
            prim = PRIMITIVES[self.ops[k]]
            ins = [values[i] for i in parents]
            if prim.masked:
                cts = prim.vjp(g, values[k], ins, need=tuple(live[i] for i in parents),
                               **self.static[k])
            else:
                cts = prim.vjp(g, values[k], ins, **self.static[k])
            for i, ct in zip(parents, cts):
                if ct is None or not live[i]:
                    continue
                if grads[i] is None:
                    grads[i] = ct
                else:
                    grads[i] = grads[i] + ct
        return grads

    def replay(self, leaf_values: Sequence | None = None) -> list:
        """Recompute every node from the leaves (optionally replaced)."""
        out: list = []
        replace = dict(zip(self.leaves, leaf_values)) if leaf_values is not None else {}
        for k, op in enumerate(self.ops):
            if op == "leaf":
                out.append(np.asarray(replace.get(k, self.values[k]), dtype=float))
            elif op == "const":
                out.append(self.values[k])
            else:
                ins = [out[i] for i in self.parents[k]]
                out.append(PRIMITIVES[op].forward(*ins, **self.static[k]))
        return out


class Var:
    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(node={self.index}, value={self.value!r})"

    def __add__(self, o):
        if isinstance(o, (int, float)):
            return self.tape.apply("shift", [self], c=float(o))
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, (int, float)):
            return self.tape.apply("shift", [self], c=-float(o))
        return sub(self, o)

    def __rsub__(self, o):
        if isinstance(o, (int, float)):
            return self.tape.apply("scale_shift", [self], a=-1.0, c=float(o))
        return sub(o, self)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return self.tape.apply("scale", [self], c=float(o))
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, o):
        return power(self, o)

    def __rpow__(self, o):
        return power(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return self.tape.apply("getitem", [self], idx=idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply("reshape", [self], shape=shape)

    def sum(self, axis=None):
        return sum_(self, axis=axis)


def _tape_of(args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _dispatch(name, *args, **static):
    tape = _tape_of(args)
    if tape is None:
        return PRIMITIVES[name].forward(*[np.asarray(a, dtype=float) for a in args], **static)
    return tape.apply(name, args, **static)


def value_of(x):
    return x.value if isinstance(x, Var) else x


# ---- primitive definitions -------------------------------------------------

def _safe_log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)


register("add", np.add,
         lambda g, out, ins: (unbroadcast(g, ins[0].shape), unbroadcast(g, ins[1].shape)))
register("sub", np.subtract,
         lambda g, out, ins: (unbroadcast(g, ins[0].shape), unbroadcast(-g, ins[1].shape)))
register("mul", np.multiply,
         lambda g, out, ins: (unbroadcast(g * ins[1], ins[0].shape),
                              unbroadcast(g * ins[0], ins[1].shape)))
register("div", np.divide,
         lambda g, out, ins: (unbroadcast(g / ins[1], ins[0].shape),
                              unbroadcast(-g * out / ins[1], ins[1].shape)))
register("neg", np.negative, lambda g, out, ins: (-g,))


def _pow_vjp(g, out, ins):
    x, y = ins
    with np.errstate(divide="ignore", invalid="ignore"):
        dx = np.where(x != 0, g * y * out / np.where(x != 0, x, 1.0), g * y * x ** (y - 1))
    dy = g * out * _safe_log(x)
    return unbroadcast(dx, x.shape), unbroadcast(dy, y.shape)


register("pow", np.power, _pow_vjp)
register("exp", np.exp, lambda g, out, ins: (g * out,))
register("log", np.log, lambda g, out, ins: (g / ins[0],))
register("sqrt", np.sqrt, lambda g, out, ins: (g * 0.5 / out,))
register("tanh", np.tanh, lambda g, out, ins: (g * (1.0 - out * out),))
register("sin", np.sin, lambda g, out, ins: (g * np.cos(ins[0]),))
register("cos", np.cos, lambda g, out, ins: (-g * np.sin(ins[0]),))
register("abs", np.abs, lambda g, out, ins: (g * np.sign(ins[0]),))


def _softplus(x):
    return np.logaddexp(0.0, x)


register("softplus", _softplus, lambda g, out, ins: (g / (1.0 + np.exp(-ins[0])),))


def _abs_smooth(x, kappa=KAPPA):
    return np.sqrt(x * x + kappa * kappa) - kappa


def _abs_smooth_vjp(g, out, ins, kappa=KAPPA):
    x = ins[0]
    return (g * x / (out + kappa),)


register("abs_smooth", _abs_smooth, _abs_smooth_vjp)


def _sign_smooth(x, kappa=KAPPA):
    return x / np.sqrt(x * x + kappa * kappa)


def _sign_smooth_vjp(g, out, ins, kappa=KAPPA):
    x = ins[0]
    r = np.sqrt(x * x + kappa * kappa)
    return (g * kappa * kappa / (r * r * r),)


register("sign_smooth", _sign_smooth, _sign_smooth_vjp)


def _matmul_vjp(g, out, ins):
    a, b = ins
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if b.ndim == 1:
        ga = np.expand_dims(g, -1) * b
        gb = np.einsum("...ij,...i->j", a, g) if a.ndim > 2 else a.T @ g
        return unbroadcast(ga, a.shape), gb
    if a.ndim == 1:
        ga = np.einsum("...j,...ij->i", g, b) if b.ndim > 2 else b @ g
        gb = np.expand_dims(a, -1) * np.expand_dims(g, -2)
        return ga, unbroadcast(gb, b.shape)
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


register("matmul", np.matmul, _matmul_vjp)


def _sum(x, axis=None):
    return np.sum(x, axis=axis)


def _sum_vjp(g, out, ins, axis=None):
    x = ins[0]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


register("sum", _sum, _sum_vjp)


def _getitem(x, idx=None):
    return np.array(x[idx], dtype=float)


def _getitem_vjp(g, out, ins, idx=None):
    gx = np.zeros_like(ins[0])
    np.add.at(gx, idx, g)
    return (gx,)


register("getitem", _getitem, _getitem_vjp)


def _reshape(x, shape=None):
    return np.reshape(x, shape)


register("reshape", _reshape, lambda g, out, ins, shape=None: (np.reshape(g, ins[0].shape),))


def _stack(*xs, axis=0):
    return np.stack(xs, axis=axis)


def _stack_vjp(g, out, ins, axis=0):
    return tuple(np.take(g, k, axis=axis) for k in range(len(ins)))


register("stack", _stack, _stack_vjp)


def _concat(*xs, axis=0):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, ins, axis=0):
    cuts = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


register("concat", _concat, _concat_vjp)


register("scale", lambda x, c=1.0: x * c, lambda g, out, ins, c=1.0: (g * c,))
register("shift", lambda x, c=0.0: x + c, lambda g, out, ins, c=0.0: (g,))
register("scale_shift", lambda x, a=1.0, c=0.0: a * x + c, lambda g, out, ins, a=1.0, c=0.0: (g * a,))


def _axpy(x, k, c=1.0):
    return x + c * k


register("axpy", _axpy,
         lambda g, out, ins, c=1.0: (unbroadcast(g, ins[0].shape), unbroadcast(c * g, ins[1].shape)))


def _rk4_combine(x, k1, k2, k3, k4, h=1.0):
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_combine_vjp(g, out, ins, h=1.0):
    a = (h / 6.0) * g
    return g, a, 2.0 * a, 2.0 * a, a


register("rk4_combine", _rk4_combine, _rk4_combine_vjp)


def _rotate(phi, v, transpose=False):
    c, s = np.cos(phi), np.sin(phi)
    if transpose:
        s = -s
    out = np.empty(np.broadcast_shapes(np.shape(v), np.shape(phi) + (3,)))
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    out[..., 2] = v[..., 2]
    return out


def _rotate_vjp(g, out, ins, transpose=False):
    phi, v = ins
    # out = R v  =>  dv = R^T g,  dphi = <g, R' v> with R' v = (-out1, out0, 0)
    gv = _rotate(phi, g, not transpose)
    dphi = -g[..., 0] * out[..., 1] + g[..., 1] * out[..., 0]
    if transpose:
        dphi = -dphi
    return unbroadcast(dphi, phi.shape), unbroadcast(gv, v.shape)


register("rotate", _rotate, _rotate_vjp)


def _mlp_layers(x, params):
    """Forward through (W, b) pairs; returns every post-activation."""
    acts = [x]
    h = x
    last = len(params) // 2 - 1
    for k in range(last + 1):
        W, b = params[2 * k], params[2 * k + 1]
        if W.ndim == 3:
            h = np.matmul(h[..., None, :], W)[..., 0, :] + b
        else:
            h = h @ W + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def _mlp(x, *params):
    return _mlp_layers(x, params)[-1]


def _mlp_vjp(g, out, ins, need):
    x, params = ins[0], ins[1:]
    acts = _mlp_layers(x, params)
    nl = len(params) // 2
    cts = [None] * len(ins)
    delta = g
    for k in range(nl - 1, -1, -1):
        W = params[2 * k]
        h_in = acts[k]
        if need[2 * k + 2]:
            cts[2 * k + 2] = unbroadcast(delta, params[2 * k + 1].shape)
        if need[2 * k + 1]:
            if W.ndim == 3:
                gw = h_in[..., :, None] * delta[..., None, :]
            else:
                gw = h_in.reshape(-1, h_in.shape[-1]).T @ delta.reshape(-1, delta.shape[-1])
            cts[2 * k + 1] = unbroadcast(gw, W.shape)
        if k == 0 and not need[0]:
            break
        if W.ndim == 3:
            delta = np.matmul(delta[..., None, :], np.swapaxes(W, -1, -2))[..., 0, :]
        else:
            delta = delta @ W.T
        if k > 0:
            delta = delta * (1.0 - h_in * h_in)
    if need[0]:
        cts[0] = unbroadcast(delta, x.shape)
    return tuple(cts)


register("mlp", _mlp, _mlp_vjp, masked=True)


def _bmv(A, x):
    return np.matmul(A, x[..., None])[..., 0]


def _bmv_vjp(g, out, ins):
    A, x = ins
    gA = g[..., :, None] * x[..., None, :]
    gx = np.matmul(g[..., None, :], A)[..., 0, :]
    return unbroadcast(gA, A.shape), unbroadcast(gx, x.shape)


def _bmtv(A, y):
    return np.matmul(y[..., None, :], A)[..., 0, :]


def _bmtv_vjp(g, out, ins):
    A, y = ins
    gA = y[..., :, None] * g[..., None, :]
    gy = np.matmul(A, g[..., None])[..., 0]
    return unbroadcast(gA, A.shape), unbroadcast(gy, y.shape)


register("bmv", _bmv, _bmv_vjp)
register("bmtv", _bmtv, _bmtv_vjp)


# ---- user-facing ops -------------------------------------------------------

def add(a, b):
    return _dispatch("add", a, b)


def sub(a, b):
    return _dispatch("sub", a, b)


def mul(a, b):
    return _dispatch("mul", a, b)


def div(a, b):
    return _dispatch("div", a, b)


def neg(a):
    return _dispatch("neg", a)


def power(a, b):
    return _dispatch("pow", a, b)


def exp(a):
    return _dispatch("exp", a)


def log(a):
    return _dispatch("log", a)


def sqrt(a):
    return _dispatch("sqrt", a)


def tanh(a):
    return _dispatch("tanh", a)


def sin(a):
    return _dispatch("sin", a)


def cos(a):
    return _dispatch("cos", a)


def abs_(a):
    return _dispatch("abs", a)


def softplus(a):
    return _dispatch("softplus", a)


def abs_smooth(a, kappa: float = KAPPA):
    """sqrt(x^2 + kappa^2) - kappa, a C-infinity stand-in for |x|."""
    return _dispatch("abs_smooth", a, kappa=kappa)


def sign_smooth(a, kappa: float = KAPPA):
    return _dispatch("sign_smooth", a, kappa=kappa)


def matmul(a, b):
    return _dispatch("matmul", a, b)


def bmv(A, x):
    """Batched A x for A (..., n, d), x (..., d)."""
    return _dispatch("bmv", A, x)


def bmtv(A, y):
    """Batched A^T y for A (..., n, d), y (..., n)."""
    return _dispatch("bmtv", A, y)


def scale(x, c: float):
    return _dispatch("scale", x, c=float(c))


def axpy(x, k, c: float):
    """x + c k for a static scalar c."""
    return _dispatch("axpy", x, k, c=float(c))


def rk4_combine(x, k1, k2, k3, k4, h: float):
    return _dispatch("rk4_combine", x, k1, k2, k3, k4, h=float(h))


def rotate(phi, v, transpose: bool = False):
    """Planar rotation of v[..., :2] by phi (or by -phi with transpose)."""
    return _dispatch("rotate", phi, v, transpose=bool(transpose))


def mlp(x, Ws, bs):
    """tanh MLP with linear output; weights (in, out) shared or (B, in, out) per row."""
    params = []
    for W, b in zip(Ws, bs):
        params.extend((W, b))
    return _dispatch("mlp", x, *params)


def sum_(a, axis=None):
    return _dispatch("sum", a, axis=axis)


def reshape(a, shape):
    return _dispatch("reshape", a, shape=tuple(shape))


def take(a, idx):
    """Basic indexing ``a[idx]`` that works for arrays and Vars."""
    if isinstance(a, Var):
        return a[idx]
    return np.asarray(a)[idx]


def stack(xs, axis=0):
    return _dispatch("stack", *xs, axis=axis)


def concat(xs, axis=0):
    return _dispatch("concat", *xs, axis=axis)


# ---- drivers ---------------------------------------------------------------

def value_and_grad(program: Callable, params, check: bool = True):
    """Evaluate ``program(x)`` on a fresh tape and return (value, dvalue/dx).

    ``program`` receives a ``Var`` shaped like ``params`` and must return a
    scalar. A program that ignores its input yields a zero gradient.
    Raises ``NonFiniteError`` naming the first node that went non-finite.
    """
    params = np.asarray(params, dtype=float)
    tape = Tape()
    x = tape.leaf(params)
    out = program(x)
    if not isinstance(out, Var):
        value = float(np.asarray(out))
        if not np.isfinite(value):
            raise NonFiniteError(-1, "constant")
        return value, np.zeros_like(params)
    value = np.asarray(out.value)
    if value.size != 1:
        raise ValueError("program must return a scalar")
    if check and not np.isfinite(value):
        tape.check_finite()
    grads = tape.backward(out)
    g = grads[x.index]
    if g is None:
        g = np.zeros_like(params)
    if check and not np.all(np.isfinite(g)):
        raise NonFiniteError(x.index, "gradient")
    return float(value), np.array(g, dtype=float)


def record(program: Callable, params) -> tuple[Tape, Var, Var]:
    """Record ``program`` and return (tape, input leaf, output) for inspection."""
    tape = Tape()
    x = tape.leaf(np.asarray(params, dtype=float))
    return tape, x, program(x)


def central_difference(program: Callable, params, step: float = 1e-6) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    flat = params.ravel()
    g = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(np.asarray(program(xp.reshape(params.shape))))
        fm = float(np.asarray(program(xm.reshape(params.shape))))
        g[i] = (fp - fm) / (2 * step)
    return g.reshape(params.shape)


def grad_check(program: Callable, params, step: float = 1e-6) -> float:
    """max_i |analytic_i - fd_i| / max(1, |fd_i|) with central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    _, g = value_and_grad(program, params)
    fd = central_difference(program, params, step)
    return float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))))
