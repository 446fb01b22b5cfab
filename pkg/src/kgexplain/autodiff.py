"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` is an append-only list of :class:`Node` records; reverse
iteration is a valid reverse-topological order because operands always
precede their consumers. Every op accepts a mix of :class:`Node` operands
and plain numpy constants. When *no* operand is a Node the op falls
through to the identical numpy computation and returns a raw array, so
the same model code serves both differentiable and value-only forward
passes (bit-for-bit, since the op sequence is unchanged).

Scalars are represented as 0-d or length-1 arrays; `backward` accepts any
single-element output. Forward values and backward adjoints are checked
for NaN/Inf and raise :class:`NumericError` naming the offending op.

log() clamps its argument to >= 1e-12 so -log(p) stays finite when a
probability collapses; the adjoint uses the clamped argument as well.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import ContractError, NumericError

LOG_CLAMP = 1e-12


def _check_finite(value, op):
    if isinstance(value, np.ndarray):
        if not np.isfinite(value).all():
            raise NumericError(f"non-finite value produced by op '{op}'")
    elif not math.isfinite(value):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Node:
    __slots__ = ("tape", "value", "parents", "bw", "grad", "op", "store", "pname")

    def __init__(self, tape, value, parents, bw, op):
        _check_finite(value, op)
        self.tape = tape
        self.value = value
        self.parents = parents
        self.bw = bw
        self.grad = None
        self.op = op
        self.store = None
        self.pname = None
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Owns the node list for one forward/backward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, op="leaf") -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), (), None, op)

    def param(self, store: "ParamStore", name: str) -> Node:
        node = Node(self, store.params[name], (), None, f"param:{name}")
        node.store = store
        node.pname = name
        return node


def _val(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, forward, bw_a, bw_b, op):
    va, vb = _val(a), _val(b)
    out = forward(va, vb)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Node):
        parents.append(a)
        sa = np.shape(va)
        fns.append(lambda g: _unbroadcast(np.asarray(bw_a(g, va, vb)), sa))
    if isinstance(b, Node):
        parents.append(b)
        sb = np.shape(vb)
        fns.append(lambda g: _unbroadcast(np.asarray(bw_b(g, va, vb)), sb))
    return Node(tape, out, tuple(parents), lambda g: [f(g) for f in fns], op)


def _unary(a, forward, bw, op):
    va = _val(a)
    out = forward(va)
    if not isinstance(a, Node):
        return out
    return Node(a.tape, out, (a,), lambda g: [bw(g, va, out)], op)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def neg(a):
    return _unary(a, lambda x: -x, lambda g, x, o: -g, "neg")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div"
    )


def matmul(a, b):
    va, vb = _val(a), _val(b)
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        grads = []
        if isinstance(a, Node):
            if vb.ndim == 1:
                ga = np.outer(g, vb) if va.ndim == 2 else g * vb
            else:
                ga = (g @ vb.T) if va.ndim == 2 else vb @ g
            grads.append(ga.reshape(np.shape(va)))
        if isinstance(b, Node):
            if va.ndim == 1:
                gb = np.outer(va, g) if vb.ndim == 2 else g * va
            else:
                gb = va.T @ g if vb.ndim == 2 else va.T @ g
            grads.append(gb.reshape(np.shape(vb)))
        return grads

    parents = tuple(x for x in (a, b) if isinstance(x, Node))
    return Node(tape, out, parents, bw, "matmul")


# ---------------------------------------------------------------------------
# gather / scatter


def gather(x, idx):
    """Row (2-D) or element (1-D) gather; adjoint is a scatter-add."""
    idx = np.asarray(idx, dtype=np.int64)
    vx = _val(x)
    out = vx[idx]
    if not isinstance(x, Node):
        return out
    n = vx.shape[0]

    def bw(g):
        g = np.ascontiguousarray(g)
        if vx.ndim == 2:
            return [kernels.scatter_add_rows(g, idx, n)]
        return [kernels.scatter_add_vec(g, idx, n)]

    return Node(x.tape, out, (x,), bw, "gather")


def scatter_add(rows, idx, n):
    """out[idx[e]] += rows[e]; the aggregation half of gather/scatter."""
    idx = np.asarray(idx, dtype=np.int64)
    v = _val(rows)
    if v.ndim == 2:
        out = kernels.scatter_add_rows(np.ascontiguousarray(v), idx, n)
    else:
        out = kernels.scatter_add_vec(np.ascontiguousarray(v), idx, n)
    if not isinstance(rows, Node):
        return out
    return Node(rows.tape, out, (rows,), lambda g: [g[idx]], "scatter_add")


def edge_spmv(u, vals, src, dst, n):
    """Row-vector x sparse-matrix product over an edge list (the power step)."""
    vu, vv = _val(u), _val(vals)
    out = kernels.edge_spmv(vu, vv, src, dst, n)
    tape = _tape_of(u, vals)
    if tape is None:
        return out

    def bw(g):
        g_u, g_vals = kernels.edge_spmv_bw(np.ascontiguousarray(g), vu, vv, src, dst)
        grads = []
        if isinstance(u, Node):
            grads.append(g_u)
        if isinstance(vals, Node):
            grads.append(g_vals)
        return grads

    parents = tuple(x for x in (u, vals) if isinstance(x, Node))
    return Node(tape, out, parents, bw, "edge_spmv")


def segment_max(vals, indptr):
    """Per-segment max over a 1-D array split at contiguous boundaries.

    Ties route the adjoint to the first maximal element of the segment.
    """
    v = _val(vals)
    nseg = len(indptr) - 1
    if nseg == 0:
        out = np.zeros(0)
        argmax = np.zeros(0, dtype=np.int64)
    else:
        out = np.maximum.reduceat(v, indptr[:-1])
        counts = np.diff(indptr)
        seg_of = np.repeat(np.arange(nseg), counts)
        hit = np.where(v == out[seg_of], np.arange(v.shape[0]), v.shape[0])
        argmax = np.minimum.reduceat(hit, indptr[:-1])
    if not isinstance(vals, Node):
        return out, argmax

    def bw(g):
        gz = np.zeros_like(v)
        gz[argmax] = g
        return [gz]

    return Node(vals.tape, out, (vals,), bw, "segment_max"), argmax


def concat(parts, axis=0):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Node):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append(g[tuple(sl)])
        return grads

    parents = tuple(p for p in parts if isinstance(p, Node))
    return Node(tape, out, parents, bw, "concat")


def reshape(a, shape):
    va = _val(a)
    out = va.reshape(shape)
    if not isinstance(a, Node):
        return out
    return Node(a.tape, out, (a,), lambda g: [g.reshape(va.shape)], "reshape")


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def _sigmoid_value(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a):
    return _unary(a, _sigmoid_value, lambda g, x, o: g * o * (1.0 - o), "sigmoid")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0.0), "relu")


def log(a):
    return _unary(
        a,
        lambda x: np.log(np.maximum(x, LOG_CLAMP)),
        lambda g, x, o: g / np.maximum(x, LOG_CLAMP),
        "log",
    )


def powc(a, c):
    """x ** c for a constant exponent; grad defined as 0 where x == 0."""

    def fwd(x):
        with np.errstate(invalid="ignore"):
            return np.power(x, c)

    def bw(g, x, o):
        base = np.where(x == 0.0, 1.0, x)
        return g * np.where(x == 0.0, 0.0, c * np.power(base, c - 1.0))

    return _unary(a, fwd, bw, "powc")


def norm(a):
    """Euclidean norm of all entries; grad defined as 0 at the origin."""
    return _unary(
        a,
        lambda x: np.sqrt((x * x).sum()),
        lambda g, x, o: g * x / max(float(o), 1e-30),
        "norm",
    )


def sumall(a):
    return _unary(a, lambda x: x.sum(), lambda g, x, o: np.broadcast_to(g, x.shape).copy(), "sum")


def sum_rows(a):
    """Sum over axis 1 of a 2-D array."""
    return _unary(
        a,
        lambda x: x.sum(axis=1),
        lambda g, x, o: np.repeat(np.asarray(g)[:, None], x.shape[1], axis=1),
        "sum_rows",
    )


# ---------------------------------------------------------------------------
# parameters, backward, optimizer


class ParamStore:
    """Named float64 tensors with matching gradient accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def names(self):
        return list(self.params)

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self.params.items():
            other.add(name, p.copy())
        return other

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])


def backward(tape: Tape, out: Node):
    """Accumulate d(out)/d(node) for every node, store-bound leaves included."""
    if not isinstance(out, Node):
        raise ContractError("backward target must be a Node on the tape")
    if np.size(out.value) != 1:
        raise ContractError(f"backward requires a scalar output, got shape {out.shape}")
    out.grad = np.ones_like(np.asarray(out.value, dtype=np.float64))
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        if node.bw is not None:
            for parent, pg in zip(node.parents, node.bw(g)):
                pg = np.asarray(pg, dtype=np.float64)
                if not np.isfinite(pg).all():
                    raise NumericError(f"NaN/Inf adjoint flowing into op '{parent.op}'")
                parent.grad = pg if parent.grad is None else parent.grad + pg
        if node.store is not None:
            node.store.grads[node.pname] += g.reshape(node.store.grads[node.pname].shape)


def sgd_step(store: ParamStore, lr: float):
    """Plain gradient descent; zeroes the accumulators afterwards."""
    for name in store.params:
        store.params[name] -= lr * store.grads[name]
        store.grads[name][...] = 0.0


# ---------------------------------------------------------------------------
# finite differences


class FiniteDiffReport:
    def __init__(self, per_param, tol, step):
        self.per_param = per_param
        self.tol = tol
        self.step = step
        self.max_rel_err = max(per_param.values()) if per_param else 0.0
        self.passed = self.max_rel_err <= tol

    def __repr__(self):
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return (
            f"FiniteDiffReport(passed={self.passed}, max_rel_err={self.max_rel_err:.3e}, "
            f"worst={worst!r}, tol={self.tol}, step={self.step})"
        )


def relative_error(analytic, numeric, floor=1e-4):
    """|a - f| / max(|a|, |f|, floor): relative above the floor, absolute below."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(loss_fn, store: ParamStore, step=1e-5, tol=1e-4,
                      floor=1e-4) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(store, tape)`` must return the scalar loss as a Node when a
    tape is given, and as a plain float/0-d array when ``tape is None``
    (the ops fall through to raw numpy in that mode, so one definition
    serves both). `floor` bounds the relative-error denominator so
    near-zero gradients are compared absolutely at tol * floor.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    tape = Tape()
    out = loss_fn(store, tape)
    store.zero_grads()
    backward(tape, out)
    analytic = {name: store.grads[name].copy() for name in store.params}
    per_param = {}
    for name, p in store.params.items():
        worst = 0.0
        flat = p.ravel()
        a_flat = analytic[name].ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            f_hi = float(np.asarray(_val(loss_fn(store, None))).reshape(()))
            flat[i] = keep - step
            f_lo = float(np.asarray(_val(loss_fn(store, None))).reshape(()))
            flat[i] = keep
            fd = (f_hi - f_lo) / (2.0 * step)
            worst = max(worst, relative_error(a_flat[i], fd, floor))
        per_param[name] = worst
    store.zero_grads()
    return FiniteDiffReport(per_param, tol, step)
