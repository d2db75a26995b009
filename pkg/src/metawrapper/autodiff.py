"""Reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built eagerly: every op call returns a :class:`Node` holding its
value.  Backward rules are themselves written with graph ops, so calling
:func:`gradient` with ``create_graph=True`` yields gradient Nodes that can be
differentiated again.  That is how Hessian-vector products (:func:`hvp`) and
the unrolled inner loop of the meta-wrapper are differentiated without ever
materialising a Hessian.

Example::

    x = param(3.0)
    y = x * x
    (dx,) = gradient(y, [x], create_graph=True).values()
    (ddx,) = gradient(dx, [x]).values()   # 2.0
"""

import itertools
import math
import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels

__all__ = [
    "Node", "GradMap", "NonFiniteError", "ShapeError", "UnsupportedOpError",
    "param", "constant", "detach", "no_grad", "gradient", "hvp", "forward",
    "add", "sub", "mul", "div", "scale", "matmul", "transpose", "reshape",
    "concat", "slice_axis", "pad_axis", "sigmoid", "sigmoid_grad", "softmax", "sum", "mean",
    "log", "clip", "broadcast_to", "sum_to", "gather", "scatter_add",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op {op!r}")


class ShapeError(ValueError):
    pass


class UnsupportedOpError(NotImplementedError):
    pass


_ids = itertools.count()
_state = threading.local()


def _recording():
    return getattr(_state, "recording", True)


@contextmanager
def _record(flag):
    prev = _recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def _op_checks():
    return _check_finite and getattr(_state, "op_checks", True)


@contextmanager
def _adjoint_pass(create_graph):
    # a plain gradient pass checks its outputs once instead of every adjoint
    prev = getattr(_state, "op_checks", True)
    _state.op_checks = prev and create_graph
    try:
        with _record(create_graph):
            yield
    finally:
        _state.op_checks = prev


@contextmanager
def no_grad():
    """Evaluate ops without recording parents (pure value computation)."""
    with _record(False):
        yield


class Node:
    __slots__ = ("id", "op", "parents", "attrs", "value", "requires_grad", "name")

    def __init__(self, op, parents, value, attrs=None, requires_grad=False, name=None):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} op={self.op} shape={self.value.shape}>"

    def item(self):
        return float(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _array(x):
    return np.asarray(x, dtype=np.float64)


def param(value, name=None):
    """A leaf that gradients can be taken with respect to."""
    return Node("input", (), _array(value).copy(), requires_grad=True, name=name)


def constant(value, name=None):
    return Node("input", (), _array(value), requires_grad=False, name=name)


def detach(node):
    """A fresh leaf bound to ``node``'s current value; severs gradient flow."""
    return Node("input", (), node.value, requires_grad=node.requires_grad, name=node.name)


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


_check_finite = True
# ops that only move or copy values cannot turn finite inputs non-finite
_STRUCTURAL = frozenset({"transpose", "reshape", "concat", "slice", "pad", "broadcast_to", "gather"})


def _all_finite(v):
    # a finite sum is a cheap sufficient test; an overflowing sum falls back to the exact one
    with np.errstate(over="ignore", invalid="ignore"):
        return math.isfinite(v.sum()) or bool(np.isfinite(v).all())


def _make(op, parents, value, attrs=None):
    if op not in _STRUCTURAL and _op_checks() and not _all_finite(value):
        raise NonFiniteError(op)
    if not _recording():
        return Node(op, (), value, attrs)
    rg = any(p.requires_grad for p in parents)
    return Node(op, tuple(parents), value, attrs, rg)


# ---------------------------------------------------------------------------
# forward rules: fn(values, attrs) -> ndarray

def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _softmax(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _sum_to(x, shape):
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1)
    return np.sum(x, axis=axes, keepdims=True).reshape(shape)


def _slice(x, axis, start, stop):
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)]


def _pad(x, axis, start, length):
    shape = list(x.shape)
    shape[axis] = length
    out = np.zeros(shape)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + x.shape[axis])
    out[tuple(index)] = x
    return out


def _scatter(x, idx, n_rows):
    flat = idx.reshape(-1)
    rest = x.shape[idx.ndim:]
    out = _kernels.scatter_add_rows(x.reshape(len(flat), -1), flat, n_rows)
    return out.reshape((n_rows,) + rest)


_FORWARD = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "div": lambda v, a: v[0] / v[1],
    "scale": lambda v, a: v[0] * a["c"],
    "matmul": lambda v, a: v[0] @ v[1],
    "transpose": lambda v, a: v[0].T,
    "reshape": lambda v, a: v[0].reshape(a["shape"]),
    "concat": lambda v, a: np.concatenate(v, axis=a["axis"]),
    "slice": lambda v, a: _slice(v[0], a["axis"], a["start"], a["stop"]),
    "pad": lambda v, a: _pad(v[0], a["axis"], a["start"], a["length"]),
    "sigmoid": lambda v, a: _sigmoid(v[0]),
    "sigmoid_grad": lambda v, a: v[1] * (v[0] - v[0] * v[0]),
    "softmax": lambda v, a: _softmax(v[0], a["axis"]),
    "sum": lambda v, a: np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    "mean": lambda v, a: np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    "log": lambda v, a: np.log(v[0]),
    "clip": lambda v, a: np.clip(v[0], a["lo"], a["hi"]),
    "broadcast_to": lambda v, a: np.broadcast_to(v[0], a["shape"]),
    "sum_to": lambda v, a: _sum_to(v[0], a["shape"]),
    "gather": lambda v, a: v[0][a["idx"]],
    "scatter_add": lambda v, a: _scatter(v[0], a["idx"], a["n_rows"]),
}


# ---------------------------------------------------------------------------
# op constructors

def _binary(op, a, b):
    a, b = _as_node(a), _as_node(b)
    try:
        value = _FORWARD[op]((a.value, b.value), None)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(op, (a, b), value)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def scale(a, c):
    return _make("scale", (a,), a.value * c, {"c": float(c)})


def matmul(a, b):
    """Matrix product of 2-D operands; a 1-D right operand is a column vector."""
    a, b = _as_node(a), _as_node(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make("matmul", (a, b), a.value @ b.value)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D operand")
    return _make("transpose", (a,), a.value.T)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if a.shape == shape:
        return a
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make("reshape", (a,), value, {"shape": shape})


def concat(nodes, axis=-1):
    nodes = [_as_node(n) for n in nodes]
    axis = axis % nodes[0].ndim
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make("concat", nodes, value, {"axis": axis})


def slice_axis(a, axis, start, stop):
    axis = axis % a.ndim
    return _make("slice", (a,), _slice(a.value, axis, start, stop),
                 {"axis": axis, "start": start, "stop": stop})


def pad_axis(a, axis, start, length):
    """Embed ``a`` into zeros of size ``length`` along ``axis`` at ``start``."""
    axis = axis % a.ndim
    return _make("pad", (a,), _pad(a.value, axis, start, length),
                 {"axis": axis, "start": start, "length": length})


def sigmoid(a):
    return _make("sigmoid", (a,), _sigmoid(a.value))


def sigmoid_grad(s, g):
    """``g * s * (1 - s)`` as one node: the sigmoid adjoint given its output ``s``."""
    return _make("sigmoid_grad", (s, g), g.value * (s.value - s.value * s.value))


def softmax(a, axis=-1):
    axis = axis % a.ndim
    return _make("softmax", (a,), _softmax(a.value, axis), {"axis": axis})


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _make("sum", (a,), np.sum(a.value, axis=axis, keepdims=keepdims),
                 {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return _make("mean", (a,), np.mean(a.value, axis=axis, keepdims=keepdims),
                 {"axis": axis, "keepdims": keepdims})


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _make("log", (a,), value)


def clip(a, lo, hi):
    return _make("clip", (a,), np.clip(a.value, lo, hi), {"lo": lo, "hi": hi})


def broadcast_to(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make("broadcast_to", (a,), np.broadcast_to(a.value, shape), {"shape": shape})


def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make("sum_to", (a,), _sum_to(a.value, shape), {"shape": shape})


def gather(a, idx):
    """Rows of ``a`` at integer positions ``idx``; result shape idx.shape + a.shape[1:]."""
    idx = np.asarray(idx, dtype=np.int64)
    return _make("gather", (a,), a.value[idx], {"idx": idx})


def scatter_add(a, idx, n_rows):
    idx = np.asarray(idx, dtype=np.int64)
    return _make("scatter_add", (a,), _scatter(a.value, idx, n_rows),
                 {"idx": idx, "n_rows": n_rows})


# ---------------------------------------------------------------------------
# backward rules: fn(node, upstream, need) -> tuple of parent adjoints (Nodes)
# ``need[i]`` says whether parent i's adjoint is wanted; unwanted ones are None.

def _bw_add(n, g, need):
    a, b = n.parents
    return (sum_to(g, a.shape) if need[0] else None,
            sum_to(g, b.shape) if need[1] else None)


def _bw_sub(n, g, need):
    a, b = n.parents
    return (sum_to(g, a.shape) if need[0] else None,
            sum_to(scale(g, -1.0), b.shape) if need[1] else None)


def _bw_mul(n, g, need):
    a, b = n.parents
    ga = sum_to(mul(g, b), a.shape) if need[0] else None
    gb = sum_to(mul(g, a), b.shape) if need[1] else None
    return ga, gb


def _bw_div(n, g, need):
    a, b = n.parents
    ga = div(g, b)
    gb = sum_to(scale(mul(ga, n), -1.0), b.shape) if need[1] else None
    return (sum_to(ga, a.shape) if need[0] else None), gb


def _bw_matmul(n, g, need):
    a, b = n.parents
    ga = matmul(g, transpose(b)) if need[0] else None
    gb = matmul(transpose(a), g) if need[1] else None
    return ga, gb


def _bw_concat(n, g, need):
    axis = n.attrs["axis"]
    out, start = [], 0
    for p, wanted in zip(n.parents, need):
        stop = start + p.shape[axis]
        out.append(slice_axis(g, axis, start, stop) if wanted else None)
        start = stop
    return tuple(out)


def _bw_sigmoid(n, g, need):
    return (sigmoid_grad(n, g),)


def _bw_sigmoid_grad(n, g, need):
    s, up = n.parents
    gs = mul(mul(g, up), sub(1.0, scale(s, 2.0))) if need[0] else None
    gu = sigmoid_grad(s, g) if need[1] else None
    return gs, gu


def _bw_softmax(n, g, need):
    axis = n.attrs["axis"]
    inner = sum(mul(g, n), axis=axis, keepdims=True)
    return (mul(n, sub(g, inner)),)


def _expand_reduced(n, g):
    (a,) = n.parents
    axis = n.attrs["axis"]
    if not n.attrs["keepdims"]:
        if axis is None:
            kshape = (1,) * a.ndim
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = {ax % a.ndim for ax in axes}
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        g = reshape(g, kshape)
    return broadcast_to(g, a.shape)


def _bw_mean(n, g, need):
    (a,) = n.parents
    return (scale(_expand_reduced(n, g), n.value.size / a.value.size),)


def _bw_clip(n, g, need):
    (a,) = n.parents
    inside = (a.value >= n.attrs["lo"]) & (a.value <= n.attrs["hi"])
    return (mul(g, constant(inside.astype(np.float64))),)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "scale": lambda n, g, need: (scale(g, n.attrs["c"]),),
    "matmul": _bw_matmul,
    "transpose": lambda n, g, need: (transpose(g),),
    "reshape": lambda n, g, need: (reshape(g, n.parents[0].shape),),
    "concat": _bw_concat,
    "slice": lambda n, g, need: (pad_axis(g, n.attrs["axis"], n.attrs["start"],
                                          n.parents[0].shape[n.attrs["axis"]]),),
    "pad": lambda n, g, need: (slice_axis(g, n.attrs["axis"], n.attrs["start"],
                                          n.attrs["start"] + n.parents[0].shape[n.attrs["axis"]]),),
    "sigmoid": _bw_sigmoid,
    "sigmoid_grad": _bw_sigmoid_grad,
    "softmax": _bw_softmax,
    "sum": lambda n, g, need: (_expand_reduced(n, g),),
    "mean": _bw_mean,
    "log": lambda n, g, need: (div(g, n.parents[0]),),
    "clip": _bw_clip,
    "broadcast_to": lambda n, g, need: (sum_to(g, n.parents[0].shape),),
    "sum_to": lambda n, g, need: (broadcast_to(g, n.parents[0].shape),),
    "gather": lambda n, g, need: (scatter_add(g, n.attrs["idx"], n.parents[0].shape[0]),),
    "scatter_add": lambda n, g, need: (gather(g, n.attrs["idx"]),),
}


# ---------------------------------------------------------------------------
# graph traversal

def _toposort(root, grad_only):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen and (p.requires_grad or not grad_only):
                stack.append((p, False))
    return order


class GradMap(dict):
    """Parameter handle -> gradient Node.

    ``unreachable`` lists the handles the scalar does not depend on; their
    entries are zero tensors rather than an error.
    """

    def __init__(self, *args, unreachable=(), **kwargs):
        super().__init__(*args, **kwargs)
        self.unreachable = list(unreachable)

    def arrays(self):
        return {k: v.value for k, v in self.items()}


def gradient(scalar, wrt, create_graph=False):
    """Reverse-mode gradient of a one-element Node.

    ``wrt`` is a list of Nodes or a mapping name -> Node; the result is keyed
    the same way.  With ``create_graph`` the returned gradients are
    differentiable Nodes.
    """
    if scalar.value.size != 1:
        raise ShapeError(f"gradient needs a one-element output, got shape {scalar.shape}")
    if isinstance(wrt, dict):
        keys, targets = list(wrt.keys()), list(wrt.values())
    else:
        targets = list(wrt)
        keys = targets
    target_ids = {t.id for t in targets}

    order = _toposort(scalar, grad_only=True) if scalar.requires_grad else []
    reach = set()
    for node in order:
        if node.id in target_ids or any(p.id in reach for p in node.parents):
            reach.add(node.id)

    adjoint = {scalar.id: constant(np.ones_like(scalar.value))}
    with _adjoint_pass(create_graph):
        for node in reversed(order):
            if node.id not in reach or not node.parents:
                continue
            g = adjoint.get(node.id)
            if g is None:
                continue
            rule = _BACKWARD.get(node.op)
            if rule is None:
                raise UnsupportedOpError(f"no differentiable backward rule for op {node.op!r}")
            need = tuple(p.id in reach for p in node.parents)
            for p, wanted, pg in zip(node.parents, need, rule(node, g, need)):
                if pg is None or not wanted:
                    continue
                prev = adjoint.get(p.id)
                adjoint[p.id] = pg if prev is None else add(prev, pg)

    out, missing = GradMap(), []
    for key, t in zip(keys, targets):
        g = adjoint.get(t.id) if (t.id in reach or t.id == scalar.id) else None
        if g is None:
            missing.append(key)
            g = constant(np.zeros_like(t.value))
        if _check_finite and not create_graph and not _all_finite(g.value):
            raise NonFiniteError(f"gradient[{key}]")
        out[key] = g
    out.unreachable = missing
    return out


def forward(root, bindings=None):
    """Re-evaluate a recorded graph with some leaves rebound.

    ``bindings`` maps leaf Nodes (or their names) to new values.  The graph
    itself is not modified; repeated calls with equal bindings are
    bit-identical.
    """
    bindings = bindings or {}
    by_id = {k.id: v for k, v in bindings.items() if isinstance(k, Node)}
    by_name = {k: v for k, v in bindings.items() if isinstance(k, str)}
    values = {}
    for node in _toposort(root, grad_only=False):
        if not node.parents:
            if node.id in by_id:
                v = _array(by_id[node.id])
            elif node.name is not None and node.name in by_name:
                v = _array(by_name[node.name])
            else:
                v = node.value
            if v.shape != node.shape:
                raise ShapeError(f"binding for {node!r} has shape {v.shape}")
            values[node.id] = v
            continue
        rule = _FORWARD.get(node.op)
        if rule is None:
            raise UnsupportedOpError(f"unknown op {node.op!r}")
        try:
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                v = rule([values[p.id] for p in node.parents], node.attrs)
        except ValueError as exc:
            raise ShapeError(f"{node.op}: {exc}") from exc
        if node.op not in _STRUCTURAL and not _all_finite(v):
            raise NonFiniteError(node.op)
        values[node.id] = v
    return values[root.id]


def hvp(fn, at, vector, wrt=None):
    """Mixed Hessian-vector product by double backpropagation.

    ``fn(nodes)`` builds a scalar from a mapping name -> Node.  ``vector``
    maps a subset of names (the "theta" block) to arrays.  Returns
    ``grad_wrt (grad_theta fn . vector)`` as arrays keyed by ``wrt`` (defaults
    to the theta block itself, i.e. the ordinary Hessian-vector product).
    """
    nodes = {k: param(v, name=k) for k, v in at.items()}
    theta_keys = list(vector.keys())
    wrt_keys = theta_keys if wrt is None else list(wrt)
    loss = fn(nodes)
    grads = gradient(loss, {k: nodes[k] for k in theta_keys}, create_graph=True)
    dot = None
    for k in theta_keys:
        term = sum(mul(grads[k], constant(vector[k])))
        dot = term if dot is None else add(dot, term)
    out = gradient(dot, {k: nodes[k] for k in wrt_keys})
    return {k: v.value for k, v in out.items()}


def relative_error(a, b, floor=1e-12):
    """max |a-b| / max(max|a|, max|b|, floor) -- the block-normalised error."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / denom


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf checking (on by default)."""
    global _check_finite
    _check_finite = bool(enabled)


def is_finite_scalar(x):
    return math.isfinite(float(x))
