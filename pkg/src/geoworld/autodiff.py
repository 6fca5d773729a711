"""Small reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that depend on a
registered parameter, in execution order (which is a topological order).
:func:`backward` walks the record in reverse and returns the gradient of a
scalar root with respect to every parameter on the tape.

Shapes are explicit: elementwise binary ops require equal shapes, with one
exception: ``add`` accepts a 1-D bias matching the last axis of a 2-D input.
"""

from __future__ import annotations

import json
from typing import Callable, Dict, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, NumericalError


class Tensor:
    __slots__ = ("data", "tape", "parents", "grad_fn", "name", "op", "requires_grad")

    def __init__(self, data, tape, parents=(), grad_fn=None, op="const", name=None, requires_grad=False):
        self.data = data
        self.tape = tape
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Execution record for one forward/backward pass."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def param(self, name, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        arr = np.array(value, dtype=np.float64)
        t = Tensor(arr, self, op="param", name=name, requires_grad=True)
        self.params[name] = t
        self.nodes.append(t)
        return t

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def params_from(self, arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in arrays.items()}


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("at least one operand must be a Tensor")


def _lift(x, tape):
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("operands belong to different tapes")
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape)


def _record(op, data, parents, grad_fn):
    if not np.all(np.isfinite(data)):
        raise NumericalError(op)
    tape = parents[0].tape
    rg = any(p.requires_grad for p in parents)
    t = Tensor(data, tape, parents if rg else (), grad_fn if rg else None, op, requires_grad=rg)
    if rg:
        tape.nodes.append(t)
    return t


def _same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ContractError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ------------------------------------------------------------------ binary


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    A, B = a.data, b.data
    return _record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if len(sa) == 2 and len(sb) == 1 and sb[0] == sa[1]:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ContractError(f"add: shape mismatch {sa} vs {sb}")


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x, c):
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


# ------------------------------------------------------------------ unary


def tanh(x):
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def abs_(x):
    X = x.data
    return _record("abs", np.abs(X), (x,), lambda g: (g * np.sign(X),))


def relu(x):
    """Hinge ``max(x, 0)``; subgradient 0 at the kink."""
    X = x.data
    return _record("relu", np.maximum(X, 0.0), (x,), lambda g: (g * (X > 0.0),))


def exp(x):
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x):
    X = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(X)
    return _record("log", y, (x,), lambda g: (g / X,))


def square(x):
    X = x.data
    return _record("square", X * X, (x,), lambda g: (2.0 * g * X,))


def sqrt(x):
    """Square root.  The gradient at exactly 0 is taken as 0, not inf."""
    X = x.data
    with np.errstate(invalid="ignore"):
        y = np.sqrt(X)

    def grad(g):
        safe = np.where(y > 0.0, y, 1.0)
        return (np.where(y > 0.0, 0.5 * g / safe, 0.0),)

    return _record("sqrt", y, (x,), grad)


def cos(x):
    X = x.data
    return _record("cos", np.cos(X), (x,), lambda g: (-g * np.sin(X),))


def sin(x):
    X = x.data
    return _record("sin", np.sin(X), (x,), lambda g: (g * np.cos(X),))


def wrap_passthrough(x, k):
    """Wrap columns into ``[0, k)``; the backward pass is the identity.

    ``k`` is a scalar or a per-column array over the last axis; ``inf``
    entries leave their column untouched.
    """
    X = x.data
    d = X.shape[-1]
    kk = np.broadcast_to(np.asarray(k, dtype=np.float64), (d,))
    circ = np.isfinite(kk)
    kmod = np.where(circ, kk, 1.0)
    flat = np.ascontiguousarray(X.reshape(-1, d))
    y = _kernels.wrap_columns(flat, kmod, circ).reshape(X.shape)
    return _record("wrap_passthrough", y, (x,), lambda g: (g,))


# ------------------------------------------------------------------ reductions


def sum_(x, axis=None):
    X = x.data
    y = np.asarray(X.sum(axis=axis), dtype=np.float64)

    def grad(g):
        if axis is None:
            return (np.full(X.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), X.shape).copy(),)

    return _record("sum", y, (x,), grad)


def mean(x, axis=None):
    X = x.data
    n = X.size if axis is None else X.shape[axis]
    y = np.asarray(X.mean(axis=axis), dtype=np.float64)

    def grad(g):
        if axis is None:
            return (np.full(X.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, X.shape).copy(),)

    return _record("mean", y, (x,), grad)


def logsumexp(x, mask=None):
    """Row-wise ``log(sum(exp(x)))`` of a 2-D tensor, max-shifted.

    ``mask`` (bool, same shape) restricts each row to the selected entries;
    every row must select at least one entry.
    """
    X = x.data
    if X.ndim != 2:
        raise ContractError(f"logsumexp expects a 2-D tensor, got {X.shape}")
    if mask is None:
        mask = np.ones(X.shape, dtype=bool)
    elif mask.shape != X.shape:
        raise ContractError(f"logsumexp mask shape {mask.shape} != {X.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("logsumexp: a row has an empty mask")
    masked = np.where(mask, X, -np.inf)
    m = masked.max(axis=1)
    e = np.where(mask, np.exp(masked - m[:, None]), 0.0)
    s = e.sum(axis=1)
    y = m + np.log(s)
    p = e / s[:, None]
    return _record("logsumexp", y, (x,), lambda g: (p * g[:, None],))


# ------------------------------------------------------------------ structure


def concat(tensors: Sequence[Tensor], axis=-1):
    tape = _tape_of(*tensors)
    ts = [_lift(t, tape) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def grad(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", y, tuple(ts), grad)


def take(x, index, axis=0):
    """Select entries along ``axis``: a slice or an integer index array.

    Repeated indices are allowed; their gradients accumulate.
    """
    X = x.data
    y = np.take(X, index, axis=axis) if not isinstance(index, slice) else X[(slice(None),) * (axis % X.ndim) + (index,)]

    def grad(g):
        out = np.zeros_like(X)
        if isinstance(index, slice):
            out[(slice(None),) * (axis % X.ndim) + (index,)] = g
        else:
            moved = np.moveaxis(out, axis, 0)
            np.add.at(moved, np.asarray(index), np.moveaxis(g, axis, 0))
        return (out,)

    return _record("take", np.ascontiguousarray(y), (x,), grad)


def gather2d(x, rows, cols):
    """``x[rows, cols]`` for a 2-D tensor; returns a 1-D tensor."""
    X = x.data
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def grad(g):
        out = np.zeros_like(X)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _record("gather2d", X[rows, cols], (x,), grad)


def reshape(x, shape):
    X = x.data
    return _record("reshape", X.reshape(shape), (x,), lambda g: (g.reshape(X.shape),))


def pairwise_distance(a, b, moduli, circular, metric=2):
    """``D[i, j] = dist(a_i, b_j)`` in a product space (fused kernel)."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    A = np.ascontiguousarray(a.data)
    B = np.ascontiguousarray(b.data)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1] or A.shape[1] != len(moduli):
        raise ContractError(f"pairwise_distance: shapes {A.shape}, {B.shape}")
    kmod = np.where(circular, moduli, 1.0)
    D = _kernels.pairwise_distance(A, B, kmod, circular, metric)

    def grad(g):
        return _kernels.pairwise_distance_grad(A, B, kmod, circular, metric, np.ascontiguousarray(g), D)

    return _record("pairwise_distance", D, (a, b), grad)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, root: Tensor) -> Dict[str, np.ndarray]:
    """Gradient of scalar ``root`` for every parameter registered on ``tape``.

    Parameters the root does not depend on get zero arrays.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.data.shape}")
    grads = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.grad_fn is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {
        name: np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64).reshape(t.data.shape)
        for name, t in tape.params.items()
    }


def value_and_grad(fn: Callable[[Tape, Dict[str, Tensor]], Tensor], params: Dict[str, np.ndarray]):
    tape = Tape()
    P = tape.params_from(params)
    root = fn(tape, P)
    return float(root.data), backward(tape, root)


def grad_check(fn, params: Dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn(tape, P)`` must build a scalar tensor from the parameter tensors
    ``P``.  For each parameter the error is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)``; entries
    that are analytically zero would otherwise blow up an elementwise ratio.
    """
    _, analytic = value_and_grad(fn, params)
    worst = 0.0
    for name, value in params.items():
        base = np.array(value, dtype=np.float64)
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
                pert[name][idx] = base[idx] + sign * eps
                tape = Tape()
                vals.append(float(fn(tape, tape.params_from(pert)).data))
            numeric[idx] = (vals[0] - vals[1]) / (2.0 * eps)
        a = np.asarray(analytic[name], dtype=np.float64)
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - numeric)) / denom)
    return worst


# ------------------------------------------------------------------ checkpoints


def save_params(path, params: Dict[str, np.ndarray], meta=None):
    """Write parameters as JSON keyed by name, with shape headers.

    Floats are written with ``repr`` so the round trip is bit-exact.
    """
    doc = {
        "format": "geoworld-params/1",
        "meta": meta or {},
        "params": {
            name: {"shape": list(arr.shape), "values": [float(v) for v in np.ravel(arr)]}
            for name, arr in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_params(path):
    with open(path) as fh:
        doc = json.load(fh)
    params = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["values"], dtype=np.float64)
        params[name] = arr.reshape(entry["shape"])
    return params, doc.get("meta", {})
