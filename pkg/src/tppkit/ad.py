"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records a reverse rule. When any input carries a time tangent
(``d value / d t``), the output tangent is assembled from the same recorded
primitives, so a later :func:`backward` differentiates through it. This is
how the cumulative decoders get ``lambda_m = d Lambda_m / d t`` per mark and
still train on ``log lambda_m``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading

import numpy as np
from scipy.special import expit
from scipy.special import log_ndtr as _log_ndtr
from scipy.special import logsumexp as _logsumexp

from .errors import NumericalError, ShapeError

_uids = itertools.count()
_local = threading.local()
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _tangents_enabled():
    return getattr(_local, "tangents", True)


@contextlib.contextmanager
def no_tangents():
    """Build nodes without propagating time tangents (used inside tangent rules)."""
    prev = _tangents_enabled()
    _local.tangents = False
    try:
        yield
    finally:
        _local.tangents = prev


class Node:
    """A value in the graph: primal array, parents, reverse rule, optional tangent."""

    __slots__ = (
        "value", "parents", "backward_fn", "kind", "tangent",
        "name", "trainable", "requires_grad", "grad", "uid",
    )
    __array_ufunc__ = None  # make ``ndarray <op> Node`` dispatch to Node

    def __init__(self, value, parents=(), backward_fn=None, kind="const",
                 name=None, trainable=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.kind = kind
        self.tangent = None
        self.name = name
        self.trainable = trainable
        req = trainable
        if not req:
            for p in self.parents:
                if p.requires_grad:
                    req = True
                    break
        self.requires_grad = req
        self.grad = None
        self.uid = next(_uids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        axes = list(range(self.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
        return transpose(self, axes)

    def __repr__(self):
        label = self.name or self.kind
        return f"Node({label}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def const(value):
    return Node(value)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def _make(kind, value, parents, backward_fn, tangent_fn=None):
    if not np.isfinite(value).all():
        raise NumericalError(f"{kind}: non-finite value in forward pass")
    out = Node(value, parents, backward_fn, kind)
    if (tangent_fn is not None and _tangents_enabled()
            and any([p.tangent is not None for p in parents])):
        with no_tangents():
            tan = tangent_fn(out)
            if tan.shape != out.shape:
                tan = broadcast_to(tan, out.shape)
        out.tangent = tan
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind, *shapes):
    if all(sh == shapes[0] for sh in shapes[1:]):
        return shapes[0]
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"{kind}: incompatible shapes {shapes}") from exc


def _terms(*ts):
    ts = [t for t in ts if t is not None]
    out = ts[0]
    for t in ts[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.value + b.value, (a, b), back,
                 lambda out: _terms(a.tangent, b.tangent))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    def tan(out):
        if b.tangent is None:
            return a.tangent
        if a.tangent is None:
            return negate(b.tangent)
        return sub(a.tangent, b.tangent)

    return _make("sub", a.value - b.value, (a, b), back, tan)


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a.shape, b.shape)

    def back(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    def tan(out):
        ta = mul(a.tangent, b) if a.tangent is not None else None
        tb = mul(a, b.tangent) if b.tangent is not None else None
        return _terms(ta, tb)

    return _make("mul", a.value * b.value, (a, b), back, tan)


def div(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast("div", a.shape, b.shape)
    if np.any(b.value == 0):
        raise NumericalError("div: division by zero")

    def back(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.value / (b.value * b.value), b.shape)
              if b.requires_grad else None)
        return ga, gb

    def tan(out):
        num = a.tangent
        if b.tangent is not None:
            corr = mul(out, b.tangent)
            num = negate(corr) if num is None else sub(num, corr)
        return div(num, b)

    return _make("div", a.value / b.value, (a, b), back, tan)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    def tan(out):
        ta = matmul(a.tangent, b) if a.tangent is not None else None
        tb = matmul(a, b.tangent) if b.tangent is not None else None
        return _terms(ta, tb)

    return _make("matmul", a.value @ b.value, (a, b), back, tan)


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def negate(x):
    x = as_node(x)
    return _make("negate", -x.value, (x,), lambda g: (-g,),
                 lambda out: negate(x.tangent))


def exp(x):
    x = as_node(x)
    with np.errstate(over="ignore"):
        v = np.exp(x.value)
    return _make("exp", v, (x,), lambda g: (g * v,),
                 lambda out: mul(out, x.tangent))


def expm1(x):
    x = as_node(x)
    with np.errstate(over="ignore"):
        v = np.expm1(x.value)
    return _make("expm1", v, (x,), lambda g: (g * (v + 1.0),),
                 lambda out: mul(add(out, 1.0), x.tangent))


def log(x):
    x = as_node(x)
    if np.any(x.value <= 0):
        raise NumericalError("log: non-positive input")
    return _make("log", np.log(x.value), (x,), lambda g: (g / x.value,),
                 lambda out: div(x.tangent, x))


def sigmoid(x):
    x = as_node(x)
    v = expit(x.value)
    return _make("sigmoid", v, (x,), lambda g: (g * v * (1.0 - v),),
                 lambda out: mul(mul(out, sub(1.0, out)), x.tangent))


def tanh(x):
    x = as_node(x)
    v = np.tanh(x.value)
    return _make("tanh", v, (x,), lambda g: (g * (1.0 - v * v),),
                 lambda out: mul(sub(1.0, mul(out, out)), x.tangent))


SOFTPLUS_LINEAR = 37.0  # log1p(exp(x)) rounds to x from here on


def _softplus_value(x):
    # log1p(exp(x)) composes two monotone roundings; logaddexp's x + log1p(exp(-x))
    # does not, and can step down by an ulp as x grows
    small = x < SOFTPLUS_LINEAR
    return np.where(small, np.log1p(np.exp(np.where(small, x, 0.0))), x)


def softplus(x):
    """log(1 + exp(x)), overflow-safe and non-decreasing in floating point."""
    x = as_node(x)
    v = _softplus_value(x.value)
    return _make("softplus", v, (x,), lambda g: (g * expit(x.value),),
                 lambda out: mul(sigmoid(x), x.tangent))


def relu(x):
    x = as_node(x)
    mask = (x.value > 0).astype(np.float64)
    return _make("relu", x.value * mask, (x,), lambda g: (g * mask,),
                 lambda out: mul(x.tangent, mask))


def scaled_softplus(x, s):
    """s * log(1 + exp(x / s)); positive for any x, learnable sharpness s > 0."""
    s = as_node(s)
    return mul(s, softplus(div(x, s)))


def clamp_min_st(x, eps):
    """max(x, eps) forward; the reverse pass copies the adjoint straight through.

    The tangent keeps the true forward derivative, so time derivatives stay exact.
    """
    x = as_node(x)
    mask = (x.value > eps).astype(np.float64)
    return _make("clamp_min_st", np.maximum(x.value, eps), (x,), lambda g: (g,),
                 lambda out: mul(x.tangent, mask))


def clamp_min(x, floor):
    """max(x, floor) with the ordinary derivative (zero where clamped)."""
    x = as_node(x)
    mask = (x.value > floor).astype(np.float64)
    return _make("clamp_min", np.maximum(x.value, floor), (x,), lambda g: (g * mask,),
                 lambda out: mul(x.tangent, mask))


def power(x, p):
    x = as_node(x)
    p = float(p)
    if np.any(x.value <= 0):
        raise NumericalError("power: non-positive base")
    v = x.value ** p
    return _make("power", v, (x,), lambda g: (g * p * x.value ** (p - 1.0),),
                 lambda out: mul(mul(power(x, p - 1.0), p), x.tangent))


def log_ndtr(x):
    """log of the standard normal CDF, accurate in both tails."""
    x = as_node(x)
    v = _log_ndtr(x.value)

    def back(g):
        return (g * np.exp(-0.5 * x.value * x.value - v - _HALF_LOG_2PI),)

    def tan(out):
        dens = exp(sub(mul(mul(x, x), -0.5), add(out, _HALF_LOG_2PI)))
        return mul(dens, x.tangent)

    return _make("log_ndtr", v, (x,), back, tan)


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_node(x)
    v = np.sum(x.value, axis=axis, keepdims=keepdims)
    return _make("sum", v, (x,), lambda g: (_expand(g, x.shape, axis, keepdims),),
                 lambda out: sum(x.tangent, axis=axis, keepdims=keepdims))


def mean(x, axis=None, keepdims=False):
    x = as_node(x)
    count = x.value.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis=axis, keepdims=keepdims), float(count))


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0."""
    x = as_node(x)
    if mask is None:
        z = x.value - x.value.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("softmax: a row has every entry masked")
        mx = np.where(mask, x.value, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x.value - mx, 0.0)), 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (s * g).sum(axis=axis, keepdims=True)),)

    def tan(out):
        inner = sum(mul(out, x.tangent), axis=axis, keepdims=True)
        return mul(out, sub(x.tangent, inner))

    return _make("softmax", s, (x,), back, tan)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_node(x)
    v = _logsumexp(x.value, axis=axis, keepdims=keepdims)
    vk = v if keepdims else np.expand_dims(v, axis)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(x.value - vk),)

    def tan(out):
        return sum(mul(softmax(x, axis=axis), x.tangent), axis=axis, keepdims=keepdims)

    return _make("logsumexp", v, (x,), back, tan)


def masked_max(x, mask, axis):
    """Max over ``axis`` restricted to entries where ``mask`` is True."""
    x = as_node(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=axis)):
        raise ShapeError("masked_max: empty selection")
    idx = np.expand_dims(np.argmax(np.where(mask, x.value, -np.inf), axis=axis), axis)
    onehot = np.zeros(x.shape)
    np.put_along_axis(onehot, idx, 1.0, axis=axis)
    v = np.take_along_axis(x.value, idx, axis=axis).squeeze(axis)

    def back(g):
        return (np.expand_dims(g, axis) * onehot,)

    return _make("masked_max", v, (x,), back,
                 lambda out: sum(mul(x.tangent, onehot), axis=axis))


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    try:
        v = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    def tan(out):
        parts = [n.tangent if n.tangent is not None else Node(np.zeros(n.shape))
                 for n in nodes]
        return concat(parts, axis=axis)

    return _make("concat", v, nodes, back, tan)


def broadcast_to(x, shape):
    x = as_node(x)
    shape = tuple(shape)
    _check_broadcast("broadcast", x.shape, shape)
    v = np.broadcast_to(x.value, shape).copy()
    return _make("broadcast", v, (x,), lambda g: (_unbroadcast(g, x.shape),),
                 lambda out: broadcast_to(x.tangent, shape))


def reshape(x, shape):
    x = as_node(x)
    try:
        v = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _make("reshape", v, (x,), lambda g: (g.reshape(x.shape),),
                 lambda out: reshape(x.tangent, shape))


def transpose(x, axes):
    x = as_node(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.value, axes), (x,),
                 lambda g: (np.transpose(g, inv),),
                 lambda out: transpose(x.tangent, axes))


def getitem(x, idx):
    x = as_node(x)
    v = np.array(x.value[idx])

    def back(g):
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", v, (x,), back, lambda out: getitem(x.tangent, idx))


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "sum": sum,
    "mean": mean,
    "exp": exp,
    "expm1": expm1,
    "log": log,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "parametric-softplus": scaled_softplus,
    "relu": relu,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "log-ndtr": log_ndtr,
    "masked-max": masked_max,
    "clamp-min-straight-through": clamp_min_st,
    "clamp-min": clamp_min,
    "power": power,
    "negate": negate,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
}


def apply_primitive(kind, inputs, **kwargs):
    """Apply a primitive by tag, e.g. ``apply_primitive("exp", [x])``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# tangents
# ---------------------------------------------------------------------------

def seed_time_tangent(t):
    """Mark ``t`` as the time variable: its tangent becomes 1 elementwise.

    Each entry of ``t`` is treated as an independent query time, so for a
    batch of queries the tangent of any downstream value is the derivative
    with respect to that entry's own time.
    """
    if t.tangent is not None:
        raise ValueError("node already carries a tangent")
    t.tangent = Node(np.ones(t.shape))
    return t


def tangent_of(node):
    if node.tangent is not None:
        return node.tangent
    return Node(np.zeros(node.shape))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(root):
    """Accumulate adjoints from a scalar ``root``; return {param name: gradient}.

    Adjoints are fresh on every call. Nodes are visited in reverse creation
    order, which is a valid reverse topological order since parents are always
    created before their children.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    seen = set()
    order = []
    stack = [root]
    while stack:
        n = stack.pop()
        if n.uid in seen:
            continue
        seen.add(n.uid)
        order.append(n)
        stack.extend(p for p in n.parents if p.requires_grad)
    order.sort(key=lambda n: n.uid, reverse=True)

    adj = {root.uid: np.ones(root.shape)}
    grads = {}
    for n in order:
        g = adj.pop(n.uid, None)
        if g is None:
            continue
        if n.trainable:
            g = np.array(g)
            n.grad = g
            grads[n.name] = g
        if n.backward_fn is None:
            continue
        for p, pg in zip(n.parents, n.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericalError(f"non-finite adjoint flowing into {p.kind}")
            prev = adj.get(p.uid)
            adj[p.uid] = pg if prev is None else prev + pg
    return grads


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable leaves, created in a deterministic order from one seed."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params = {}

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def items(self):
        return self._params.items()

    def create(self, name, shape=None, init="glorot", value=None):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if value is None:
            value = self._initial(tuple(shape), init)
        node = Node(np.array(value, dtype=np.float64), name=name, trainable=True, kind="param")
        self._params[name] = node
        return node

    def _initial(self, shape, init):
        if callable(init):
            return init(self.rng, shape)
        if init == "zeros":
            return np.zeros(shape)
        if init == "glorot":
            fan_out, fan_in = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            return self.rng.uniform(-bound, bound, size=shape)
        raise ValueError(f"unknown init {init!r}")

    def num_entries(self):
        return int(np.sum([p.value.size for p in self._params.values()]))

    def state_dict(self):
        return {k: p.value.copy() for k, p in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.value[...] = arr


def finite_difference_check(f, params, step=1e-6, floor=1e-6, names=None):
    """Worst relative error between :func:`backward` and central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar node. The relative error of each entry is
    ``|ad - fd| / max(|ad|, |fd|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads = backward(f())
    worst = 0.0
    for name in names if names is not None else list(params):
        node = params[name]
        g = grads.get(name, np.zeros(node.shape)).reshape(-1)
        flat = node.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().value)
            flat[i] = orig - step
            fm = float(f().value)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor)
            worst = max(worst, err)
    return worst
