"""Array-level reverse-mode automatic differentiation.

Every value in a computation is wrapped in a :class:`Node`. Operations build a
dynamic graph; :func:`backward` walks it once in reverse topological order and
deposits parameter gradients into a :class:`ParameterStore`.

Nodes whose inputs carry no gradient are created without a backward rule, so
the same code runs at plain-numpy cost when nothing is being trained.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    """One value in the computation graph.

    ``parents`` and ``vjp`` are only set when at least one input needs a
    gradient. ``vjp`` maps the output adjoint to a tuple of parent adjoints.
    """

    __slots__ = ("value", "parents", "vjp", "op", "param", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, op="const", param=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.param = param
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def detach(self) -> "Node":
        return Node(self.value)

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

    def __getitem__(self, idx):
        return index(self, idx)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _make(value, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), vjp, op, requires_grad=True)
    return Node(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Node, b: Node, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def matvec(w, x) -> Node:
    """Apply matrix ``w`` of shape (m, n) to the last axis of ``x`` (..., n)."""
    w, x = as_node(w), as_node(x)
    if w.ndim != 2 or x.ndim < 1 or w.shape[1] != x.shape[-1]:
        raise ShapeError(f"matvec: incompatible shapes {w.shape} and {x.shape}")
    wv, xv = w.value, x.value
    m, n = wv.shape
    x2 = xv.reshape(-1, n)
    lead = xv.shape[:-1]

    def vjp(g):
        g2 = g.reshape(-1, m)
        return g2.T @ x2, (g2 @ wv).reshape(xv.shape)

    return _make((x2 @ wv.T).reshape(lead + (m,)), (w, x), vjp, "matvec")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    with np.errstate(divide="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def clip(a, lo: float, hi: float) -> Node:
    a = as_node(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis) * (1.0 / n)


def logsumexp(a, axis: int = -1) -> Node:
    a = as_node(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(av - m).sum(axis=axis, keepdims=True)) + m

    def vjp(g):
        return (np.expand_dims(g, axis) * np.exp(av - out),)

    return _make(np.squeeze(out, axis=axis), (a,), vjp, "logsumexp")


def gather(a, idx: np.ndarray) -> Node:
    """Select rows along axis ``idx.ndim - 1`` of ``a`` by integer index.

    ``idx`` has the leading shape of ``a`` up to and including the gathered
    axis; e.g. particles (B, N, d) with ancestors (B, N). The indices are
    constants: no gradient flows into the selection itself.
    """
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value
    k = idx.ndim
    if av.shape[: k - 1] != idx.shape[:-1]:
        raise ShapeError(f"gather: incompatible shapes {av.shape} and {idx.shape}")
    lead = int(np.prod(av.shape[: k - 1], dtype=np.intp))
    n_src = av.shape[k - 1]
    n_out = idx.shape[-1]
    tail = av.shape[k:]
    flat = (idx.reshape(lead, n_out) + (np.arange(lead) * n_src)[:, None]).ravel()
    out = av.reshape((lead * n_src,) + tail)[flat].reshape(idx.shape + tail)

    def vjp(g):
        ga = np.zeros((lead * n_src,) + tail)
        np.add.at(ga, flat, g.reshape((lead * n_out,) + tail))
        return (ga.reshape(av.shape),)

    return _make(out, (a,), vjp, "gather")


def index(a, idx) -> Node:
    """Basic numpy indexing (slices, integers, index arrays)."""
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.value[idx], (a,), vjp, "index")


def expand_dims(a, axis: int) -> Node:
    a = as_node(a)
    shape = a.shape
    return _make(np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(shape),), "expand_dims")


def take(a, cols, axis: int = -1) -> Node:
    """Pick the given (distinct) positions along ``axis``."""
    a = as_node(a)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = cols
        ga[tuple(sl)] = g
        return (ga,)

    return _make(np.take(a.value, cols, axis=axis), (a,), vjp, "take")


def concat(parts: Sequence, axis: int = -1) -> Node:
    parts = [as_node(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(p.shape) for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(parts: Sequence, axis: int = 0) -> Node:
    parts = [as_node(p) for p in parts]
    try:
        out = np.stack([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes " + ", ".join(str(p.shape) for p in parts)) from None
    n = len(parts)
    return _make(out, parts, lambda g: tuple(np.squeeze(c, axis) for c in np.split(g, n, axis=axis)), "stack")


def broadcast_to(a, shape: tuple) -> Node:
    a = as_node(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: incompatible shapes {src} and {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def where(cond: np.ndarray, a, b) -> Node:
    a, b = as_node(a), as_node(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.value, b.value)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
        "where",
    )


def squared_error(a, b) -> Node:
    """Sum of squared differences over all entries."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "squared_error")
    d = a.value - b.value
    sa, sb = a.shape, b.shape
    return _make(
        np.sum(d * d),
        (a, b),
        lambda g: (_unbroadcast(2.0 * g * d, sa), _unbroadcast(-2.0 * g * d, sb)),
        "squared_error",
    )


def gaussian_logpdf(x, mean=0.0, log_std=0.0) -> Node:
    """Diagonal Gaussian log-density, summed over the last axis of ``x``."""
    x, mean, log_std = as_node(x), as_node(mean), as_node(log_std)
    try:
        shape = np.broadcast_shapes(x.shape, mean.shape, log_std.shape)
    except ValueError:
        raise ShapeError(f"gaussian_logpdf: incompatible shapes {x.shape} and {mean.shape}") from None
    if not shape:
        raise ShapeError("gaussian_logpdf: needs at least one axis")
    inv_std = np.exp(-log_std.value)
    z = (x.value - mean.value) * inv_std
    ls = np.broadcast_to(log_std.value, shape)
    out = -0.5 * np.sum(z * z, axis=-1) - np.sum(ls, axis=-1) - 0.5 * shape[-1] * LOG_2PI

    def vjp(g):
        g = g[..., None]
        gz = g * z * inv_std
        return (
            _unbroadcast(-gz, x.shape),
            _unbroadcast(gz, mean.shape),
            _unbroadcast(g * (z * z - 1.0), log_std.shape),
        )

    return _make(out, (x, mean, log_std), vjp, "gaussian_logpdf")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node, store: "ParameterStore | None" = None) -> "ParameterStore | None":
    """Accumulate d(root)/d(parameter) into ``store.grads``.

    Every node reachable from ``root`` is visited exactly once. Gradients are
    added to whatever ``store.grads`` already holds, so zero them first for a
    fresh gradient.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return store
    adj = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological(root)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            if store is not None and node.param in store.grads:
                store.grads[node.param] += g
            continue
        for parent, gp in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + gp
            else:
                adj[key] = gp
    return store


# ---------------------------------------------------------------------------
# parameters and networks
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named real arrays with paired gradient slots."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable = True

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.values[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {value.shape} does not match {self.values[name].shape}")
        self.values[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def node(self, name: str) -> Node:
        """A fresh leaf for ``name``; its adjoint lands in ``grads[name]``."""
        if not self.trainable:
            return Node(self.values[name])
        return Node(self.values[name], op="param", param=name, requires_grad=True)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def size(self) -> int:
        return int(np.sum([v.size for v in self.values.values()]))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self[k] = v

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()]) if self.values else np.zeros(0)

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()]) if self.grads else np.zeros(0)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, **self.values)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        store = cls()
        with np.load(Path(path)) as data:
            for name in data.files:
                store.add(name, data[name])
        return store


@contextmanager
def frozen(store: ParameterStore):
    """Within the block, parameters of ``store`` enter graphs as constants."""
    prev = store.trainable
    store.trainable = False
    try:
        yield store
    finally:
        store.trainable = prev


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Mlp:
    """Feed-forward net: tanh on hidden layers, identity on the output.

    Parameters live in ``store`` under ``{prefix}.W{k}`` / ``{prefix}.b{k}``.
    With ``zero_output=True`` the last layer starts at zero, so the net
    initially outputs zeros for every input.
    """

    def __init__(self, store: ParameterStore, prefix: str, widths: Iterable[int], rng: np.random.Generator,
                 zero_output: bool = False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"Mlp widths must be >= 2 positive integers, got {widths}")
        self.store = store
        self.prefix = prefix
        self.widths = widths
        self.names = []
        n_layers = len(widths) - 1
        for k in range(n_layers):
            w_name, b_name = f"{prefix}.W{k}", f"{prefix}.b{k}"
            if zero_output and k == n_layers - 1:
                w = np.zeros((widths[k + 1], widths[k]))
            else:
                w = glorot_uniform(rng, widths[k + 1], widths[k])
            store.add(w_name, w)
            store.add(b_name, np.zeros(widths[k + 1]))
            self.names.append((w_name, b_name))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x) -> Node:
        return mlp_forward(self, x)


def mlp_forward(net: Mlp, x) -> Node:
    x = as_node(x)
    if x.ndim < 1 or x.shape[-1] != net.in_dim:
        raise ShapeError(f"Mlp {net.prefix!r}: input shape {x.shape} does not match width {net.in_dim}")
    h = x
    last = len(net.names) - 1
    for k, (w_name, b_name) in enumerate(net.names):
        h = matvec(net.store.node(w_name), h) + net.store.node(b_name)
        if k < last:
            h = tanh(h)
    return h
