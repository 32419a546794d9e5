"""Dense-tensor reverse-mode differentiation.

Values are numpy arrays. A :class:`Node` records the primitive that produced
it and a closure mapping its output gradient to gradients of its inputs.
Nodes that do not depend on any parameter carry no closure, so evaluation-only
forward passes cost no more than plain numpy.
"""
from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from . import kernels

LOG_FLOOR = 1e-12

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float64, "checked": True}


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _state["dtype"] = _DTYPES[name]


def get_dtype() -> type:
    return _state["dtype"]


def precision_name(dtype) -> str:
    return "f32" if np.dtype(dtype) == np.float32 else "f64"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def checked(flag: bool = True) -> Iterator[None]:
    old = _state["checked"]
    _state["checked"] = flag
    try:
        yield
    finally:
        _state["checked"] = old


def tensor(data, dtype=None) -> np.ndarray:
    """Validated dense float array.

    Float arrays keep their precision; anything else takes the active one.
    In checked mode NaN/Inf entries are rejected.
    """
    if dtype is None:
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        dtype = data.dtype if keep else _state["dtype"]
    arr = np.asarray(data, dtype=dtype)
    if _state["checked"] and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("value", "op", "inputs", "grad", "requires_grad", "name", "_backward")

    def __init__(self, value, op="leaf", inputs=(), backward=None,
                 requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.inputs = tuple(inputs)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.inputs

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

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


def parameter(value, name=None) -> Node:
    return Node(tensor(value), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(tensor(value))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, inputs, backward) -> Node:
    if any(n.requires_grad for n in inputs):
        return Node(value, op, inputs, backward, requires_grad=True)
    return Node(value, op)


# ---------------------------------------------------------------- convolution

def conv1d(x, kernels_, bias, pad: int | None = None) -> Node:
    """Length-preserving cross-correlation with replication padding.

    ``x`` is (C_in, L) or batched (B, C_in, L); ``kernels_`` is (C_out, C_in, k).
    """
    x, w, b = as_node(x), as_node(kernels_), as_node(bias)
    cout, cin, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel length must be odd, got {k}")
    if pad is not None and pad != k // 2:
        raise ConfigError(f"replication pad must be {k // 2} for kernel {k}, got {pad}")
    unbatched = x.value.ndim == 2
    xv = x.value[None] if unbatched else x.value
    if xv.ndim != 3 or xv.shape[1] != cin:
        raise ShapeError(f"conv1d expects {cin} input channels, got shape {x.shape}")
    if b.shape != (cout,):
        raise ShapeError(f"conv1d bias must have shape ({cout},), got {b.shape}")
    B, _, L = xv.shape
    cols = kernels.im2col(xv, k)  # (B, L, cin*k)
    wm = w.value.reshape(cout, cin * k)
    out = (cols.reshape(B * L, cin * k) @ wm.T).reshape(B, L, cout)
    out = out.transpose(0, 2, 1) + b.value[:, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def backward(g):
        g3 = g[None] if unbatched else g
        g2 = np.ascontiguousarray(g3.transpose(0, 2, 1)).reshape(B * L, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.col2im((g2 @ wm).reshape(B, L, cin * k), cin, k)
            if unbatched:
                gx = gx[0]
        if w.requires_grad:
            gw = (g2.T @ cols.reshape(B * L, cin * k)).reshape(cout, cin, k)
        if b.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make(out, "conv1d", (x, w, b), backward)


def maxpool1d(x, pool: int) -> Node:
    """Non-overlapping max pooling; trailing remainder samples are dropped."""
    x = as_node(x)
    if pool < 1:
        raise ConfigError(f"pool must be >= 1, got {pool}")
    unbatched = x.value.ndim == 2
    xv = x.value[None] if unbatched else x.value
    L = xv.shape[-1]
    if pool > L:
        raise ShapeError(f"pool {pool} exceeds length {L}: empty output")
    out, idx = kernels.maxpool_fwd(xv, pool)
    if unbatched:
        out = out[0]

    def backward(g):
        g3 = g[None] if unbatched else g
        gx = kernels.maxpool_bwd(np.ascontiguousarray(g3), idx, L)
        return (gx[0] if unbatched else gx,)

    return _make(out, "maxpool1d", (x,), backward)


# ---------------------------------------------------------------- elementwise

def _pair(a, b) -> tuple[Node, Node]:
    # scalars adopt the partner's dtype so f32 graphs stay f32
    if not isinstance(a, Node) and isinstance(b, Node):
        a = Node(tensor(a, b.value.dtype))
    if not isinstance(b, Node) and isinstance(a, Node):
        b = Node(tensor(b, a.value.dtype))
    return as_node(a), as_node(b)


def _check_pair(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Node:
    a, b = _pair(a, b)
    _check_pair(a, b, "add")
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    _check_pair(a, b, "sub")
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    _check_pair(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a, factor: float) -> Node:
    a = as_node(a)
    factor = a.value.dtype.type(factor)
    return _make(a.value * factor, "scale", (a,), lambda g: (g * factor,))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0  # zero subgradient at 0
    return _make(a.value * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Node:
    a = as_node(a)
    v = a.value
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1 - s),))


def log(a, clamp: bool = True) -> Node:
    """Natural log; inputs are clamped to ``LOG_FLOOR`` unless ``clamp`` is off."""
    a = as_node(a)
    v = a.value
    if clamp:
        live = v >= LOG_FLOOR
        safe = np.where(live, v, LOG_FLOOR)
    else:
        if np.any(v <= 0):
            raise ValueError("log of nonpositive value")
        live = None
        safe = v

    def backward(g):
        gx = g / safe
        return (gx * live if live is not None else gx,)

    return _make(np.log(safe), "log", (a,), backward)


# ---------------------------------------------------------------- affine / shape

def dense(x, weight, bias) -> Node:
    """``weight @ x + bias``; a (B, n) input maps each row independently."""
    x, w, b = as_node(x), as_node(weight), as_node(bias)
    m, n = w.shape
    if x.shape[-1] != n or x.value.ndim not in (1, 2):
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (m,):
        raise ShapeError(f"dense: bias must have shape ({m},), got {b.shape}")
    xv, wv = x.value, w.value
    out = xv @ wv.T + b.value

    def backward(g):
        gx = g @ wv if x.requires_grad else None
        gw = gb = None
        if w.requires_grad:
            gw = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        if b.requires_grad:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return _make(out, "dense", (x, w, b), backward)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def flatten(a) -> Node:
    """Collapse all but the leading (batch) axis."""
    a = as_node(a)
    return reshape(a, (a.shape[0], -1))


def sum_(a) -> Node:
    a = as_node(a)
    shape = a.shape
    return _make(np.asarray(a.value.sum()), "sum", (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(a.value.dtype),))


def mean(a) -> Node:
    a = as_node(a)
    n = a.value.size
    return scale(sum_(a), 1.0 / n)


def mse(pred, target) -> Node:
    """Mean squared error between two equally shaped nodes."""
    pred, target = as_node(pred), as_node(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.value - target.value
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def backward(g):
        gp = g * (2.0 / n) * diff
        return gp, -gp

    return _make(out, "mse", (pred, target), backward)


def batchnorm1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Node:
    """Per-channel normalisation of (B, C, L) activations.

    In training mode batch statistics are used and the running buffers are
    updated in place.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    xv = x.value
    if training:
        mu = xv.mean(axis=(0, 2))
        var = xv.var(axis=(0, 2))
        n = xv.shape[0] * xv.shape[2]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[:, None]) * inv[:, None]
    out = (gamma.value[:, None] * xhat + beta.value[:, None]).astype(xv.dtype)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * gamma.value[:, None]
        if training:
            m = xv.shape[0] * xv.shape[2]
            gx = (inv[:, None] / m) * (
                m * gxhat - gxhat.sum(axis=(0, 2))[:, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2))[:, None])
        else:
            gx = gxhat * inv[:, None]
        return gx.astype(xv.dtype), gg, gb

    return _make(out, "batchnorm1d", (x, gamma, beta), backward)


# ---------------------------------------------------------------- backward

def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(parameter) for every parameter reachable from ``root``.

    Returns a map from parameter leaf to gradient and also stores each
    gradient on ``leaf.grad``.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    result: dict[Node, np.ndarray] = {}
    if not root.requires_grad:
        return result
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            result[node] = g
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result
