"""Dense float tensors with reverse-mode automatic differentiation.

Values are plain numpy arrays (float32 for training/inference, float64 for
gradient-check tests).  A ``Node`` wraps one array together with the local
backward rules that connect it to its inputs; graphs are rebuilt on every
forward pass (define-by-run) and freed when the nodes go out of scope.

Broadcasting is restricted to dims that match exactly or are size 1; anything
else needs an explicit reshape.  Every op checks its output for NaN/Inf and
raises ``NonFiniteError`` instead of letting bad values propagate, because the
codec's closed loop cannot tolerate silent numeric corruption.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFiniteError

__all__ = [
    "Node",
    "add",
    "sub",
    "mul",
    "div",
    "square",
    "sqrt",
    "absolute",
    "leaky_relu",
    "clamp_min",
    "reduce_sum",
    "reduce_mean",
    "conv2d",
    "conv2d_raw",
    "backward",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(x, like: np.ndarray | None = None) -> np.ndarray:
    if isinstance(x, np.ndarray):
        if x.dtype.type not in _FLOAT_DTYPES:
            raise TypeError(f"tensor dtype must be float32 or float64, got {x.dtype}")
        return x
    dtype = like.dtype if like is not None else np.float64
    return np.asarray(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Node:
    """One vertex of the autodiff graph: a value plus links to its inputs.

    ``parents`` holds ``(node, pull)`` pairs where ``pull(grad_out)`` returns
    that parent's gradient contribution.  ``grad`` is allocated lazily by
    ``backward``; repeated backward calls accumulate into it.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value: np.ndarray, parents=(), requires_grad: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents: tuple = parents
        self.requires_grad = requires_grad

    @classmethod
    def param(cls, value: np.ndarray) -> "Node":
        return cls(_as_array(value), (), requires_grad=True)

    @classmethod
    def const(cls, value: np.ndarray) -> "Node":
        return cls(_as_array(value), (), requires_grad=False)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar; plain numbers are wrapped as constants of the same dtype
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self))

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"


def _wrap(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return Node.const(np.asarray(x, dtype=like.dtype))


def make_node(op: str, value: np.ndarray, parents) -> Node:
    """Build an op output node, dropping backward rules for constant inputs.

    Exposed so sibling modules can define composite ops (e.g. the Gaussian
    interval likelihood) with hand-derived backward rules.
    """
    _check_finite(value, op)
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Node(value, live, requires_grad=bool(live))


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_shapes(op: str, sa: tuple, sb: tuple) -> None:
    if len(sa) != len(sb) and sa != () and sb != ():
        raise ValueError(f"{op}: rank mismatch {sa} vs {sb}; reshape explicitly")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: shapes {sa} and {sb} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original input shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _dtype_of(op: str, *nodes: Node):
    dt = nodes[0].dtype
    for n in nodes[1:]:
        if n.dtype != dt:
            raise TypeError(f"{op}: mixed dtypes {dt} and {n.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Node, b: Node) -> Node:
    _dtype_of("add", a, b)
    _broadcast_shapes("add", a.shape, b.shape)
    out = a.value + b.value
    return make_node("add", out, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a: Node, b: Node) -> Node:
    _dtype_of("sub", a, b)
    _broadcast_shapes("sub", a.shape, b.shape)
    out = a.value - b.value
    return make_node("sub", out, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ))


def mul(a: Node, b: Node) -> Node:
    _dtype_of("mul", a, b)
    _broadcast_shapes("mul", a.shape, b.shape)
    out = a.value * b.value
    return make_node("mul", out, (
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ))


def div(a: Node, b: Node) -> Node:
    _dtype_of("div", a, b)
    _broadcast_shapes("div", a.shape, b.shape)
    if np.any(b.value == 0):
        raise ZeroDivisionError("div: denominator contains zero")
    out = a.value / b.value
    inv = 1.0 / b.value
    return make_node("div", out, (
        (a, lambda g: _unbroadcast(g * inv, a.shape)),
        (b, lambda g: _unbroadcast(-g * out * inv, b.shape)),
    ))


def square(a: Node) -> Node:
    out = a.value * a.value
    return make_node("square", out, ((a, lambda g: g * (2.0 * a.value)),))


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.value)

    def pull(g):
        if np.any(out == 0):
            raise NonFiniteError("sqrt: gradient at zero is unbounded")
        return g * (0.5 / out)

    return make_node("sqrt", out, ((a, pull),))


def absolute(a: Node) -> Node:
    out = np.abs(a.value)
    return make_node("abs", out, ((a, lambda g: g * np.sign(a.value)),))


def leaky_relu(a: Node, slope: float = 0.01) -> Node:
    # slope is a fixed constant, never a learned parameter
    mask = a.value > 0
    out = np.where(mask, a.value, a.dtype.type(slope) * a.value)
    factor = np.where(mask, a.dtype.type(1.0), a.dtype.type(slope))
    return make_node("leaky_relu", out, ((a, lambda g: g * factor),))


def clamp_min(a: Node, floor: float) -> Node:
    out = np.maximum(a.value, a.dtype.type(floor))
    keep = a.value >= floor  # gradient is zero at clamped points
    return make_node("clamp_min", out, ((a, lambda g: g * keep),))


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(a: Node) -> Node:
    if a.value.size == 0:
        raise ValueError("reduce: empty tensor")
    out = np.asarray(a.value.sum(), dtype=a.dtype).reshape(())
    return make_node("sum", out, ((a, lambda g: np.full_like(a.value, g)),))


def reduce_mean(a: Node) -> Node:
    if a.value.size == 0:
        raise ValueError("reduce: empty tensor")
    n = a.value.size
    out = np.asarray(a.value.sum() / n, dtype=a.dtype).reshape(())
    return make_node("mean", out, ((a, lambda g: np.full_like(a.value, g / n)),))


# ---------------------------------------------------------------------------
# convolution (stride 1, cross-correlation)

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*kh*kw, Ho*Wo) patch matrix, row-major over (C, kh, kw)."""
    c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, ho, wo), (s0, s1, s2, s1, s2), writeable=False
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, hp: int, wp: int) -> np.ndarray:
    ho, wo = hp - kh + 1, wp - kw + 1
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    view = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + ho, j : j + wo] += view[:, i, j]
    return out


def _conv_validate(x_shape, w_shape, b_shape, padding: int) -> None:
    if len(w_shape) != 4:
        raise ValueError(f"conv2d: weight must be 4-d, got {w_shape}")
    if len(x_shape) != 3 or x_shape[0] != w_shape[1]:
        raise ValueError(f"conv2d: input {x_shape} incompatible with weight {w_shape}")
    if b_shape is not None and b_shape != (w_shape[0],):
        raise ValueError(f"conv2d: bias shape {b_shape} != ({w_shape[0]},)")
    if padding < 0:
        raise ValueError("conv2d: negative padding")
    if x_shape[1] + 2 * padding < w_shape[2] or x_shape[2] + 2 * padding < w_shape[3]:
        raise ValueError(f"conv2d: kernel {w_shape[2:]} larger than padded input")


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, padding: int) -> np.ndarray:
    """Plain-array 2-D cross-correlation, shared by the autodiff op and the codec path."""
    _conv_validate(x.shape, w.shape, None if b is None else b.shape, padding)
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw)
    out = w.reshape(c_out, -1) @ cols
    if b is not None:
        out += b[:, None]
    return out.reshape(c_out, xp.shape[1] - kh + 1, xp.shape[2] - kw + 1)


def conv2d(x: Node, w: Node, b: Node | None, padding: int) -> Node:
    """Stride-1 cross-correlation of (C_in,H,W) with (C_out,C_in,Kh,Kw) plus bias."""
    nodes = (x, w) if b is None else (x, w, b)
    _dtype_of("conv2d", *nodes)
    _conv_validate(x.shape, w.shape, None if b is None else b.shape, padding)
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding))) if padding else x.value
    hp, wp = xp.shape[1], xp.shape[2]
    cols = _im2col(xp, kh, kw)
    w_mat = w.value.reshape(c_out, -1)
    out = w_mat @ cols
    if b is not None:
        out += b.value[:, None]
    out = out.reshape(c_out, hp - kh + 1, wp - kw + 1)

    def pull_x(g):
        gcols = w_mat.T @ g.reshape(c_out, -1)
        gx = _col2im(gcols, c_in, kh, kw, hp, wp)
        if padding:
            gx = gx[:, padding:-padding, padding:-padding]
        return gx

    def pull_w(g):
        return (g.reshape(c_out, -1) @ cols.T).reshape(w.shape)

    parents = [(x, pull_x), (w, pull_w)]
    if b is not None:
        parents.append((b, lambda g: g.sum(axis=(1, 2))))
    return make_node("conv2d", out, tuple(parents))


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root: Node) -> list[Node]:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every reachable node that requires it.

    ``loss`` must be scalar.  Gradients for this call are computed in a local
    map and then added into each node's ``grad``, so repeated backward calls
    (and shared parameters across several graphs) accumulate.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")

    order = _toposort(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = local.get(id(node))
        if g is None:
            continue
        for parent, pull in node.parents:
            contrib = pull(g)
            key = id(parent)
            if key in local:
                local[key] = local[key] + contrib
            else:
                local[key] = contrib
    for node in order:
        g = local.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(np.broadcast_to(g, node.value.shape), dtype=node.dtype)
        else:
            node.grad = node.grad + g


def grad_check(f: Callable[[], Node], params: list[Node], eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` rebuilds the graph from ``params`` on every call and must be
    deterministic.  Per parameter, the error is the infinity norm of the
    difference normalized by the larger of the two gradient norms, so
    elements whose true gradient is zero do not blow up the ratio.  Use
    float64 parameters; single precision is too noisy for differencing.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [
        np.array(p.grad, copy=True) if p.grad is not None else np.zeros_like(p.value)
        for p in params
    ]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().value)
            flat[i] = orig - eps
            lo = float(f().value)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
        denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
        err = float(np.abs(a - numeric).max(initial=0.0)) / denom
        worst = max(worst, err)
    return worst
