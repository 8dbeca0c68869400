"""Define-by-run reverse-mode differentiation over numpy arrays.

Every op in this module returns a new :class:`Tensor`. When gradient
recording is enabled and at least one input requires a gradient, the output
keeps a reference to its parents and a closure that maps the output gradient
to one gradient per parent. :func:`backward` walks that graph once.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()
_auto_names = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
    return np.asarray(arr, dtype=dtype, order="C")


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        if self.requires_grad and name is None:
            name = f"tensor{next(_auto_names)}"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, op={self._op})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _node(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Elementwise (pred - target)**2."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error: shapes {pred.shape} and {target.shape} differ")
    d = pred.data - target.data

    def backward(g):
        gd = 2.0 * d * g
        return gd, -gd

    return _node(d * d, (pred, target), backward, "squared_error")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def backward(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _node(x * s, (a,), backward, "silu")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"linear": identity, "identity": identity, "relu": relu, "silu": silu}


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared 2-D right operand: fold leading axes into rows
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
        return _node(out, (a, b), backward_flat, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.array(a.data[index], order="C"), (a,), backward, "getitem")


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[i] for i in axes]))
    scale = 1.0 / count

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, src).copy(),)

    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return _node(out, (a,), backward, "mean")


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed entries."""
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, x.shape).any(axis=-1).all():
            raise ShapeError("softmax: a row has every entry masked")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(a.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), backward, "softmax")


def _normalize_backward(gxhat, xhat, rstd, axes):
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return rstd * (gxhat - m1 - xhat * m2)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs features {d}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = _normalize_backward(g * gd, xhat, rstd, -1)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + beta.data, (a, gamma, beta), backward, "layer_norm")


def group_norm(a: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of a channels-last [N, H, W, C] tensor."""
    x = a.data
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected [N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    xg = x.reshape(n, h, w, groups, c // groups)
    axes = (1, 2, 4)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * rstd).reshape(x.shape)
    gd = gamma.data

    def backward(g):
        gxhat = (g * gd).reshape(xg.shape)
        gx = _normalize_backward(gxhat, xhat.reshape(xg.shape), rstd, axes).reshape(x.shape)
        return gx, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    return _node(xhat * gd + beta.data, (a, gamma, beta), backward, "group_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].ravel()[0]
        raise IndexError(f"embedding: id {int(bad)} outside table of {v} rows")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.ravel(), g.reshape(-1, shape[1]))
        return (out,)

    return _node(table.data[ids], (table,), backward, "embedding")


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Channels-last 2-D convolution, ``weight`` is [k, k, C_in, C_out], same padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected [N,H,W,C] input and [k,k,Cin,Cout] weight, got {x.shape}, {weight.shape}")
    k = weight.shape[0]
    n, h, w, cin = x.shape
    if weight.shape[1] != k or weight.shape[2] != cin:
        raise ShapeError(f"conv2d: weight {weight.shape} does not match input {x.shape}")
    cout = weight.shape[3]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {cout} output channels")
    pad = k // 2
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.empty((n, ho, wo, k, k, cin), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    cols2 = cols.reshape(n * ho * wo, k * k * cin)
    w2 = weight.data.reshape(k * k * cin, cout)
    out = (cols2 @ w2).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data
    xshape, pshape = x.shape, xp.shape

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(weight.shape)
        gcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad:pad + xshape[1], pad:pad + xshape[2], :] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected [N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(g):
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return _node(out, (x,), backward, "upsample_nearest")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Differentiate a scalar ``loss`` and return gradients keyed by leaf name.

    Only leaves with ``requires_grad`` that are reachable from ``loss`` appear
    in the result. Each leaf's ``grad`` attribute accumulates as well. The
    graph is released afterwards, so a second call on the same loss raises.
    """
    if loss.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; run a new forward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    result: dict[str, np.ndarray] = {}
    owners: dict[str, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._consumed:
            raise GraphError("backward: graph already consumed; run a new forward pass")
        if g is None:
            continue
        if node._backward is None:
            if node.name in owners and owners[node.name] is not node:
                raise GraphError(f"backward: two distinct leaves share the name {node.name!r}")
            owners[node.name] = node
            result[node.name] = g
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    return result
