"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the result keeps a reference to its parents and a closure that maps
the upstream gradient to one gradient per parent. :func:`backward` walks the
graph once in reverse topological order.

Graph-linked tensors are never mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

LOG_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5

# tanh approximation of GELU
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
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
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    """Broadcasting sum."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None,
                            _unbroadcast(g, sb) if rb else None), "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("subtract", a, b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None,
                            _unbroadcast(-g, sb) if rb else None), "subtract")


def multiply(a, b) -> Tensor:
    """Broadcasting elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("multiply", a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if ra else None,
                _unbroadcast(g * ad, bd.shape) if rb else None)

    return _make(ad * bd, (a, b), backward, "multiply")


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * d,)

    return _make(out, (a,), backward, "gelu")


def identity(a) -> Tensor:
    return as_tensor(a)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; gradient is zero where the floor is active."""
    a = as_tensor(a)
    x = a.data
    if floor > 0.0:
        active = x > floor
        clipped = np.where(active, x, floor)
    else:
        active = None
        clipped = x
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(clipped)

    def backward(g):
        gx = g / clipped
        if active is not None:
            gx = np.where(active, gx, 0.0)
        return (gx,)

    return _make(out, (a,), backward, "log")


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        ga = gb = None
        if ra:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if rb:
            if bd.ndim == 2:
                # fold leading axes instead of a batched outer product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def slice_(a, index) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    a = as_tensor(a)
    if isinstance(index, (list, np.ndarray)) or (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    ):
        raise ShapeError(f"slice: advanced indexing unsupported on shape {a.shape}")
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(np.array(out), (a,), backward, "slice")


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    inv = 1.0 / n
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,),
                 lambda g: (_expand(g * inv, shape, axis, keepdims),), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------- composite


def softmax(logits, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    z = as_tensor(logits)
    if not -z.ndim <= axis < z.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {z.shape}")
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (z,), backward, "softmax")


def layer_norm(h, gain, bias, epsilon: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    h, gain, bias = as_tensor(h), as_tensor(gain), as_tensor(bias)
    d = h.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {h.shape}")
    x = h.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv_std
    gd = gain.data

    def backward(g):
        gxhat = g * gd
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (h, gain, bias), backward, "layer_norm")


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "concat": concat,
    "slice": slice_,
    "mean": mean,
    "sum": sum_,
    "relu": relu,
    "gelu": gelu,
    "exp": exp,
    "log": log,
    "reshape": reshape,
    "transpose": transpose,
    "softmax": softmax,
    "layer_norm": layer_norm,
}


def op_apply(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a registered op by name."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ContractError(f"unknown op {op!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Graph-linked ancestors of ``root`` (inclusive), parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not graph-linked to any trainable leaf")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tolerance: float
    worst_index: list[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5,
               tolerance: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` is re-evaluated with each coordinate of each leaf shifted by
    ``+-step``. Per coordinate the relative error is
    ``|a - n| / max(|a|, |n|, floor)``; the report keeps the maximum per leaf.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    for leaf in leaves:
        leaf.grad = None
    loss = f()
    _check_finite(loss, "loss at base point")
    backward(loss)
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    errors, worst = [], []
    for li, leaf in enumerate(leaves):
        base = leaf.data.copy()
        numeric = np.zeros(leaf.shape)
        for idx in np.ndindex(*leaf.shape):
            plus = base.copy()
            plus[idx] += step
            leaf.data = plus
            fp = f()
            _check_finite(fp, f"leaf {li} coordinate {idx} (+step)")
            minus = base.copy()
            minus[idx] -= step
            leaf.data = minus
            fm = f()
            _check_finite(fm, f"leaf {li} coordinate {idx} (-step)")
            numeric[idx] = (fp.item() - fm.item()) / (2.0 * step)
        leaf.data = base
        a = analytic[li]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        rel = np.abs(a - numeric) / denom
        if rel.size:
            k = np.unravel_index(int(np.argmax(rel)), rel.shape)
            errors.append(float(rel[k]))
            worst.append(tuple(int(i) for i in k))
        else:
            errors.append(0.0)
            worst.append(())
    for leaf in leaves:
        leaf.grad = None
    return GradCheckReport(errors, tolerance, worst)


def _check_finite(t: Tensor, where: str) -> None:
    bad = ~np.isfinite(t.data)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericalError(f"non-finite value at {loc} ({where})")
