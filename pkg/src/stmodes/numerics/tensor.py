"""Dense float64 tensors with reverse-mode gradient accumulation.

Every operation records its parents and a backward closure on the result.
Calling :func:`backward` on a scalar replays the recorded operations in
reverse creation order, which is a valid topological order because a result
is always created after its inputs.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import InvalidInputError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "einsum",
    "sum",
    "mean",
    "abs",
    "abs_sum",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "soft_threshold",
    "conv2d",
    "reshape",
    "transpose",
]

_creation = itertools.count()
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "stmodes_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread / context)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._order = next(_creation)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64, order="C")
        out.grad = None
        out._order = next(_creation)
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidInputError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise InvalidInputError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._order in nodes:
            continue
        nodes[node._order] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    pending: dict[int, np.ndarray] = {loss._order: np.ones_like(loss.data)}
    for order in sorted(nodes, reverse=True):
        node = nodes[order]
        g = pending.pop(order, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = parent._order
            pending[key] = pg if key not in pending else pending[key] + pg


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    a = _as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


# -- contractions ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidInputError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), bw)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` with an explicit ``->`` output.

    Each input term must list distinct indices (no traces / diagonals).
    """
    ops = [_as_tensor(o) for o in operands]
    spec = subscripts.replace(" ", "")
    if "->" not in spec or "." in spec:
        raise InvalidInputError("einsum needs explicit output subscripts and no ellipsis")
    lhs, out_sub = spec.split("->")
    terms = lhs.split(",")
    if len(terms) != len(ops):
        raise InvalidInputError(f"einsum got {len(ops)} operands for {len(terms)} terms")
    sizes: dict[str, int] = {}
    for term, op in zip(terms, ops):
        if len(set(term)) != len(term):
            raise InvalidInputError(f"repeated index within term {term!r} is not supported")
        if len(term) != op.ndim:
            raise InvalidInputError(f"term {term!r} does not match operand shape {op.shape}")
        for ch, n in zip(term, op.shape):
            if sizes.setdefault(ch, n) != n:
                raise InvalidInputError(f"einsum size mismatch on index {ch!r}: {sizes[ch]} vs {n}")

    data = np.einsum(spec, *(o.data for o in ops), optimize=True)

    def bw(g):
        grads = []
        for i, (term, op) in enumerate(zip(terms, ops)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [t for j, t in enumerate(terms) if j != i]
            arrays = [o.data for j, o in enumerate(ops) if j != i]
            available = set(out_sub).union(*others) if others else set(out_sub)
            missing = [ch for ch in term if ch not in available]
            if missing:
                # index summed out entirely inside this operand: broadcast back
                reduced = "".join(ch for ch in term if ch in available)
                part = np.einsum(",".join([out_sub, *others]) + "->" + reduced, g, *arrays,
                                 optimize=True)
                expand = tuple(term.index(ch) for ch in missing)
                part = np.expand_dims(part, expand)
                grads.append(np.broadcast_to(part, op.shape).copy())
            else:
                grads.append(np.einsum(",".join([out_sub, *others]) + "->" + term, g, *arrays,
                                       optimize=True))
        return tuple(grads)

    return Tensor._result(np.asarray(data), ops, bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / float(count))


# -- pointwise nonlinearities -------------------------------------------------

def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def abs_sum(a) -> Tensor:
    """Sum of absolute values (the L1 norm), subgradient 0 at 0."""
    return sum(abs(a))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _stable_sigmoid(a.data)
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return Tensor._result(out, (a,), lambda g: (g * _stable_sigmoid(a.data),))


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows by default)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (a,), bw)


def soft_threshold(a, phi) -> Tensor:
    """Shrinkage ``sign(a) * max(|a| - phi, 0)``; phi may be a scalar tensor.

    The subgradient on the set ``|a| == phi`` is taken as 0.
    """
    a, phi = _as_tensor(a), _as_tensor(phi)
    if phi.data.size != 1:
        raise InvalidInputError(f"threshold must be scalar, got shape {phi.shape}")
    if phi.data.reshape(-1)[0] < 0:
        raise InvalidInputError("threshold must be non-negative")
    mag = np.abs(a.data) - phi.data
    active = mag > 0
    sign = np.sign(a.data)
    out = np.where(active, sign * mag, 0.0)

    def bw(g):
        ga = g * active
        gphi = -(g * sign * active).sum()
        return ga, np.full(phi.shape, gphi)

    return Tensor._result(out, (a, phi), bw)


# -- convolution ----------------------------------------------------------------

def conv2d(x, w) -> Tensor:
    """Stride-1, same-padded 2-D convolution (cross-correlation).

    ``x`` is laid out ``[batch, height, channels, width]`` (nodes x channels x
    time in this package) and ``w`` is ``[c_in, c_out, kh, kw]`` with odd
    kernel sizes.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidInputError(f"conv2d needs 4-D input and kernel, got {x.shape}, {w.shape}")
    B, H, C, W = x.shape
    c_in, c_out, kh, kw = w.shape
    if c_in != C:
        raise InvalidInputError(f"kernel expects {c_in} input channels, input has {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidInputError("conv2d kernel sizes must be odd for same padding")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (0, 0), (pw, pw)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    # im2col: one row per output position, columns ordered (channel, offset)
    cols = np.stack([xp[:, i:i + H, :, j:j + W] for i, j in offsets], axis=-1)  # [B,H,C,W,P]
    cols = cols.transpose(0, 1, 3, 2, 4).reshape(B * H * W, C * len(offsets))
    wmat = w.data.transpose(0, 2, 3, 1).reshape(C * len(offsets), c_out)
    out = (cols @ wmat).reshape(B, H, W, c_out).transpose(0, 1, 3, 2)

    def bw(g):
        g2 = g.transpose(0, 1, 3, 2).reshape(B * H * W, c_out)
        gw = (cols.T @ g2).reshape(C, kh, kw, c_out).transpose(0, 3, 1, 2)
        gcols = (g2 @ wmat.T).reshape(B, H, W, C, len(offsets)).transpose(0, 1, 3, 2, 4)
        gxp = np.zeros_like(xp)
        for p, (i, j) in enumerate(offsets):
            gxp[:, i:i + H, :, j:j + W] += gcols[..., p]
        return gxp[:, ph:ph + H, :, pw:pw + W], gw

    return Tensor._result(out, (x, w), bw)


# -- shape manipulation ---------------------------------------------------------

def reshape(a, shape: Iterable[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))
