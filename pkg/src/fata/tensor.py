"""Dense numpy tensors with tape-style reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.
``backward`` orders the recorded graph topologically and replays it once in
reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Input shapes violate an op's broadcasting or contraction rules."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


def get_default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the float width (64-bit is used by gradient oracles)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype.type is not _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result(out, "div", (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _result(out, "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _result(out, "gelu", (a,), grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` the input is clamped from below first."""
    a = as_tensor(a)
    if eps > 0:
        x = np.maximum(a.data, eps)
        live = a.data > eps
        return _result(np.log(x), "log", (a,), lambda g: (g * live / x,))
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, "softmax", (a,), grad_fn)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in axes:
        g = np.expand_dims(g, ax)
    return g


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _result(
        out,
        "sum",
        (a,),
        lambda g: (np.broadcast_to(_expand(g, axes, keepdims), a.shape),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _result(
        out,
        "mean",
        (a,),
        lambda g: (np.broadcast_to(_expand(g, axes, keepdims), a.shape) / n,),
    )


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the reduced element count)."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered**2).mean(axis=axes, keepdims=keepdims)
    return _result(
        out,
        "var",
        (a,),
        lambda g: (_expand(g, axes, keepdims) * 2.0 * centered / n,),
    )


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties send the gradient to the first maximiser."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.expand_dims(a.data.argmax(axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g if keepdims else np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _result(out, "max", (a,), grad_fn)


def argmax(a, axis: int = -1) -> np.ndarray:
    """Integer indices; not differentiable, so a plain array is returned."""
    return as_tensor(a).data.argmax(axis=axis)


def pick(a, index) -> Tensor:
    """Gather ``a[..., index[...]]`` along the last axis (one entry per row)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError("pick", a.shape, index.shape)
    idx = index[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _result(out, "pick", (a,), grad_fn)


# ---------------------------------------------------------------- shape / linear algebra


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


_OFFSETS = tuple((di, dj) for di in range(3) for dj in range(3))


def _im2col(x: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [B*H*W, 9*C], columns ordered (kh, kw, c)."""
    B, C, H, W = x.shape
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, di : di + H, dj : dj + W, :] for di, dj in _OFFSETS], axis=-1)
    return cols.reshape(B * H * W, 9 * C)


def conv2d(x, w) -> Tensor:
    """3x3, stride 1, zero 'same' padding. x: [B,Cin,H,W], w: [Cout,Cin,3,3]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    cout = w.shape[0]
    cols = _im2col(x.data)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, 9 * C)
    out = (cols @ wmat.T).reshape(B, H, W, cout).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
        gw = (gflat.T @ cols).reshape(cout, 3, 3, C).transpose(0, 3, 1, 2)
        gcols = (gflat @ wmat).reshape(B, H, W, 9, C)
        gxp = np.zeros((B, H + 2, W + 2, C), dtype=g.dtype)
        for k, (di, dj) in enumerate(_OFFSETS):
            gxp[:, di : di + H, dj : dj + W, :] += gcols[:, :, :, k, :]
        return gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2), gw

    return _result(np.ascontiguousarray(out), "conv2d", (x, w), grad_fn)


# ---------------------------------------------------------------- stop-gradient and backward


def stop_gradient(a) -> Tensor:
    """Same values, cut from the graph: nothing flows back through the result."""
    a = as_tensor(a)
    out = Tensor(a.data.copy())
    out.op = "stop_gradient"
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradient map keyed by ``id(leaf)``.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must have exactly one element")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; zeros for unreachable ones."""
    params = list(params)
    for p in params:
        p.grad = None
    leaves = backward(loss)
    return [leaves.get(id(p), np.zeros_like(p.data)) for p in params]
