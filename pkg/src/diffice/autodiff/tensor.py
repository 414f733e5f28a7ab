"""Dense tensors with a reverse-mode gradient tape.

Images use NHWC layout throughout. Every op that contracts over features
(``matmul``, ``conv2d``) runs one GEMM per leading-batch element, so a
sample's result never depends on what else is in the batch.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOATS = (np.float32, np.float64)
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad_output=None) -> None:
        backward(self, grad_output)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make("div", out, (a, b), bw)


# -- elementwise unary --------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0

    def bw(g):
        return (g * mask,)

    return _make("relu", x.data * mask, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (x,), bw)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _make("log", out, (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * x.data,)

    return _make("square", x.data * x.data, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), bw)


# -- reductions ---------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make("mean", np.asarray(out, dtype=x.dtype), (x,), bw)


# -- shape ops ----------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make("transpose", np.transpose(x.data, axes), (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None

    def bw(g):
        return (_unbroadcast(g, x.shape),)

    return _make("broadcast_to", out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; a 2-D left operand is multiplied row by row."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim == 2:
        out = np.matmul(a.data[:, None, :], b.data)[:, 0, :]
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        if a.ndim == 2 and b.ndim == 2:
            ga = np.matmul(g[:, None, :], b.data.T)[:, 0, :]
            gb = a.data.T @ g
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bw)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. x: (N, H, W, C); w: (kh, kw, C, C_out); b: (C_out,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    cols3 = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wmat = w.data.reshape(kh * kw * c, co)
    out = np.matmul(cols3, wmat)
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {co} output channels")
        out = out + b.data
    out = out.reshape(n, ho, wo, co)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g3 = g.reshape(n, ho * wo, co)
        gx = gw = gb = None
        if x.requires_grad:
            if sh == sw == 1 and ph < kh and pw < kw:
                # stride-1 input gradient is a full correlation with the flipped kernel
                qh, qw = kh - 1 - ph, kw - 1 - pw
                gp = np.pad(g, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
                wf = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(kh * kw * co, c)
                gx = np.matmul(_im2col(gp, kh, kw, 1, 1, h, wd), wf).reshape(n, h, wd, c)
            else:
                dcols = np.matmul(g3, wmat.T).reshape(n, ho, wo, kh, kw, c)
                dxp = np.zeros(xp.shape, dtype=dcols.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += dcols[:, :, :, i, j, :]
                gx = dxp[:, ph : ph + h, pw : pw + wd, :]
        if w.requires_grad:
            gw = (cols3.reshape(-1, kh * kw * c).T @ g3.reshape(-1, co)).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g3.sum(axis=(0, 1))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make("conv2d", out, parents, bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """(N, Hp, Wp, C) padded input -> (N, ho*wo, kh*kw*C) patch matrix, (i, j, c) order."""
    n, c = xp.shape[0], xp.shape[3]
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    v = v[:, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho * wo, kh * kw * c)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial shape {x.shape[1:3]} not divisible by {k}")
    out = x.data.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def bw(g):
        g = np.repeat(np.repeat(g, k, axis=1), k, axis=2)
        return (g / (k * k),)

    return _make("avg_pool2d", out.astype(x.dtype), (x,), bw)


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=1), k, axis=2)

    def bw(g):
        return (g.reshape(n, h, k, w, k, c).sum(axis=(2, 4)),)

    return _make("upsample_nearest", out, (x,), bw)


# -- reverse pass -------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
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


def _backprop(output: Tensor, grad_output) -> dict[int, np.ndarray]:
    if not output.requires_grad:
        return {}
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
        grad_output = np.ones_like(output.data)
    grads = {id(output): np.asarray(grad_output, dtype=output.dtype)}
    for node in reversed(_topo(output)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


def backward(output: Tensor, grad_output=None) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf."""
    grads = _backprop(output, grad_output)
    for node in _topo(output) if output.requires_grad else ():
        if node.is_leaf and id(node) in grads:
            g = grads[id(node)].astype(node.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad(output: Tensor, inputs: Iterable[Tensor], grad_output=None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs the output does not depend on get zeros.
    """
    inputs = list(inputs)
    grads = _backprop(output, grad_output)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]
