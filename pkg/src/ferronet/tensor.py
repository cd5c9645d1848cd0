"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable op returns a new :class:`Tensor` that keeps references to
its inputs plus a closure mapping the output gradient to input gradients.
:meth:`Tensor.backward` orders that graph topologically (inputs before
outputs) and runs the closures in reverse, visiting every node once.

Convolutions use im2col + BLAS for dense kernels and a shift-and-multiply loop
for depthwise kernels. Column buffers are rebuilt during the backward pass
rather than kept alive, which keeps a ResNet18 step on 32x32 inputs inside a
few GB.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

DTYPE = np.float64
SQRT_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float64 array that can take part in backprop.

    ``data`` is a numpy array (row-major). ``grad`` is populated on leaves that
    have ``requires_grad`` set once :meth:`backward` has run on a loss that
    depends on them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    # ------------------------------------------------------------------ basics
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other):
        if _is_scalar(other):
            return add_scalar(self, other)
        return _broadcast_binary(self, _as_tensor(other), "add")

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return add_scalar(self, -other)
        return _broadcast_binary(self, _as_tensor(other), "sub")

    def __rsub__(self, other):
        return add_scalar(negate(self), other)

    def __mul__(self, other):
        if _is_scalar(other):
            return mul_scalar(self, other)
        return _broadcast_binary(self, _as_tensor(other), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise ContractError("only division by a scalar is supported")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return negate(self)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def relu(self) -> "Tensor":
        return relu(self)

    # ---------------------------------------------------------------- autodiff
    def backward(self) -> None:
        """Populate ``grad`` on every leaf this scalar depends on.

        Gradients add into existing ``grad`` arrays, so call ``zero_grad`` on
        parameters between steps. The recorded graph is released afterwards.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
        for node in order:
            node._parents = ()
            node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------- creation
def tensor_create(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major sequence of values (copied)."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ContractError(f"negative dimension in shape {shape}")
    flat = np.array(list(values) if not isinstance(values, np.ndarray) else values, dtype=DTYPE).reshape(-1)
    if flat.size != math.prod(shape):
        raise ContractError(f"shape {shape} needs {math.prod(shape)} values, got {flat.size}")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


# ------------------------------------------------------------ elementwise + arith
def _broadcast_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        if kind == "add":
            out = a.data + b.data
        elif kind == "sub":
            out = a.data - b.data
        else:
            out = a.data * b.data
    except ValueError as exc:
        raise ContractError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def backward(g):
        if kind == "add":
            return _unbroadcast(g, a_data.shape), _unbroadcast(g, b_data.shape)
        if kind == "sub":
            return _unbroadcast(g, a_data.shape), _unbroadcast(-g, b_data.shape)
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _node(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def sqrt_eps(x: Tensor, eps: float = SQRT_EPS) -> Tensor:
    """sqrt(x + eps); eps keeps the derivative finite at x == 0."""
    if np.any(x.data < 0):
        raise ContractError("sqrt_eps received a negative input")
    out = np.sqrt(x.data + eps)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def negate(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _node(x.data + c, (x,), lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: (g * c,))


_ELEMENTWISE = {
    "relu": relu,
    "exp": exp,
    "sqrt_eps": sqrt_eps,
    "negate": negate,
}


def elementwise(x: Tensor, fn: str, scalar: Optional[float] = None) -> Tensor:
    """Apply one of relu, exp, sqrt_eps, negate, add_scalar, mul_scalar."""
    if fn in _ELEMENTWISE:
        return _ELEMENTWISE[fn](x)
    if fn in ("add_scalar", "mul_scalar"):
        if scalar is None:
            raise ContractError(f"{fn} needs a scalar argument")
        return add_scalar(x, scalar) if fn == "add_scalar" else mul_scalar(x, scalar)
    raise ContractError(f"unknown elementwise function {fn!r}")


# ------------------------------------------------------------------ reductions
def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ContractError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ContractError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    if not axes:
        return x
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _node(out, (x,), backward)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axes``; an empty axis set returns ``x`` itself."""
    axes = _normalize_axes(axes, x.ndim)
    if not axes:
        return x
    count = math.prod(x.shape[a] for a in axes)
    if count == 0:
        raise ContractError("mean over an empty extent")
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _node(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    old = x.shape
    return _node(out, (x,), lambda g: (g.reshape(old),))


# ------------------------------------------------------------------ convolution
def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xcb: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channel-major columns [C*kh*kw, B*ho*wo] from a padded [C, B, Hp, Wp] array."""
    c, b = xcb.shape[:2]
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xcb[:, :, i:i + hspan:stride, j:j + wspan:stride]
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(dcols: np.ndarray, xcb_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c, b = xcb_shape[:2]
    d = dcols.reshape(c, kh, kw, b, ho, wo)
    dxcb = np.zeros(xcb_shape, dtype=DTYPE)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxcb[:, :, i:i + hspan:stride, j:j + wspan:stride] += d[:, i, j]
    return dxcb


def _dense_conv(xp: np.ndarray, w: np.ndarray, stride: int):
    cout, _, kh, kw = w.shape
    b = xp.shape[0]
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    wm = w.reshape(cout, -1)
    xcb = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    out = (wm @ _im2col(xcb, kh, kw, stride, ho, wo)).reshape(cout, b, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g: np.ndarray):
        gcb = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        dw = (gcb @ _im2col(xcb, kh, kw, stride, ho, wo).T).reshape(w.shape)
        dxcb = _col2im(wm.T @ gcb, xcb.shape, kh, kw, stride, ho, wo)
        return dxcb.transpose(1, 0, 2, 3), dw

    return out, backward


def _depthwise_conv(xp: np.ndarray, w: np.ndarray, stride: int):
    c, _, kh, kw = w.shape
    b = xp.shape[0]
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((b, c, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + hspan:stride, j:j + wspan:stride] * w[:, 0, i, j][None, :, None, None]

    def backward(g: np.ndarray):
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        dw = np.zeros(w.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
                dw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, window)
                dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += g * w[:, 0, i, j][None, :, None, None]
        return dxp, dw

    return out, backward


def _grouped_conv(xp: np.ndarray, w: np.ndarray, stride: int, groups: int):
    cin_g = xp.shape[1] // groups
    cout_g = w.shape[0] // groups
    parts = [
        _dense_conv(xp[:, k * cin_g:(k + 1) * cin_g], w[k * cout_g:(k + 1) * cout_g], stride)
        for k in range(groups)
    ]
    out = np.concatenate([p[0] for p in parts], axis=1)

    def backward(g: np.ndarray):
        dxs, dws = [], []
        for k, (_, back) in enumerate(parts):
            dx, dw = back(g[:, k * cout_g:(k + 1) * cout_g])
            dxs.append(dx)
            dws.append(dw)
        return np.concatenate(dxs, axis=1), np.concatenate(dws, axis=0)

    return out, backward


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w_ = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ContractError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ContractError(f"weight expects {cin_g} input channels per group, input gives {cin // groups}")
    if stride < 1 or padding < 0:
        raise ContractError(f"invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > w_ + 2 * padding:
        raise ContractError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w_ + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ContractError(f"bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if groups == 1:
        out, back = _dense_conv(xp, weight.data, stride)
    elif groups == cin and cout == cin:
        out, back = _depthwise_conv(xp, weight.data, stride)
    else:
        out, back = _grouped_conv(xp, weight.data, stride, groups)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        dxp, dw = back(g)
        dx = dxp[:, :, padding:padding + h, padding:padding + w_] if padding else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, backward)


def pool2d(x: Tensor, kind: str, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling over square windows.

    Max pooling pads with -inf and routes gradient to the first maximal element
    in scan order. Average pooling divides by ``kernel**2``.
    """
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pool kind {kind!r}")
    if x.ndim != 4:
        raise ContractError(f"pool2d expects a 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if kernel < 1 or stride < 1 or padding < 0:
        raise ContractError(f"invalid kernel {kernel} / stride {stride} / padding {padding}")
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ContractError(f"pool kernel {kernel} larger than input {h}x{w}")
    if kind == "avg" and padding:
        raise ContractError("average pooling does not take padding")

    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    if kind == "avg":
        if kernel == stride and h % kernel == 0 and w % kernel == 0:
            out = x.data.reshape(b, c, ho, kernel, wo, kernel).mean(axis=(3, 5))
        else:
            out = win.mean(axis=(4, 5))
        scale = 1.0 / (kernel * kernel)

        def backward(g):
            if kernel == stride and h % kernel == 0 and w % kernel == 0:
                gx = np.broadcast_to((g * scale)[:, :, :, None, :, None], (b, c, ho, kernel, wo, kernel))
                return (gx.reshape(b, c, h, w),)
            dx = np.zeros(x.shape, dtype=DTYPE)
            for i in range(kernel):
                for j in range(kernel):
                    dx[:, :, i:i + hspan:stride, j:j + wspan:stride] += g * scale
            return (dx,)

        return _node(out, (x,), backward)

    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += g * hit
        return (dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp,)

    return _node(out, (x,), backward)


# ------------------------------------------------------------- dense layers
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [B, F] and weight [O, F]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (g @ wd, g.T @ xd)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (running variance uses the unbiased batch
    variance). In eval mode the running buffers are used as-is.
    """
    if x.ndim != 4:
        raise ContractError(f"batch_norm2d expects 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError(f"gamma/beta must have shape ({c},)")
    n = b * h * w
    if n < 1:
        raise ContractError("batch_norm2d needs at least one value per channel")
    g4 = gamma.data[None, :, None, None]

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]

    def backward(g):
        dgamma = np.einsum("bchw,bchw->c", g, xhat)
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = np.einsum("bchw,bchw->c", dxhat, xhat)[None, :, None, None]
            dx = (dxhat - s1 / n - xhat * (s2 / n)) * inv_std[None, :, None, None]
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


# ------------------------------------------------------------------ combining
def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ContractError(f"concat_channels: {t.shape} incompatible with {ref}")
    sizes = [t.shape[1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=1)))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ContractError(f"upsample factor must be a positive integer, got {factor!r}")
    if x.ndim != 4:
        raise ContractError(f"upsample expects a 4-d input, got {x.shape}")
    if factor == 1:
        return x
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, factor, w, factor)).reshape(b, c, h * factor, w * factor)
    return _node(out, (x,), lambda g: (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),))


def combine(inputs, kind: str, factor: Optional[int] = None) -> Tensor:
    """Dispatch to add, concat_channels or upsample_nearest."""
    if kind == "add":
        a, b = inputs
        return add(a, b)
    if kind == "concat_channels":
        return concat_channels(list(inputs))
    if kind == "upsample_nearest":
        x = inputs[0] if isinstance(inputs, (list, tuple)) else inputs
        return upsample_nearest(x, factor if factor is not None else 2)
    raise ContractError(f"unknown combine kind {kind!r}")


# ------------------------------------------------------------------- losses
def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ContractError(f"logits must be [B, K], got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (b,):
        raise ContractError(f"expected {b} labels, got {labels.shape[0]}")
    if b == 0:
        raise ContractError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return _node(np.asarray(loss), (logits,), backward)
