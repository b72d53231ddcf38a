"""Dense numpy-backed tensor with reverse-mode automatic differentiation.

Every differentiable op builds its output through :func:`_record`, which
attaches an :class:`_Op` holding the inputs and a closure mapping the output
adjoint to input adjoints.  :func:`backward` orders the ops reachable from a
scalar loss, replays the closures in reverse and then consumes the record.

Layout is channels-last throughout: images and feature maps are ``(b, h, w, c)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ComputationRecord",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "backward",
    "matmul",
    "linear",
    "softmax_lastdim",
    "activation",
    "gelu",
    "relu",
    "sigmoid",
    "layer_norm",
    "batch_norm_2d",
    "depthwise_conv3x3",
    "sepconv2d",
    "upsample_nearest_2x",
    "concat",
    "roll",
    "clip",
    "dropout_mask",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def _contig(a) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d arrays to 1-d; keep scalars scalar
    a = np.asarray(a)
    return a if a.flags.c_contiguous else a.copy(order="C")


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable op recording (evaluation, finite differences)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Op:
    __slots__ = ("name", "inputs", "backward", "output")

    def __init__(self, name, inputs, backward_fn):
        self.name = name
        self.inputs = inputs
        self.backward = backward_fn
        self.output = None


class Tensor:
    """A dense array plus optional gradient tracking.

    ``data`` is always a C-contiguous float32/float64 ndarray.  ``grad`` is
    populated on leaves that require grad once :func:`backward` has run.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = _contig(np.asarray(data, dtype=dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._op: Optional[_Op] = None
        self._consumed = False

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.shape[0]

    # --- autodiff ------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # --- arithmetic ----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _record(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        op = _Op(name, tuple(inputs), backward_fn)
        op.output = out
        out._op = op
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- computation record and backward ----------------------------------


class ComputationRecord:
    """Topologically ordered ops reachable from a root tensor."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationRecord":
        ops: list = []
        if root._op is None:
            return cls(ops)
        # iterative post-order DFS so inputs always precede their consumers;
        # a node is marked when expanded, not when pushed, otherwise a shared
        # intermediate can be emitted after one of its consumers
        visited = set()
        stack = [(root._op, False)]
        while stack:
            op, expanded = stack.pop()
            if expanded:
                ops.append(op)
                continue
            if id(op) in visited:
                continue
            visited.add(id(op))
            stack.append((op, True))
            for inp in op.inputs:
                child = inp._op
                if child is not None and id(child) not in visited:
                    stack.append((child, False))
        return cls(ops)

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)


def _accumulate(store: dict, key, grad: np.ndarray) -> None:
    prev = store.get(key)
    store[key] = grad if prev is None else prev + grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients add onto existing ``.grad`` buffers; call ``zero_grad`` between
    optimizer steps.  The record is consumed: intermediate tensors lose their
    op links and a second call raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("computation record already consumed by an earlier backward()")
    if not loss.requires_grad:
        return
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._op is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    record = ComputationRecord.from_root(loss)
    pending: dict = {id(loss): seed}
    for op in reversed(record.ops):
        out = op.output
        g = pending.pop(id(out), None)
        if g is None:
            continue
        input_grads = op.backward(g)
        for inp, gi in zip(op.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.dtype != inp.dtype:
                gi = gi.astype(inp.dtype)
            if inp._op is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                _accumulate(pending, id(inp), gi)
    for op in record.ops:
        op.output._op = None
        op.output._consumed = True
        op.inputs = ()


# --- elementwise arithmetic -------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", ad / bd, (a, b), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("tensor exponents are not supported")
    xd = x.data
    p = float(exponent)

    def bw(g):
        return (g * p * xd ** (p - 1.0),)

    return _record("pow", xd**p, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _record("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where no clamping happened."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record("clip", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# --- reductions and shape ops ------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = _contig(x.data.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (_contig(g.transpose(inverse)),))


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    shape, dtype = x.shape, x.dtype
    advanced = _is_advanced(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record("getitem", _contig(x.data[index]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            _contig(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tensors, bw)


def roll(x: Tensor, shifts, axes) -> Tensor:
    """Cyclic shift (``np.roll`` semantics)."""
    shifts = tuple(shifts) if isinstance(shifts, (tuple, list)) else (shifts,)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    back = tuple(-s for s in shifts)
    return _record("roll", np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


# --- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, batch axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", out.reshape(lead + (wd.shape[1],)), inputs, bw)


# --- nonlinearities ----------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), bw)


# python floats, not numpy scalars, so float32 inputs stay float32
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    y = (xd * 0.5 * (1.0 + erf(xd * _INV_SQRT2))).astype(xd.dtype, copy=False)
    return _record("gelu", y, (x,), lambda g: (g * _gelu_grad(xd),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _record("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) at the working precision."""
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    y[~pos] = ez / (1.0 + ez)
    info = np.finfo(xd.dtype)
    y = np.clip(y, info.tiny, 1.0 - info.epsneg)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


_ACTIVATIONS = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# --- normalization -----------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm affine shape {gamma.shape}/{beta.shape} does not match channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=reduce_axes)
        gb = g.sum(axis=reduce_axes)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record("layer_norm", out, (x, gamma, beta), bw)


def batch_norm_2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a ``(b, h, w, c)`` map.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm_2d expects (b, h, w, c), got {x.shape}")
    c = x.shape[-1]
    if gamma.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch_norm_2d channel mismatch: input has {c} channels, state has {running_mean.shape}")
    xd = x.data
    gd = gamma.data
    axes = (0, 1, 2)
    if training:
        mu = xd.mean(axis=axes)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        xc = xd - running_mean
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype, copy=False)
    xhat = xc * inv
    out = xhat * gd + beta.data

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gh = g * gd
            if training:
                gx = inv * (gh - gh.mean(axis=axes) - xhat * (gh * xhat).mean(axis=axes))
            else:
                gx = gh * inv
        return gx, gg, gb

    return _record("batch_norm_2d", out, (x, gamma, beta), bw)


# --- convolution / resampling -----------------------------------------


def depthwise_conv3x3(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 3x3 convolution, zero padding, same output size."""
    if x.ndim != 4:
        raise ValueError(f"depthwise_conv3x3 expects (b, h, w, c), got {x.shape}")
    c = x.shape[-1]
    if kernel.shape != (3, 3, c):
        raise ValueError(f"depthwise kernel {kernel.shape} does not match {c} input channels")
    b, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    kd = kernel.data
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += xp[:, i : i + h, j : j + w, :] * kd[i, j]

    def bw(g):
        gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for i in range(3):
                for j in range(3):
                    gk[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i : i + h, j : j + w, :], g)
        gx = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gp[:, i : i + h, j : j + w, :] += g * kd[i, j]
            gx = gp[:, 1:-1, 1:-1, :]
        return gx, gk

    return _record("depthwise_conv3x3", out, (x, kernel), bw)


def sepconv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Depthwise 3x3 convolution followed by 1x1 pointwise channel mixing."""
    if pointwise.shape[0] != x.shape[-1]:
        raise ValueError(f"pointwise weight {pointwise.shape} does not match {x.shape[-1]} input channels")
    return linear(depthwise_conv3x3(x, depthwise), pointwise, bias)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest_2x expects (b, h, w, c), got {x.shape}")
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _record(
        "upsample_nearest_2x",
        out,
        (x,),
        lambda g: (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),),
    )


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Bernoulli(1 - p) keep mask scaled by ``1 / (1 - p)``."""
    dtype = dtype or _DEFAULT_DTYPE
    keep = 1.0 - p
    return (rng.random(shape) < keep).astype(dtype) / dtype(keep)
