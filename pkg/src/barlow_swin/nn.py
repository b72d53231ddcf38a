"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

ParamSet = Dict[str, Tensor]


class Parameter(Tensor):
    """A leaf tensor that always requires grad and is owned by a Module."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(T.get_default_dtype())


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(T.get_default_dtype())


class Module:
    """Base class: attribute walk gives hierarchical parameter/buffer names.

    Attributes holding a :class:`Parameter` are parameters, any other
    :class:`Tensor` is a buffer (e.g. batch-norm running statistics), and
    nested Modules are walked recursively in attribute insertion order.
    """

    training: bool = True
    rng: Optional[np.random.Generator] = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and not isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def parameters(self) -> ParamSet:
        return dict(self.named_parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b.data for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, t in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape} vs model {t.shape}")
            # in-place so optimizer/state references stay valid
            t.data[...] = value

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_rng(self, rng: np.random.Generator) -> "Module":
        self.rng = rng
        for _, child in self.children():
            child.set_rng(rng)
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features, dtype=T.get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        dtype = T.get_default_dtype()
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        dtype = T.get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm_2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean.data,
            self.running_var.data,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class SepConv2d(Module):
    """3x3 depthwise + 1x1 pointwise convolution with bias."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        dtype = T.get_default_dtype()
        self.depthwise = Parameter(he_normal(rng, (3, 3, in_channels), fan_in=9))
        self.pointwise = Parameter(he_normal(rng, (in_channels, out_channels), fan_in=in_channels))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.sepconv2d(x, self.depthwise, self.pointwise, self.bias)


class Conv1x1(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.weight = Parameter(he_normal(rng, (in_channels, out_channels), fan_in=in_channels))
        self.bias = Parameter(np.zeros(out_channels, dtype=T.get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def drop_path(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Stochastic depth: zero whole samples of a residual branch with prob ``p``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise RuntimeError("drop_path in training mode needs an rng; call set_rng() on the model")
    mask = T.dropout_mask((x.shape[0],) + (1,) * (x.ndim - 1), p, rng, dtype=x.dtype.type)
    return x * mask


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise RuntimeError("dropout in training mode needs an rng; call set_rng() on the model")
    return x * T.dropout_mask(x.shape, p, rng, dtype=x.dtype.type)
