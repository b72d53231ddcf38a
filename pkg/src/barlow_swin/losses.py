"""Redundancy-reduction pretraining loss, projector head, and the BCE/Dice segmentation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class ProjectorConfig:
    proj_dim: int = 512
    proj_layers: int = 2

    def __post_init__(self):
        if self.proj_dim < 1 or self.proj_layers < 1:
            raise ConfigError("proj_dim and proj_layers must be positive")


@dataclass(frozen=True)
class BtLossConfig:
    bt_lambda: float = 5e-3
    bt_eps: float = 1e-9
    # False uses the uncentered norm-ratio form (no mean subtraction)
    bt_centered: bool = True

    def __post_init__(self):
        if self.bt_lambda <= 0:
            raise ConfigError(f"bt_lambda must be positive, got {self.bt_lambda}")


@dataclass(frozen=True)
class SegLossConfig:
    alpha: float = 0.5
    dice_eps: float = 1e-6
    bce_clip: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.bce_clip < 0.5:
            raise ConfigError(f"bce_clip must lie in (0, 0.5), got {self.bce_clip}")


class Projector(Module):
    """Global average pool of a ``(b, h, w, c)`` map, then an MLP with GELU between layers."""

    def __init__(self, in_dim: int, cfg: ProjectorConfig, rng: np.random.Generator):
        self.num_layers = cfg.proj_layers
        dims = [in_dim] + [cfg.proj_dim] * cfg.proj_layers
        for i in range(cfg.proj_layers):
            setattr(self, f"fc{i}", Linear(dims[i], dims[i + 1], rng))

    def forward(self, features: Tensor) -> Tensor:
        z = features.mean(axis=(1, 2))
        for i in range(self.num_layers):
            z = getattr(self, f"fc{i}")(z)
            if i < self.num_layers - 1:
                z = T.gelu(z)
        return z


def _standardize(z: Tensor, eps: float, centered: bool) -> Tensor:
    if centered:
        z = z - z.mean(axis=0, keepdims=True)
        return z / ((z * z).mean(axis=0, keepdims=True) + eps).sqrt()
    return z / ((z * z).sum(axis=0, keepdims=True) + eps).sqrt()


def cross_correlation(z1: Tensor, z2: Tensor, eps: float = 1e-9, centered: bool = True) -> Tensor:
    """``(d, d)`` correlation between the embedding dimensions of two views.

    Centered (default): columns are standardized over the batch and
    ``C = z1n.T @ z2n / B`` is the Pearson matrix.  Uncentered: columns are
    divided by their L2 norm over the batch and ``C = z1n.T @ z2n``.
    """
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise ValueError(f"cross_correlation needs equal (B, d) inputs, got {z1.shape} and {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise ValueError(f"cross_correlation needs a batch of at least 2, got {b}")
    a = _standardize(z1, eps, centered)
    c = _standardize(z2, eps, centered)
    corr = a.transpose(1, 0) @ c
    return corr * (1.0 / b) if centered else corr


def barlow_twins_loss(c: Tensor, cfg: BtLossConfig = BtLossConfig()) -> Tensor:
    """sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2."""
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"correlation matrix must be square, got {c.shape}")
    d = c.shape[0]
    eye = np.eye(d, dtype=c.dtype)
    on_diag = (((c - 1.0) * eye) ** 2).sum()
    off_diag = ((c * (1.0 - eye)) ** 2).sum()
    return on_diag + off_diag * cfg.bt_lambda


def bce_loss(pred: Tensor, target, clip: float = 1e-7) -> Tensor:
    """Mean pixel-wise binary cross-entropy with predictions clamped to [clip, 1 - clip]."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != y.shape:
        raise ValueError(f"bce_loss shape mismatch: pred {pred.shape} vs target {y.shape}")
    y = y.astype(pred.dtype, copy=False)
    p = T.clip(pred, clip, 1.0 - clip)
    ll = p.log() * y + (1.0 - p).log() * (1.0 - y)
    return ll.mean() * -1.0


def dice_coefficient(pred, target, eps: float = 1e-6) -> Tensor:
    """Soft Dice, 2 sum(y * p) / (sum(y) + sum(p) + eps); either argument may be a Tensor."""
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    y = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"dice_coefficient shape mismatch: {p.shape} vs {y.shape}")
    return (p * y).sum() * 2.0 / (y.sum() + p.sum() + eps)


def combined_seg_loss(pred: Tensor, target, cfg: SegLossConfig = SegLossConfig()) -> Tensor:
    """alpha * BCE + (1 - alpha) * (1 - Dice)."""
    if cfg.alpha == 1.0:
        return bce_loss(pred, target, cfg.bce_clip)
    dice_term = 1.0 - dice_coefficient(pred, target, cfg.dice_eps)
    if cfg.alpha == 0.0:
        return dice_term
    return bce_loss(pred, target, cfg.bce_clip) * cfg.alpha + dice_term * (1.0 - cfg.alpha)
