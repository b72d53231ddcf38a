"""Three-stage shifted-window transformer encoder."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .nn import LayerNorm, Linear, Module, Parameter, drop_path, dropout
from .tensor import Tensor

MASK_PENALTY = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 512
    in_channels: int = 3
    patch_size: int = 4
    window_size: int = 4
    embed_dim: int = 96
    stage_channels: Tuple[int, ...] = (96, 192, 384)
    depths: Tuple[int, ...] = (2, 2, 2)
    num_heads: int = 8
    # per-stage override of num_heads; empty means use num_heads everywhere
    stage_heads: Tuple[int, ...] = ()
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    attn_drop: float = 0.0
    mlp_drop: float = 0.0

    def __post_init__(self):
        self.validate()

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def heads(self, stage: int) -> int:
        return self.stage_heads[stage] if self.stage_heads else self.num_heads

    def stage_grid(self, stage: int) -> int:
        return self.grid // (2**stage)

    def validate(self) -> None:
        if len(self.stage_channels) != 3 or len(self.depths) != 3:
            raise ConfigError("encoder has exactly three stages: stage_channels and depths need 3 entries")
        if self.stage_heads and len(self.stage_heads) != 3:
            raise ConfigError("stage_heads needs 3 entries when given")
        if self.image_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.stage_channels[0] != self.embed_dim:
            raise ConfigError(f"stage_channels[0]={self.stage_channels[0]} must equal embed_dim={self.embed_dim}")
        for i in range(2):
            if self.stage_channels[i + 1] != 2 * self.stage_channels[i]:
                raise ConfigError(f"stage_channels must double per stage, got {self.stage_channels}")
        if self.window_size % 2:
            raise ConfigError(f"window_size must be even for a half-window shift, got {self.window_size}")
        for s in range(3):
            g = self.stage_grid(s)
            if self.grid % (2**s) or g % self.window_size:
                raise ConfigError(
                    f"stage {s + 1} token grid {self.grid / 2**s:g} not divisible by window_size {self.window_size}"
                    f" (image_size {self.image_size})"
                )
            if self.stage_channels[s] % self.heads(s):
                raise ConfigError(f"stage {s + 1} channels {self.stage_channels[s]} not divisible by {self.heads(s)} heads")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must be in [0, 1)")

    def drop_path_rates(self) -> list:
        return [float(r) for r in np.linspace(0.0, self.drop_path_rate, sum(self.depths))]


@dataclass
class SkipFeatures:
    s1: Tensor
    s2: Tensor
    deep: Tensor

    def shapes(self) -> tuple:
        return tuple(t.shape[1:] for t in (self.s1, self.s2, self.deep))


# --- window helpers (work on Tensor and ndarray alike) -----------------


def window_partition(x, window: int):
    """``(b, h, w, c)`` -> ``(b * nW, window**2, c)``, windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"grid {h}x{w} not divisible by window {window}")
    x = x.reshape(b, h // window, window, w // window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows, window: int, h: int, w: int):
    """Exact inverse of :func:`window_partition`."""
    if h % window or w % window:
        raise ValueError(f"grid {h}x{w} not divisible by window {window}")
    nw = (h // window) * (w // window)
    c = windows.shape[-1]
    b = windows.shape[0] // nw
    x = windows.reshape(b, h // window, w // window, window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def window_partition_reverse(x, window: int, direction: str = "partition", h: int = 0, w: int = 0):
    if direction == "partition":
        return window_partition(x, window)
    if direction == "reverse":
        return window_reverse(x, window, h, w)
    raise ValueError(f"direction must be 'partition' or 'reverse', got {direction!r}")


def relative_position_index(window: int) -> np.ndarray:
    """``(N, N)`` map from token pairs to rows of the ``(2w-1)**2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


@lru_cache(maxsize=None)
def shift_attention_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive ``(nW, N, N)`` mask blocking pairs that wrapped around in the cyclic shift."""
    region = np.zeros((1, h, w, 1))
    cnt = 0
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            region[:, hs, ws, :] = cnt
            cnt += 1
    ids = window_partition(region, window)[..., 0]
    diff = ids[:, None, :] - ids[:, :, None]
    mask = np.where(diff != 0, MASK_PENALTY, 0.0)
    mask.setflags(write=False)
    return mask


# --- layers -------------------------------------------------------------


class PatchEmbed(Module):
    """Non-overlapping patch flattening, linear projection, learnable position table."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.proj = Linear(cfg.patch_size * cfg.patch_size * cfg.in_channels, cfg.embed_dim, rng)
        self.pos = Parameter(np.zeros((cfg.grid, cfg.grid, cfg.embed_dim), dtype=T.get_default_dtype()))

    def output_shape(self, shape):
        h, w, _ = shape
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch_size {p}")
        return (h // p, w // p, self.pos.shape[-1])

    def patches(self, image: Tensor) -> Tensor:
        b, h, w, c = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch_size {p}")
        x = image.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, h // p, w // p, p * p * c)

    def forward(self, image: Tensor) -> Tensor:
        tokens = self.proj(self.patches(image))
        if tokens.shape[1:3] != self.pos.shape[:2]:
            raise ConfigError(f"token grid {tokens.shape[1:3]} does not match position table {self.pos.shape[:2]}")
        return tokens + self.pos


class WindowAttention(Module):
    def __init__(self, dim: int, num_heads: int, window: int, rng: np.random.Generator,
                 attn_drop: float = 0.0, proj_drop: float = 0.0):
        if dim % num_heads:
            raise ConfigError(f"channels {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.attn_drop = attn_drop
        self.proj_drop = proj_drop
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_bias = Parameter(np.zeros(((2 * window - 1) ** 2, num_heads), dtype=T.get_default_dtype()))
        self._rel_index = relative_position_index(window).reshape(-1)

    def bias(self) -> Tensor:
        n = self.window * self.window
        return self.rel_bias[self._rel_index].reshape(n, n, self.num_heads).transpose(2, 0, 1)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None, return_probs: bool = False):
        bn, n, c = x.shape
        if c % self.num_heads:
            raise ConfigError(f"channels {c} not divisible by {self.num_heads} heads")
        if n != self.window * self.window:
            raise ValueError(f"expected {self.window ** 2} tokens per window, got {n}")
        h = self.num_heads
        qkv = self.qkv(x).reshape(bn, n, 3, h, c // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(0, 1, 3, 2) + self.bias()
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.reshape(bn // nw, nw, h, n, n) + mask[None, :, None].astype(x.dtype)
            logits = logits.reshape(bn, h, n, n)
        probs = T.softmax_lastdim(logits)
        attn = dropout(probs, self.attn_drop, self.training, self.rng)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(bn, n, c)
        out = dropout(self.proj(out), self.proj_drop, self.training, self.rng)
        return (out, probs) if return_probs else out


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, drop: float = 0.0):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.drop = drop

    def forward(self, x: Tensor) -> Tensor:
        x = dropout(T.gelu(self.fc1(x)), self.drop, self.training, self.rng)
        return dropout(self.fc2(x), self.drop, self.training, self.rng)


class SwinBlock(Module):
    """LayerNorm, (shifted) window attention, residual; LayerNorm, MLP, residual."""

    def __init__(self, dim: int, num_heads: int, window: int, shift: int, rng: np.random.Generator,
                 mlp_ratio: float = 4.0, drop_path: float = 0.0, attn_drop: float = 0.0, mlp_drop: float = 0.0):
        if shift not in (0, window // 2):
            raise ConfigError(f"shift must be 0 or window/2={window // 2}, got {shift}")
        self.window = window
        self.shift = shift
        self.drop_path = drop_path
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window, rng, attn_drop=attn_drop, proj_drop=mlp_drop)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, drop=mlp_drop)

    def output_shape(self, shape):
        h, w, _ = shape
        if h % self.window or w % self.window:
            raise ConfigError(f"grid {h}x{w} not divisible by window {self.window}")
        return tuple(shape)

    def attention_branch(self, x: Tensor, return_probs: bool = False):
        b, h, w, c = x.shape
        if h % self.window or w % self.window:
            raise ConfigError(f"grid {h}x{w} not divisible by window {self.window}")
        y = self.norm1(x)
        mask = None
        if self.shift:
            y = T.roll(y, (-self.shift, -self.shift), (1, 2))
            mask = shift_attention_mask(h, w, self.window, self.shift)
        out = self.attn(window_partition(y, self.window), mask, return_probs=return_probs)
        probs = None
        if return_probs:
            out, probs = out
        y = window_reverse(out, self.window, h, w)
        if self.shift:
            y = T.roll(y, (self.shift, self.shift), (1, 2))
        return (y, probs) if return_probs else y

    def forward(self, x: Tensor) -> Tensor:
        x = x + drop_path(self.attention_branch(x), self.drop_path, self.training, self.rng)
        return x + drop_path(self.mlp(self.norm2(x)), self.drop_path, self.training, self.rng)


class PatchMerging(Module):
    """Concatenate the four stride-2 sub-grids (4C channels) and project to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def output_shape(self, shape):
        h, w, c = shape
        if h % 2 or w % 2:
            raise ConfigError(f"patch merging needs even grid, got {h}x{w}")
        return (h // 2, w // 2, 2 * c)

    def forward(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"patch merging needs even grid, got {h}x{w}")
        parts = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
        return self.reduction(T.concat(parts, axis=-1))


class Stage(Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window: int, drop_paths, rng, cfg: EncoderConfig):
        self.depth = depth
        for i in range(depth):
            block = SwinBlock(
                dim,
                num_heads,
                window,
                shift=0 if i % 2 == 0 else window // 2,
                rng=rng,
                mlp_ratio=cfg.mlp_ratio,
                drop_path=drop_paths[i],
                attn_drop=cfg.attn_drop,
                mlp_drop=cfg.mlp_drop,
            )
            setattr(self, f"block{i}", block)

    @property
    def blocks(self) -> list:
        return [getattr(self, f"block{i}") for i in range(self.depth)]

    def output_shape(self, shape):
        for blk in self.blocks:
            shape = blk.output_shape(shape)
        return shape

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        rates = cfg.drop_path_rates()
        d1, d2, _ = cfg.depths
        c1, c2, c3 = cfg.stage_channels
        w = cfg.window_size
        self.embed = PatchEmbed(cfg, rng)
        self.stage1 = Stage(c1, cfg.depths[0], cfg.heads(0), w, rates[:d1], rng, cfg)
        self.merge2 = PatchMerging(c1, rng)
        self.stage2 = Stage(c2, cfg.depths[1], cfg.heads(1), w, rates[d1 : d1 + d2], rng, cfg)
        self.merge3 = PatchMerging(c2, rng)
        self.stage3 = Stage(c3, cfg.depths[2], cfg.heads(2), w, rates[d1 + d2 :], rng, cfg)

    def output_shapes(self, image_shape=None):
        """Skip shapes (without batch axis) computed from the layer shape rules alone."""
        if image_shape is None:
            image_shape = (self.cfg.image_size, self.cfg.image_size, self.cfg.in_channels)
        s1 = self.stage1.output_shape(self.embed.output_shape(image_shape))
        s2 = self.stage2.output_shape(self.merge2.output_shape(s1))
        deep = self.stage3.output_shape(self.merge3.output_shape(s2))
        return s1, s2, deep

    def forward(self, image: Tensor) -> SkipFeatures:
        expected = (self.cfg.image_size, self.cfg.image_size, self.cfg.in_channels)
        if image.ndim != 4 or tuple(image.shape[1:]) != expected:
            raise ConfigError(f"encoder expects images of shape (b, {expected[0]}, {expected[1]}, {expected[2]}), got {image.shape}")
        dtype = self.embed.proj.weight.dtype
        if image.dtype != dtype and not image.requires_grad:
            image = Tensor(image.data.astype(dtype))
        s1 = self.stage1(self.embed(image))
        s2 = self.stage2(self.merge2(s1))
        deep = self.stage3(self.merge3(s2))
        return SkipFeatures(s1, s2, deep)
