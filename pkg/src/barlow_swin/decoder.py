"""Convolutional expansive path and the full encoder-decoder segmentation model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, SkipFeatures, SwinEncoder
from .exceptions import ConfigError
from .nn import BatchNorm2d, Conv1x1, Module, SepConv2d
from .tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    # output channels of the four upsampling stages; the first two fuse s2 and s1
    decoder_channels: Tuple[int, ...] = (192, 96, 64, 32)
    head_channels: int = 1
    upsample: str = "nearest"

    def __post_init__(self):
        if len(self.decoder_channels) != 4:
            raise ConfigError(f"decoder has four stages, got decoder_channels={self.decoder_channels}")
        if self.head_channels != 1:
            raise ConfigError("binary segmentation head has exactly one output channel")
        if self.upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"upsample must be 'nearest' or 'bilinear', got {self.upsample!r}")


class DoubleConv(Module):
    """relu(bn(sep2(relu(bn(sep1(x))))) + shortcut(x)); both separable convs emit ``cout``."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.cin, self.cout = cin, cout
        self.conv1 = SepConv2d(cin, cout, rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = SepConv2d(cout, cout, rng)
        self.bn2 = BatchNorm2d(cout)
        self.shortcut = Conv1x1(cin, cout, rng)

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.cin:
            raise ConfigError(f"double_conv expects {self.cin} channels, got {c}")
        return (h, w, self.cout)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cin:
            raise ConfigError(f"double_conv expects {self.cin} channels, got {x.shape[-1]}")
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return T.relu(y + self.shortcut(x))


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    """Half-pixel bilinear 2x upsampling expressed with differentiable primitives."""
    # along each axis: out[2i] = .75 x[i] + .25 x[i-1], out[2i+1] = .75 x[i] + .25 x[i+1], edges clamped
    def along(t: Tensor, axis: int) -> Tensor:
        n = t.shape[axis]
        idx = np.arange(n)
        prev = np.maximum(idx - 1, 0)
        nxt = np.minimum(idx + 1, n - 1)
        sl = [slice(None)] * t.ndim

        def take(i):
            s = list(sl)
            s[axis] = i
            return t[tuple(s)]

        even = take(idx) * 0.75 + take(prev) * 0.25
        odd = take(idx) * 0.75 + take(nxt) * 0.25
        stacked = T.concat([even.reshape(_insert(even.shape, axis + 1)), odd.reshape(_insert(odd.shape, axis + 1))], axis=axis + 1)
        shape = list(t.shape)
        shape[axis] = 2 * n
        return stacked.reshape(tuple(shape))

    return along(along(x, 1), 2)


def _insert(shape, axis):
    shape = list(shape)
    shape.insert(axis, 1)
    return tuple(shape)


class UNetDecoder(Module):
    """Four 2x upsampling stages (skips fused in the first two) and a sigmoid 1x1 head.

    Channel concatenation order is ``[upsampled, skip]``.
    """

    def __init__(self, cfg: DecoderConfig, enc_cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.enc_channels = tuple(enc_cfg.stage_channels)
        c1, c2, c3 = enc_cfg.stage_channels
        a, b, c, d = cfg.decoder_channels
        self.up1 = DoubleConv(c3 + c2, a, rng)
        self.up2 = DoubleConv(a + c1, b, rng)
        self.up3 = DoubleConv(b, c, rng)
        self.up4 = DoubleConv(c, d, rng)
        self.head = Conv1x1(d, cfg.head_channels, rng)

    def _up(self, x: Tensor) -> Tensor:
        if self.cfg.upsample == "nearest":
            return T.upsample_nearest_2x(x)
        return upsample_bilinear_2x(x)

    def trace_shapes(self, skip_shapes) -> List[tuple]:
        """Decoder resolution ladder from skip shapes alone: input, four stages, head."""
        s1, s2, deep = (tuple(s) for s in skip_shapes)
        self._check_skips(s1, s2, deep)
        ladder = [deep]
        h, w, _ = deep
        shape = self.up1.output_shape((2 * h, 2 * w, deep[2] + s2[2]))
        ladder.append(shape)
        shape = self.up2.output_shape((2 * shape[0], 2 * shape[1], shape[2] + s1[2]))
        ladder.append(shape)
        shape = self.up3.output_shape((2 * shape[0], 2 * shape[1], shape[2]))
        ladder.append(shape)
        shape = self.up4.output_shape((2 * shape[0], 2 * shape[1], shape[2]))
        ladder.append(shape)
        ladder.append((shape[0], shape[1], self.cfg.head_channels))
        return ladder

    def _check_skips(self, s1, s2, deep) -> None:
        if (s1[2], s2[2], deep[2]) != self.enc_channels:
            raise ConfigError(f"skip channels {(s1[2], s2[2], deep[2])} do not match encoder {self.enc_channels}")
        if tuple(s2[:2]) != (2 * deep[0], 2 * deep[1]) or tuple(s1[:2]) != (2 * s2[0], 2 * s2[1]):
            raise ConfigError(f"inconsistent skip shapes s1={s1} s2={s2} deep={deep}")

    def forward(self, skips: SkipFeatures, return_trace: bool = False):
        self._check_skips(skips.s1.shape[1:], skips.s2.shape[1:], skips.deep.shape[1:])
        x = skips.deep
        trace = [x.shape[1:]]
        x = self.up1(T.concat([self._up(x), skips.s2], axis=-1))
        trace.append(x.shape[1:])
        x = self.up2(T.concat([self._up(x), skips.s1], axis=-1))
        trace.append(x.shape[1:])
        x = self.up3(self._up(x))
        trace.append(x.shape[1:])
        x = self.up4(self._up(x))
        trace.append(x.shape[1:])
        out = T.sigmoid(self.head(x))
        trace.append(out.shape[1:])
        return (out, trace) if return_trace else out


class BarlowSwin(Module):
    """Encoder and decoder wired together: image ``(b, H, W, 3)`` -> probabilities ``(b, H, W, 1)``."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, rng: np.random.Generator):
        self.encoder = SwinEncoder(enc_cfg, rng)
        self.decoder = UNetDecoder(dec_cfg, enc_cfg, rng)

    def trace_shapes(self):
        skips = self.encoder.output_shapes()
        return list(skips), self.decoder.trace_shapes(skips)

    def forward(self, image: Tensor) -> Tensor:
        return self.decoder(self.encoder(image))
