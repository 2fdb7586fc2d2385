"""Token grid -> image: transpose-convolution upsampling stages with optional
residual blocks, plus the skip-concat layer used by the U-Net-style variant.

Each upsampling stage doubles the spatial size: transposed convolution
(kernel 4, stride 2, same padding), batch norm, LeakyReLU, then optionally a
residual block at the stage's filter count.  Plain ReLU is used inside
residual blocks; LeakyReLU elsewhere in the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import LEAKY_SLOPE, BatchNorm, Conv2d, ConvTranspose2d, Module
from .tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    """Channel schedule and output head settings for the upsampling path."""

    channel_schedule: tuple[tuple[int, int], ...]  # (transpose_ch, residual_ch) per stage
    initial_grid: tuple[int, int, int]             # (side, side, channels)
    out_channels: int
    final_activation: str = "tanh"                 # "tanh" | "none"

    def __post_init__(self):
        side, side2, _ = self.initial_grid
        if side != side2:
            raise ConfigError(f"initial grid must be square, got {self.initial_grid}")
        if self.final_activation not in ("tanh", "none"):
            raise ConfigError(f"final_activation must be 'tanh' or 'none', got {self.final_activation!r}")


DEFAULT_SCHEDULE: tuple[tuple[int, int], ...] = ((512, 512), (256, 256), (64, 64), (32, 32))


def tokens_to_grid(tokens) -> Tensor:
    """Reshape [N, P, D] tokens onto a square [N, side, side, D] grid.

    Row-major inverse of the patch ordering used by extract_patches, so
    grid -> tokens -> grid is an identity.
    """
    tokens = T.as_tensor(tokens)
    if tokens.data.ndim != 3:
        raise DimensionError(f"tokens_to_grid: expected [N, P, D] tokens, got {tokens.shape}")
    n, p, d = tokens.shape
    side = math.isqrt(p)
    if side * side != p:
        raise ConfigError(f"tokens_to_grid: token count {p} is not a perfect square")
    return T.reshape(tokens, (n, side, side, d))


def grid_to_tokens(grid) -> Tensor:
    grid = T.as_tensor(grid)
    n, h, w, d = grid.shape
    return T.reshape(grid, (n, h * w, d))


class ResidualBlock(Module):
    """Two 3x3 convs with batch norm; identity shortcut, or a 1x1 projection
    when the channel counts differ.  out = relu(BN(conv(relu(BN(conv(x))))) + shortcut(x))."""

    def __init__(self, rng, in_ch: int, filters: int):
        super().__init__()
        self.conv1 = self.add_module("conv1", Conv2d(rng, in_ch, filters, 3))
        self.bn1 = self.add_module("bn1", BatchNorm(filters))
        self.conv2 = self.add_module("conv2", Conv2d(rng, filters, filters, 3))
        self.bn2 = self.add_module("bn2", BatchNorm(filters))
        self.proj = None
        if in_ch != filters:
            self.proj = self.add_module("proj", Conv2d(rng, in_ch, filters, 1))

    def __call__(self, x, mode: str):
        y = T.relu(self.bn1(self.conv1(x), mode))
        y = self.bn2(self.conv2(y), mode)
        shortcut = self.proj(x) if self.proj is not None else x
        return T.relu(T.add(y, shortcut))


def residual_block(x, params: ResidualBlock, mode: str) -> Tensor:
    return params(x, mode)


class UpsampleStage(Module):
    """conv2d_transpose(stride 2) -> batch norm -> LeakyReLU [-> residual block]."""

    def __init__(self, rng, in_ch: int, transpose_ch: int, residual_ch: int | None):
        super().__init__()
        self.ct = self.add_module("ct", ConvTranspose2d(rng, in_ch, transpose_ch, kernel=4, stride=2))
        self.bn = self.add_module("bn", BatchNorm(transpose_ch))
        self.res = None
        if residual_ch is not None:
            self.res = self.add_module("res", ResidualBlock(rng, transpose_ch, residual_ch))
        self.out_channels = residual_ch if residual_ch is not None else transpose_ch

    def __call__(self, x, mode: str):
        y = T.leaky_relu(self.bn(self.ct(x), mode), LEAKY_SLOPE)
        if self.res is not None:
            y = self.res(y, mode)
        return y


def upsample_stage(x, stage: UpsampleStage, mode: str) -> Tensor:
    return stage(x, mode)


class SkipProjection(Module):
    """Optional 1x1 convolution applied to upsampled patch grids before concat."""

    def __init__(self, rng, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = self.add_module("conv", Conv2d(rng, in_ch, out_ch, 1))

    def __call__(self, x):
        return self.conv(x)


def upsample_concat(encoded_grid, prev_activation, projection: SkipProjection | None = None) -> Tensor:
    """Bilinearly upsample a patch grid to the previous activation's spatial
    size, optionally 1x1-convolve it, and concat on the channel axis."""
    encoded_grid = T.as_tensor(encoded_grid)
    prev_activation = T.as_tensor(prev_activation)
    _, gh, gw, _ = encoded_grid.shape
    _, h, w, _ = prev_activation.shape
    if h < gh or w < gw:
        raise DimensionError(
            f"upsample_concat: target {h}x{w} smaller than patch grid {gh}x{gw}"
        )
    up = encoded_grid if (h, w) == (gh, gw) else T.bilinear_upsample(encoded_grid, h, w)
    if projection is not None:
        up = projection(up)
    return T.concat([prev_activation, up], axis=-1)


class OutputHead(Module):
    """Final 3x3 stride-1 convolution; tanh for image outputs, raw logits for
    segmentation (the loss applies its own softmax)."""

    def __init__(self, rng, in_ch: int, out_channels: int, final_activation: str):
        super().__init__()
        if final_activation not in ("tanh", "none"):
            raise ConfigError(f"final_activation must be 'tanh' or 'none', got {final_activation!r}")
        self.final_activation = final_activation
        self.conv = self.add_module("conv", Conv2d(rng, in_ch, out_channels, 3))

    def __call__(self, x):
        y = self.conv(x)
        return T.tanh(y) if self.final_activation == "tanh" else y


def output_head(x, params: OutputHead) -> Tensor:
    return params(x)
