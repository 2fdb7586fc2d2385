"""Image -> patches -> embedded tokens -> stacked transformer encoder layers.

The encoder half of the generator: square images are cut into a row-major
grid of patches, each patch is flattened and linearly projected into a token,
learnable 1-D position embeddings are added, and the token sequence runs
through post-norm transformer layers (``LayerNorm(x + F(x))`` after both the
multi-head attention and the feed-forward sublayer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import LayerNorm, Linear, Module, xavier_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class PatchConfig:
    """Geometry of the patch grid; num_patches = (image_size / patch_size)^2."""

    image_size: int
    patch_size: int
    embed_dim: int
    channels: int = 3
    num_patches: int = field(init=False)

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        side = self.image_size // self.patch_size
        object.__setattr__(self, "num_patches", side * side)

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size


def extract_patches(images, patch_size: int) -> Tensor:
    """Split [N, H, W, C] images into [N, num_patches, patch_len] rows.

    Patches are ordered left-to-right then top-to-bottom, and each patch is
    flattened row-major over (h, w, c); tokens_to_grid inverts this exactly.
    """
    images = T.as_tensor(images)
    if images.data.ndim != 4:
        raise DimensionError(f"extract_patches: expected NHWC input, got {images.shape}")
    n, h, w, c = images.shape
    if h != w:
        raise ConfigError(f"extract_patches: image must be square, got {h}x{w}")
    if h % patch_size != 0:
        raise ConfigError(f"image size {h} is not divisible by patch size {patch_size}")
    side = h // patch_size
    x = T.reshape(images, (n, side, patch_size, side, patch_size, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, side * side, patch_size * patch_size * c))


class PatchEncoder(Module):
    """Linear projection of flattened patches plus learnable position rows."""

    def __init__(self, rng: np.random.Generator, config: PatchConfig):
        super().__init__()
        self.config = config
        self.projection = self.register_parameter(
            "projection",
            Tensor(xavier_uniform(rng, (config.patch_len, config.embed_dim),
                                  config.patch_len, config.embed_dim)),
        )
        self.bias = self.register_parameter("bias", Tensor(np.zeros(config.embed_dim)))
        self.positions = self.register_parameter(
            "positions",
            Tensor(rng.normal(0.0, 0.02, size=(config.num_patches, config.embed_dim))),
        )

    def __call__(self, patches):
        patches = T.as_tensor(patches)
        if patches.shape[-1] != self.config.patch_len:
            raise DimensionError(
                f"encode_patches: patch length {patches.shape[-1]} does not match projection rows {self.config.patch_len}"
            )
        tokens = T.add(T.matmul(patches, self.projection), self.bias)
        return T.add(tokens, self.positions)


def encode_patches(patches, params: PatchEncoder) -> Tensor:
    return params(patches)


def scaled_dot_product_attention(q, k, v) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) V with softmax over the key axis.

    Accepts [T, d_k] or batched [..., T, d_k] operands sharing T and d_k.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention: Q {q.shape}, K {k.shape}, V {v.shape} do not share T and d_k"
        )
    d_k = q.shape[-1]
    axes = list(range(len(k.shape)))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(d_k))
    return T.matmul(T.softmax(scores, axis=-1), v)


class MultiHeadAttention(Module):
    """H identical heads of scaled dot-product attention, concatenated and
    projected by an output matrix."""

    def __init__(self, rng, embed_dim: int, num_heads: int):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ConfigError(
                f"embed_dim {embed_dim} is not divisible by num_heads {num_heads}"
            )
        self.num_heads = num_heads
        self.d_k = embed_dim // num_heads
        self.w_q: list[Tensor] = []
        self.w_k: list[Tensor] = []
        self.w_v: list[Tensor] = []
        for h in range(num_heads):
            for store, tag in ((self.w_q, "wq"), (self.w_k, "wk"), (self.w_v, "wv")):
                w = Tensor(xavier_uniform(rng, (embed_dim, self.d_k), embed_dim, self.d_k))
                store.append(self.register_parameter(f"heads.{h}.{tag}", w))
        self.w_o = self.register_parameter(
            "wo", Tensor(xavier_uniform(rng, (embed_dim, embed_dim), embed_dim, embed_dim))
        )

    def __call__(self, x):
        heads = []
        for h in range(self.num_heads):
            q = T.matmul(x, self.w_q[h])
            k = T.matmul(x, self.w_k[h])
            v = T.matmul(x, self.w_v[h])
            heads.append(scaled_dot_product_attention(q, k, v))
        joined = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
        return T.matmul(joined, self.w_o)


def multi_head_attention(x, params: MultiHeadAttention) -> Tensor:
    return params(x)


class FeedForward(Module):
    """Per-token Linear -> ReLU -> Linear."""

    def __init__(self, rng, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = self.add_module("fc1", Linear(rng, embed_dim, hidden_dim))
        self.fc2 = self.add_module("fc2", Linear(rng, hidden_dim, embed_dim))

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class TransformerLayer(Module):
    """Post-norm encoder layer: out = LN2(y + FFN(y)), y = LN1(x + MHA(x))."""

    def __init__(self, rng, embed_dim: int, num_heads: int, ffn_width: int):
        super().__init__()
        self.attn = self.add_module("attn", MultiHeadAttention(rng, embed_dim, num_heads))
        self.ln1 = self.add_module("ln1", LayerNorm(embed_dim))
        self.ffn = self.add_module("ffn", FeedForward(rng, embed_dim, ffn_width))
        self.ln2 = self.add_module("ln2", LayerNorm(embed_dim))

    def __call__(self, x):
        y = self.ln1(T.add(x, self.attn(x)))
        return self.ln2(T.add(y, self.ffn(y)))


def transformer_layer(x, params: TransformerLayer) -> Tensor:
    return params(x)


class VitEncoder(Module):
    """Patch extraction, patch encoding and a stack of transformer layers."""

    def __init__(self, rng, config: PatchConfig, num_heads: int, ffn_width: int,
                 num_layers: int):
        super().__init__()
        self.config = config
        self.patch = self.add_module("patch", PatchEncoder(rng, config))
        self.layers: list[TransformerLayer] = []
        for i in range(num_layers):
            layer = TransformerLayer(rng, config.embed_dim, num_heads, ffn_width)
            self.layers.append(self.add_module(f"layers.{i}", layer))

    def __call__(self, images) -> Tensor:
        tokens = self.patch(extract_patches(images, self.config.patch_size))
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens
