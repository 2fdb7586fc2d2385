"""Generator assembly: encoder + decoder variants A/B/C, the U-Net and
Autoencoder baselines, and bit-exact checkpoint persistence.

Variants (all share the patch-encoder/transformer trunk):
  A: transpose-convolution stages only, then the output head.
  B: A's trunk with a skip from the encoded patches into every decoder
     stage: the patch grid is bilinearly upsampled to the previous
     activation's size (optionally 1x1-convolved) and concatenated.
  C: each transpose-convolution stage is followed by a residual block.

Baselines are plain convolutional encoder/decoder stacks; the U-Net adds
skip concatenations at matched resolutions and is otherwise identical to
the Autoencoder.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from math import log2
from typing import Optional

import numpy as np

from . import tensor as T
from .decoder import (DEFAULT_SCHEDULE, OutputHead, SkipProjection,
                      UpsampleStage, tokens_to_grid, upsample_concat)
from .encoder import PatchConfig, VitEncoder
from .errors import (CheckpointFormatError, CheckpointMismatchError,
                     CheckpointVersionError, ConfigError, DimensionError)
from .layers import (BATCH_NORM_EPS, BATCH_NORM_MOMENTUM, LAYER_NORM_EPS,
                     LEAKY_SLOPE, BatchNorm, Conv2d, ConvTranspose2d, Module)
from .tensor import Tensor

VARIANTS = ("A", "B", "C", "unet", "autoencoder")
TASKS = ("segmentation", "regression")

DESIGN_CONSTANTS = {
    "layer_norm_eps": LAYER_NORM_EPS,
    "batch_norm_eps": BATCH_NORM_EPS,
    "batch_norm_momentum": BATCH_NORM_MOMENTUM,
    "leaky_relu_slope": LEAKY_SLOPE,
    "weight_init": "xavier_uniform; position embeddings normal(0, 0.02)",
    "padding": "same: out = ceil(in/stride), extra zero row/col on bottom/right",
}


@dataclass
class ModelConfig:
    """Everything needed to rebuild a generator bit-for-bit."""

    variant: str = "C"
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 64
    num_heads: int = 2
    ffn_width: int = 32
    num_transformer_layers: int = 4
    decoder_schedule: Optional[tuple[tuple[int, int], ...]] = None
    out_channels: int = 3
    in_channels: int = 3
    task: str = "segmentation"
    skip_projection_channels: Optional[int] = None  # variant B: 1x1-conv skips to this width
    seed: int = 0

    def validated(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.image_size <= 0 or self.out_channels <= 0:
            raise ConfigError("image_size and out_channels must be positive")
        if self.variant in ("A", "B", "C"):
            if self.image_size % self.patch_size != 0:
                raise ConfigError(
                    f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
                )
            if self.embed_dim % self.num_heads != 0:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
                )
            stages = log2(self.patch_size)
            if self.decoder_schedule is None:
                if stages != int(stages) or not (1 <= stages <= len(DEFAULT_SCHEDULE)):
                    raise ConfigError(
                        f"no default decoder schedule for patch size {self.patch_size}; pass one explicitly"
                    )
                self.decoder_schedule = DEFAULT_SCHEDULE[-int(stages):]
            else:
                self.decoder_schedule = tuple(tuple(s) for s in self.decoder_schedule)
                if 2 ** len(self.decoder_schedule) != self.patch_size:
                    raise ConfigError(
                        f"decoder schedule of {len(self.decoder_schedule)} stages upsamples "
                        f"{2 ** len(self.decoder_schedule)}x but patch size {self.patch_size} requires "
                        f"patch_size-fold upsampling to restore the image size"
                    )
        if self.skip_projection_channels is not None and self.variant != "B":
            raise ConfigError("skip_projection_channels applies to variant B only")
        return self

    @property
    def final_activation(self) -> str:
        return "none" if self.task == "segmentation" else "tanh"

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["decoder_schedule"] is not None:
            d["decoder_schedule"] = [list(s) for s in d["decoder_schedule"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("decoder_schedule") is not None:
            d["decoder_schedule"] = tuple(tuple(s) for s in d["decoder_schedule"])
        return cls(**d).validated()


class Generator(Module):
    """A built model: parameters plus a variant-dispatched forward pass."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validated()
        rng = np.random.default_rng(config.seed)
        if config.variant in ("A", "B", "C"):
            self._build_vit(rng)
        else:
            self._build_baseline(rng)

    # -- construction -------------------------------------------------------

    def _build_vit(self, rng):
        cfg = self.config
        patch_cfg = PatchConfig(cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.in_channels)
        self.patch_config = patch_cfg
        self.encoder = self.add_module(
            "encoder",
            VitEncoder(rng, patch_cfg, cfg.num_heads, cfg.ffn_width, cfg.num_transformer_layers),
        )
        self.stages: list[UpsampleStage] = []
        skip_ch = 0
        if cfg.variant == "B":
            skip_ch = cfg.skip_projection_channels or cfg.embed_dim
        in_ch = cfg.embed_dim
        for i, (ct_ch, rl_ch) in enumerate(cfg.decoder_schedule):
            stage = UpsampleStage(rng, in_ch, ct_ch, rl_ch if cfg.variant == "C" else None)
            self.stages.append(self.add_module(f"decoder.stages.{i}", stage))
            in_ch = stage.out_channels + skip_ch
        self.skip_projs: list[Optional[SkipProjection]] = []
        if cfg.variant == "B":
            n_skips = len(cfg.decoder_schedule)  # into stages 1..n-1 plus the head
            for i in range(n_skips):
                proj = None
                if cfg.skip_projection_channels is not None:
                    proj = self.add_module(
                        f"decoder.skips.{i}",
                        SkipProjection(rng, cfg.embed_dim, cfg.skip_projection_channels),
                    )
                self.skip_projs.append(proj)
        head_in = in_ch if cfg.variant == "B" else self.stages[-1].out_channels
        self.head = self.add_module("head", OutputHead(rng, head_in, cfg.out_channels, cfg.final_activation))

    def _build_baseline(self, rng):
        cfg = self.config
        downs = log2(cfg.image_size / 4)
        if downs != int(downs) or downs < 1:
            raise ConfigError(f"baseline models need an image size of 4 * 2^k, got {cfg.image_size}")
        downs = int(downs)
        ladder = [min(64 * 2 ** i, 512) for i in range(downs)]
        self.enc_layers: list[tuple[Conv2d, BatchNorm]] = []
        in_ch = cfg.in_channels
        for i, ch in enumerate(ladder):
            conv = self.add_module(f"enc.{i}.conv", Conv2d(rng, in_ch, ch, 3, stride=2))
            bn = self.add_module(f"enc.{i}.bn", BatchNorm(ch))
            self.enc_layers.append((conv, bn))
            in_ch = ch
        self.bottleneck_conv = self.add_module("bottleneck.conv", Conv2d(rng, in_ch, in_ch, 3))
        self.bottleneck_bn = self.add_module("bottleneck.bn", BatchNorm(in_ch))
        self.use_skips = cfg.variant == "unet"
        self.dec_layers: list[tuple[ConvTranspose2d, BatchNorm]] = []
        cur = in_ch
        for i in range(downs):
            out_ch = ladder[downs - 1 - i] // 2
            ct = self.add_module(f"dec.{i}.ct", ConvTranspose2d(rng, cur, out_ch, kernel=4, stride=2))
            bn = self.add_module(f"dec.{i}.bn", BatchNorm(out_ch))
            self.dec_layers.append((ct, bn))
            cur = out_ch
            if self.use_skips and i < downs - 1:
                cur += ladder[downs - 2 - i]
        self.head = self.add_module("head", OutputHead(rng, cur, cfg.out_channels, cfg.final_activation))

    # -- forward ------------------------------------------------------------

    def forward(self, images, mode: str = "eval") -> Tensor:
        """Run the model; output spatial size equals input spatial size."""
        images = T.as_tensor(images)
        if images.data.ndim != 4:
            raise DimensionError(f"forward: expected NHWC images, got {images.shape}")
        n, h, w, c = images.shape
        cfg = self.config
        if h != cfg.image_size or w != cfg.image_size or c != cfg.in_channels:
            raise DimensionError(
                f"forward: input {h}x{w}x{c} does not match configured "
                f"{cfg.image_size}x{cfg.image_size}x{cfg.in_channels}"
            )
        if cfg.variant in ("A", "B", "C"):
            return self._forward_vit(images, mode)
        return self._forward_baseline(images, mode)

    __call__ = forward

    def _forward_vit(self, images, mode):
        from .encoder import extract_patches

        cfg = self.config
        encoded = self.encoder.patch(extract_patches(images, cfg.patch_size))
        tokens = encoded
        for layer in self.encoder.layers:
            tokens = layer(tokens)
        act = tokens_to_grid(tokens)
        if cfg.variant == "B":
            skip_grid = tokens_to_grid(encoded)
            for i, stage in enumerate(self.stages):
                if i > 0:
                    act = upsample_concat(skip_grid, act, self.skip_projs[i - 1])
                act = stage(act, mode)
            act = upsample_concat(skip_grid, act, self.skip_projs[-1])
        else:
            for stage in self.stages:
                act = stage(act, mode)
        return self.head(act)

    def _forward_baseline(self, images, mode):
        skips = []
        act = images
        for conv, bn in self.enc_layers:
            act = T.leaky_relu(bn(conv(act), mode), LEAKY_SLOPE)
            skips.append(act)
        act = T.leaky_relu(self.bottleneck_bn(self.bottleneck_conv(act), mode), LEAKY_SLOPE)
        n_dec = len(self.dec_layers)
        for i, (ct, bn) in enumerate(self.dec_layers):
            act = T.leaky_relu(bn(ct(act), mode), LEAKY_SLOPE)
            if self.use_skips and i < n_dec - 1:
                act = T.concat([act, skips[n_dec - 2 - i]], axis=-1)
        return self.head(act)

    # -- introspection ------------------------------------------------------

    def shape_manifest(self) -> dict[str, tuple[int, ...]]:
        """Parameter name -> shape, a pure function of the config."""
        return {name: p.shape for name, p in self.named_parameters()}


def build_generator(config: ModelConfig) -> Generator:
    """Build any variant (A, B, C) or baseline from a validated config."""
    return Generator(config)


def build_baselines(config: ModelConfig) -> Generator:
    """Build a 'unet' or 'autoencoder' comparison model."""
    if config.variant not in ("unet", "autoencoder"):
        raise ConfigError(f"build_baselines expects variant 'unet' or 'autoencoder', got {config.variant!r}")
    return Generator(config)


# ---------------------------------------------------------------------------
# checkpoints
#
# Little-endian binary layout (documented in README):
#   magic   4 bytes  "V2IG"
#   version u32      currently 1
#   header  u32 length, then UTF-8 JSON {config, constants, seed}
#   count   u32      number of array records
#   record  u16 name length, name bytes, u8 kind (0 param / 1 buffer /
#           2 optimizer), u8 ndim, ndim * u32 dims, float64 payload
#   crc32   u32      over every preceding byte

CHECKPOINT_MAGIC = b"V2IG"
CHECKPOINT_VERSION = 1

KIND_PARAM, KIND_BUFFER, KIND_OPT = 0, 1, 2


def _pack_record(name: str, kind: int, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    out = [struct.pack("<H", len(nb)), nb, struct.pack("<BB", kind, arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(gen: Generator, path, optimizer_state: Optional[dict] = None) -> None:
    """Write the generator (and optionally Adam state) to ``path``."""
    header = json.dumps({
        "config": gen.config.to_dict(),
        "constants": DESIGN_CONSTANTS,
        "seed": gen.config.seed,
    }, sort_keys=True).encode("utf-8")
    records = []
    for name, p in gen.named_parameters():
        records.append(_pack_record(name, KIND_PARAM, p.data))
    for name, arr in gen.named_buffers():
        records.append(_pack_record(name, KIND_BUFFER, arr))
    if optimizer_state is not None:
        records.append(_pack_record("adam.t", KIND_OPT, np.array([float(optimizer_state["t"])])))
        for name, (m, v) in optimizer_state["moments"].items():
            records.append(_pack_record(f"adam.m.{name}", KIND_OPT, m))
            records.append(_pack_record(f"adam.v.{name}", KIND_OPT, v))
    body = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(header)), header,
        struct.pack("<I", len(records)), *records,
    ])
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _read_records(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 4 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: bad magic bytes, not a checkpoint")
    if len(blob) < 8:
        raise CheckpointFormatError(f"{path}: truncated before version field")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointFormatError(f"{path}: CRC mismatch, file is corrupt")
    r = _Reader(blob[:-4])
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    count = r.u32()
    records: dict[str, tuple[int, np.ndarray]] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        kind = r.u8()
        ndim = r.u8()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
        records[name] = (kind, arr)
    return header, records


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None,
                    with_state: bool = False):
    """Rebuild a Generator from a checkpoint file.

    When ``expected_config`` is given, the stored parameter name set must
    match the architecture that config implies.  With ``with_state`` the
    saved Adam state (or None) is returned alongside the generator.
    """
    header, records = _read_records(path)
    config = ModelConfig.from_dict(header["config"])
    gen = Generator(config)
    file_params = {n for n, (k, _) in records.items() if k == KIND_PARAM}
    file_buffers = {n for n, (k, _) in records.items() if k == KIND_BUFFER}
    model_params = {n for n, _ in gen.named_parameters()}
    model_buffers = {n for n, _ in gen.named_buffers()}
    if file_params != model_params or file_buffers != model_buffers:
        missing = sorted(model_params - file_params) + sorted(model_buffers - file_buffers)
        extra = sorted(file_params - model_params) + sorted(file_buffers - model_buffers)
        raise CheckpointMismatchError(
            f"{path}: parameter name set does not match its own config "
            f"(missing {missing[:4]}, unexpected {extra[:4]})"
        )
    if expected_config is not None:
        expected = Generator(expected_config.validated())
        expected_names = {n for n, _ in expected.named_parameters()}
        if expected_names != model_params:
            raise CheckpointMismatchError(
                f"{path}: checkpoint holds a {config.variant!r} model; it does not "
                f"match the expected {expected_config.variant!r} architecture"
            )
    for name, p in gen.named_parameters():
        kind, arr = records[name]
        if arr.shape != p.shape:
            raise CheckpointMismatchError(
                f"{path}: stored {name} has shape {arr.shape}, model expects {p.shape}"
            )
        p.data = np.ascontiguousarray(arr)
    for name, buf in gen.named_buffers():
        _, arr = records[name]
        buf[...] = arr
    if not with_state:
        return gen
    state = None
    if "adam.t" in records:
        moments = {}
        for name in model_params:
            m = records.get(f"adam.m.{name}")
            v = records.get(f"adam.v.{name}")
            if m is not None and v is not None:
                moments[name] = (m[1], v[1])
        state = {"t": int(records["adam.t"][1][0]), "moments": moments}
    return gen, state
