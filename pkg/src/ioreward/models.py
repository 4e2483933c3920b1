"""The reward-model architectures and classifier baselines.

Variants:
  io-v8            two decoupled encoders, one cross-attention fusion at S5
  io-w12           two decoupled encoders, five cross stacks over taps S1..S5
                   with a progressively downsampled fused stream
  output-base      single encoder over the output image, linear head
  output-nlayers   output-base plus n global self-attention + MLP blocks
  siamese-io       io-v8 wiring with one shared encoder
  concat-baseline  channel-concatenated pair through one 6-channel encoder
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .cross import CrossAttentionParams, CrossBlockStack, cross_attend
from .encoder import (EncoderConfig, FeatureMap, PatchEmbed, PatchMerge,
                      SwinEncoder)
from .errors import ConfigError, ContractError, WiringError
from .nn import LayerNorm, Linear, Mlp, Module
from .tensor import Tensor

VARIANTS = ("io-v8", "io-w12", "output-base", "output-nlayers",
            "siamese-io", "concat-baseline")


@dataclass
class ModelConfig:
    variant: str = "io-v8"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_classes: int = 2
    head_hidden: int = 64
    cyclic_shift_in_cross: bool = False
    output_extra_layers: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.num_classes != 2:
            raise ConfigError("binary classification only: num_classes = 2")
        if self.variant == "output-nlayers" and self.output_extra_layers < 1:
            raise ConfigError("output-nlayers requires n >= 1 extra layers")
        if self.variant == "concat-baseline":
            if self.encoder.in_channels != 6:
                raise ConfigError(
                    "concat-baseline needs a 6-channel encoder config")
        elif self.encoder.in_channels != 3:
            raise ConfigError(f"{self.variant} expects 3-channel images")

    def to_dict(self) -> dict:
        enc = self.encoder
        return {
            "variant": self.variant,
            "encoder": {
                "in_channels": enc.in_channels,
                "image_size": enc.image_size,
                "patch_size": enc.patch_size,
                "embed_dim": enc.embed_dim,
                "depths": list(enc.depths),
                "num_heads": list(enc.num_heads),
                "window_size": enc.window_size,
                "drop_path": enc.drop_path,
            },
            "num_classes": self.num_classes,
            "head_hidden": self.head_hidden,
            "cyclic_shift_in_cross": self.cyclic_shift_in_cross,
            "output_extra_layers": self.output_extra_layers,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        enc = d["encoder"]
        return ModelConfig(
            variant=d["variant"],
            encoder=EncoderConfig(
                in_channels=enc["in_channels"],
                image_size=enc["image_size"],
                patch_size=enc["patch_size"],
                embed_dim=enc["embed_dim"],
                depths=tuple(enc["depths"]),
                num_heads=tuple(enc["num_heads"]),
                window_size=enc["window_size"],
                drop_path=enc["drop_path"],
            ),
            num_classes=d["num_classes"],
            head_hidden=d["head_hidden"],
            cyclic_shift_in_cross=d["cyclic_shift_in_cross"],
            output_extra_layers=d["output_extra_layers"],
            seed=d["seed"],
        )


@dataclass
class ClassifierOutput:
    logits: Tensor
    probabilities: np.ndarray

    @staticmethod
    def from_logits(logits: Tensor, single: bool) -> "ClassifierOutput":
        if single:
            logits = T.reshape(logits, (logits.shape[-1],))
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return ClassifierOutput(logits, e / e.sum(axis=-1, keepdims=True))


def _as_image(x, channels: int, size: int, dtype) -> Tuple[Tensor, bool]:
    """Normalize an image argument to a batched [B, C, H, W] tensor."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if t.data.dtype != dtype:
        t = Tensor(t.data.astype(dtype))
    single = t.ndim == 3
    if single:
        t = T.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != channels or t.shape[2] != size or \
            t.shape[3] != size:
        raise ConfigError(
            f"expected image [{channels},{size},{size}], got {t.shape}")
    return t, single


class GlobalAttnBlock(Module):
    """Scaled dot-product self-attention + MLP over a token sequence,
    post-normalization order."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, 4 * dim, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h = self.heads
        dh = c // h

        def split(t):
            return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                     1.0 / np.sqrt(dh))
        attn = T.softmax_rows(attn)
        out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)),
                        (b, n, c))
        x = self.norm1(T.add(x, self.proj(out)))
        return self.norm2(T.add(x, self.mlp(x)))


class IOV8Model(Module):
    """Dual decoupled encoders fused by one cross-attention block at S5."""

    arity = "pair"

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed).spawn(4)
        enc = cfg.encoder
        # Both encoders start from the same initialization (the desk-scale
        # stand-in for a shared pretrained backbone) but are fully separate
        # parameter sets that decouple from the first update on.
        self.input_encoder = SwinEncoder(enc, seed=ss[0], dtype=dtype)
        self.output_encoder = SwinEncoder(enc, seed=ss[0], dtype=dtype)
        dim = enc.stage_dims()[-1]
        grid = enc.stage_grids()[-1]
        self.cross = CrossAttentionParams(
            dim, enc.num_heads[-1], min(enc.window_size, grid),
            np.random.default_rng(ss[2]),
            cyclic_shift_enabled=cfg.cyclic_shift_in_cross, dtype=dtype)
        self.head = Linear(dim, cfg.num_classes,
                           np.random.default_rng(ss[3]), dtype=dtype)
        self.dtype = dtype

    def fuse(self, x_in: Tensor, x_out: Tensor) -> FeatureMap:
        s5_in = self.input_encoder.encode(x_in)["S5"]
        s5_out = self.output_encoder.encode(x_out)["S5"]
        return cross_attend(s5_in, s5_out, self.cross)

    def forward(self, x_in, x_out) -> ClassifierOutput:
        enc = self.cfg.encoder
        x_in, single = _as_image(x_in, enc.in_channels, enc.image_size,
                                 self.dtype)
        x_out, _ = _as_image(x_out, enc.in_channels, enc.image_size,
                             self.dtype)
        fused = self.fuse(x_in, x_out)
        logits = self.head(T.mean_pool_map(fused.data))
        return ClassifierOutput.from_logits(logits, single)

    __call__ = forward


class SiameseIOModel(Module):
    """io-v8 wiring with a single shared encoder for both streams."""

    arity = "pair"

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed).spawn(4)
        enc = cfg.encoder
        self.encoder = SwinEncoder(enc, seed=ss[0], dtype=dtype)
        dim = enc.stage_dims()[-1]
        grid = enc.stage_grids()[-1]
        self.cross = CrossAttentionParams(
            dim, enc.num_heads[-1], min(enc.window_size, grid),
            np.random.default_rng(ss[2]),
            cyclic_shift_enabled=cfg.cyclic_shift_in_cross, dtype=dtype)
        self.head = Linear(dim, cfg.num_classes,
                           np.random.default_rng(ss[3]), dtype=dtype)
        self.dtype = dtype

    def forward(self, x_in, x_out) -> ClassifierOutput:
        enc = self.cfg.encoder
        x_in, single = _as_image(x_in, enc.in_channels, enc.image_size,
                                 self.dtype)
        x_out, _ = _as_image(x_out, enc.in_channels, enc.image_size,
                             self.dtype)
        s5_in = self.encoder.encode(x_in)["S5"]
        s5_out = self.encoder.encode(x_out)["S5"]
        fused = cross_attend(s5_in, s5_out, self.cross)
        logits = self.head(T.mean_pool_map(fused.data))
        return ClassifierOutput.from_logits(logits, single)

    __call__ = forward


class OutputModel(Module):
    """Single-stream classifier over the output image alone; architecturally
    blind to the input. output-nlayers appends n global attention blocks."""

    arity = "single"

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed).spawn(4)
        enc = cfg.encoder
        self.encoder = SwinEncoder(enc, seed=ss[0], dtype=dtype)
        dim = enc.stage_dims()[-1]
        n_extra = (cfg.output_extra_layers
                   if cfg.variant == "output-nlayers" else 0)
        rng = np.random.default_rng(ss[2])
        self.extra_blocks = [GlobalAttnBlock(dim, enc.num_heads[-1], rng,
                                             dtype=dtype)
                             for _ in range(n_extra)]
        self.head = Linear(dim, cfg.num_classes,
                           np.random.default_rng(ss[3]), dtype=dtype)
        self.dtype = dtype

    def forward(self, x_out) -> ClassifierOutput:
        enc = self.cfg.encoder
        x_out, single = _as_image(x_out, enc.in_channels, enc.image_size,
                                  self.dtype)
        fm = self.encoder.encode(x_out)["S5"]
        b, h, w, c = fm.data.shape
        tokens = T.reshape(fm.data, (b, h * w, c))
        for blk in self.extra_blocks:
            tokens = blk(tokens)
        logits = self.head(T.tmean(tokens, axis=1))
        return ClassifierOutput.from_logits(logits, single)

    __call__ = forward


class ConcatBaselineModel(Module):
    """Channel-concatenated pair through a single 6-channel encoder."""

    arity = "pair"

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed).spawn(4)
        enc = cfg.encoder
        self.encoder = SwinEncoder(enc, seed=ss[0], dtype=dtype)
        dim = enc.stage_dims()[-1]
        self.head = Linear(dim, cfg.num_classes,
                           np.random.default_rng(ss[3]), dtype=dtype)
        self.dtype = dtype

    def forward(self, x_in, x_out) -> ClassifierOutput:
        enc = self.cfg.encoder
        x_in, single = _as_image(x_in, 3, enc.image_size, self.dtype)
        x_out, _ = _as_image(x_out, 3, enc.image_size, self.dtype)
        pair = T.concat([x_in, x_out], axis=1)
        fm = self.encoder.encode(pair)["S5"]
        logits = self.head(T.mean_pool_map(fm.data))
        return ClassifierOutput.from_logits(logits, single)

    __call__ = forward


class IOW12Model(Module):
    """Five cross stacks over taps S1..S5 with a downsampled fused stream.

    The fused stream starts as cross(S1 taps) and is downsampled between
    stacks by patch embedding (stride 1 then stride 2) and one patch merge,
    mirroring the encoders' tap trajectory. At stack k the stream is the
    query source; the stage-k taps are linearly projected to the stream's
    width, the input tap feeding K/V and the output tap joining the query
    stream additively.
    """

    arity = "pair"
    STACK_COUNTS = (1, 2, 2, 2, 2)

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed).spawn(5)
        enc = cfg.encoder
        # same shared-initialization scheme as io-v8
        self.input_encoder = SwinEncoder(enc, seed=ss[0], dtype=dtype)
        self.output_encoder = SwinEncoder(enc, seed=ss[0], dtype=dtype)
        d = enc.embed_dim
        g = enc.base_grid()
        if g % 4:
            raise ConfigError("io-w12 needs a base token grid divisible by 4")
        self.tap_dims = (d, d, 2 * d, 4 * d, 4 * d)
        self.tap_grids = (g, g, g // 2, g // 4, g // 4)
        tap_heads = (enc.num_heads[0], enc.num_heads[0], enc.num_heads[1],
                     enc.num_heads[2], enc.num_heads[3])
        rng = np.random.default_rng(ss[2])
        self.proj_i = [Linear(dim, dim, rng, dtype=dtype)
                       for dim in self.tap_dims]
        self.proj_o = [Linear(dim, dim, rng, dtype=dtype)
                       for dim in self.tap_dims]
        self.stacks = [CrossBlockStack(
            self.tap_dims[k], tap_heads[k],
            min(enc.window_size, self.tap_grids[k]), self.STACK_COUNTS[k],
            rng, cyclic_shift_enabled=cfg.cyclic_shift_in_cross, dtype=dtype)
            for k in range(5)]
        rng_ds = np.random.default_rng(ss[3])
        self.down1 = PatchEmbed(d, 1, d, rng_ds, dtype=dtype)
        self.down2 = PatchEmbed(d, 2, 2 * d, rng_ds, dtype=dtype)
        self.down3 = PatchMerge(2 * d, rng_ds, dtype=dtype)
        self.head = Mlp(4 * d, cfg.head_hidden,
                        np.random.default_rng(ss[4]), out_dim=cfg.num_classes,
                        dtype=dtype)
        self.dtype = dtype
        self.tap_log: List[Tuple[int, int]] = []

    def _stack_step(self, k: int, stream: FeatureMap,
                    taps_i: Dict[str, FeatureMap],
                    taps_o: Dict[str, FeatureMap]) -> FeatureMap:
        tag = f"S{k + 1}"
        ti = FeatureMap(self.proj_i[k](taps_i[tag].data), stage_tag=tag)
        to = self.proj_o[k](taps_o[tag].data)
        if ti.data.shape != stream.data.shape:
            raise WiringError(
                f"stack {k + 1}: tap {ti.data.shape} vs stream "
                f"{stream.data.shape}")
        self.tap_log.append((k + 1, ti.channels))
        entry = FeatureMap(T.add(stream.data, to), stage_tag=tag)
        return self.stacks[k](ti, entry)

    def forward(self, x_in, x_out) -> ClassifierOutput:
        enc = self.cfg.encoder
        x_in, single = _as_image(x_in, enc.in_channels, enc.image_size,
                                 self.dtype)
        x_out, _ = _as_image(x_out, enc.in_channels, enc.image_size,
                             self.dtype)
        taps_i = self.input_encoder.encode(x_in)
        taps_o = self.output_encoder.encode(x_out)
        self.tap_log = []
        # Stack 1 initializes the fused stream from the S1 taps.
        i1 = FeatureMap(self.proj_i[0](taps_i["S1"].data), stage_tag="S1")
        o1 = FeatureMap(self.proj_o[0](taps_o["S1"].data), stage_tag="S1")
        self.tap_log.append((1, i1.channels))
        stream = self.stacks[0](i1, o1)
        stream = FeatureMap(self.down1.embed_grid(stream.data))
        stream = self._stack_step(1, stream, taps_i, taps_o)
        stream = FeatureMap(self.down2.embed_grid(stream.data))
        stream = self._stack_step(2, stream, taps_i, taps_o)
        stream = FeatureMap(self.down3(stream.data))
        stream = self._stack_step(3, stream, taps_i, taps_o)
        stream = self._stack_step(4, stream, taps_i, taps_o)
        logits = self.head(T.mean_pool_map(stream.data))
        return ClassifierOutput.from_logits(logits, single)

    __call__ = forward


ModelType = Union[IOV8Model, IOW12Model, OutputModel, SiameseIOModel,
                  ConcatBaselineModel]


def desk_encoder_config(in_channels: int = 3,
                        image_size: int = 32) -> EncoderConfig:
    """Default desk-scale encoder: trains on CPU in minutes and satisfies
    every divisibility precondition."""
    return EncoderConfig(in_channels=in_channels, image_size=image_size)


def micro_encoder_config(in_channels: int = 3) -> EncoderConfig:
    """Smallest sensible encoder, used by the f64 gradient audits."""
    return EncoderConfig(in_channels=in_channels, image_size=8, patch_size=2,
                         embed_dim=4, depths=(1, 1, 1, 1),
                         num_heads=(1, 1, 2, 2), window_size=2)


def build_model(cfg: ModelConfig, dtype=np.float32) -> ModelType:
    if cfg.variant == "io-v8":
        return IOV8Model(cfg, dtype=dtype)
    if cfg.variant == "io-w12":
        return IOW12Model(cfg, dtype=dtype)
    if cfg.variant in ("output-base", "output-nlayers"):
        return OutputModel(cfg, dtype=dtype)
    if cfg.variant == "siamese-io":
        return SiameseIOModel(cfg, dtype=dtype)
    if cfg.variant == "concat-baseline":
        return ConcatBaselineModel(cfg, dtype=dtype)
    raise ConfigError(f"unknown variant {cfg.variant!r}")
