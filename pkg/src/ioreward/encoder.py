"""Hierarchical windowed-attention encoder producing feature taps S1..S5.

Attention logits inside each window are cos(q, k) / tau + B with a learned
per-head temperature tau and a learned relative-position bias table B.
Blocks use post-normalization order: the residual add happens before the
layernorm that feeds the next sub-layer.

Stage layout (pinned by the tap-shape law): S1 is the patch-embedding
output; stage 1 runs at S1's resolution; patch merging halves the grid and
doubles channels on entry to stages 2 and 3; stage 4 runs at stage 3's
resolution. Taps S2..S5 are the four stage outputs, giving channel widths
(d, d, 2d, 4d, 4d) for embed dim d.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Mlp, Module, trunc_normal
from .tensor import MASK_NEG, Tensor

STAGE_TAGS = ("S1", "S2", "S3", "S4", "S5")
MLP_RATIO = 4.0
TAU_INIT = 1.0
TAU_MIN = 0.01


@dataclass
class EncoderConfig:
    """Hyperparameters pinning one encoder instance."""

    in_channels: int = 3
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 16
    depths: Tuple[int, ...] = (1, 1, 2, 1)
    num_heads: Tuple[int, ...] = (1, 2, 4, 4)
    window_size: int = 4
    drop_path: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image size "
                f"{self.image_size}")
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("depths and num_heads must list 4 stages")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path {self.drop_path} outside [0, 1)")
        for k, (dim, heads) in enumerate(zip(self.stage_dims(),
                                             self.num_heads)):
            if dim % heads:
                raise ConfigError(
                    f"stage {k}: dim {dim} not divisible by {heads} heads")
        for k, grid in enumerate(self.stage_grids()):
            w = self.stage_window(k)
            if grid % w:
                raise ConfigError(
                    f"stage {k}: window {w} does not divide grid {grid}")

    def base_grid(self) -> int:
        return self.image_size // self.patch_size

    def stage_dims(self) -> Tuple[int, int, int, int]:
        d = self.embed_dim
        return (d, 2 * d, 4 * d, 4 * d)

    def stage_grids(self) -> Tuple[int, int, int, int]:
        g = self.base_grid()
        return (g, g // 2, g // 4, g // 4)

    def stage_window(self, k: int) -> int:
        # Windows never exceed the grid; the capped size must divide it.
        return min(self.window_size, self.stage_grids()[k])

    def tap_shapes(self) -> Dict[str, Tuple[int, int, int]]:
        g = self.base_grid()
        d = self.embed_dim
        grids = (g,) + self.stage_grids()
        dims = (d,) + self.stage_dims()
        return {tag: (grids[i], grids[i], dims[i])
                for i, tag in enumerate(STAGE_TAGS)}


@dataclass
class FeatureMap:
    """Spatial token grid [batch, height, width, channels]."""

    data: Tensor
    stage_tag: Optional[str] = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(
                f"FeatureMap expects [B,H,W,C] data, got {self.data.shape}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


def relative_position_index(w: int) -> np.ndarray:
    """Bijective map from (query, key) window positions to bias-table rows."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = (flat[:, :, None] - flat[:, None, :]).transpose(1, 2, 0)
    rel[..., 0] += w - 1
    rel[..., 1] += w - 1
    rel[..., 0] *= 2 * w - 1
    return rel.sum(-1)


def shift_attention_mask(h: int, w_grid: int, w: int, s: int,
                         dtype=np.float32) -> np.ndarray:
    """Standard cross-window mask for cyclic shift s: [num_windows, N, N]
    additive logits (0 where attention is allowed, MASK_NEG where the
    rolled tokens wrapped around)."""
    if s <= 0:
        raise ConfigError("shift mask requires a positive shift")
    img = np.zeros((h, w_grid))
    cnt = 0
    for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
        for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            img[hs, ws] = cnt
            cnt += 1
    mw = img.reshape(h // w, w, w_grid // w, w).transpose(0, 2, 1, 3)
    mw = mw.reshape(-1, w * w)
    diff = mw[:, None, :] != mw[:, :, None]
    return np.where(diff, MASK_NEG, 0.0).astype(dtype)


class WindowAttentionParams(Module):
    """Learned state of one windowed cosine-attention layer.

    Per head: temperature tau (clamped to >= 0.01 after optimizer steps)
    and a (2w-1)^2-entry relative position bias table indexed by a fixed
    bijection over in-window offsets. Q/K/V and output projections are
    plain affine layers.
    """

    def __init__(self, dim: int, heads: int, window_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        # Q and K start as the same map so cos(Q(x), K(y)) initially tracks
        # the raw feature similarity of x and y; they decouple in training.
        self.k.w.data = self.q.w.data.copy()
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.tau = Tensor(np.full(heads, TAU_INIT, dtype=dtype),
                          requires_grad=True)
        self.tau.clamp_min = TAU_MIN
        n_bias = (2 * window_size - 1) ** 2
        self.bias_table = Tensor(np.zeros((n_bias, heads), dtype=dtype),
                                 requires_grad=True)
        self.heads = heads
        self.window_size = window_size
        self.rel_index = relative_position_index(window_size)

    def attend(self, wins: Tensor, mask: Optional[np.ndarray],
               nwin: int, stats: Optional[dict] = None) -> Tensor:
        """Cosine attention over flat windows [NW, N, C]."""
        nw, n, c = wins.shape
        h = self.heads
        dh = c // h

        def split_heads(t):
            return T.transpose(T.reshape(t, (nw, n, h, dh)), (0, 2, 1, 3))

        q = split_heads(self.q(wins))
        k = split_heads(self.k(wins))
        v = split_heads(self.v(wins))
        attn = T.cosine_similarity_matrix(q, k)              # [NW, h, N, N]
        attn = T.div(attn, T.reshape(self.tau, (h, 1, 1)))
        bias = T.transpose(T.take_rows(self.bias_table, self.rel_index),
                           (2, 0, 1))                        # [h, N, N]
        attn = T.add(attn, bias)
        if mask is not None:
            b = nw // nwin
            attn = T.reshape(attn, (b, nwin, h, n, n))
            attn = T.add(attn, Tensor(
                mask[None, :, None, :, :].astype(wins.data.dtype)))
            attn = T.reshape(attn, (nw, h, n, n))
        attn = T.softmax_rows(attn)
        if stats is not None:
            stats["attn_weights"] = attn.data.copy()
            stats["q"], stats["k"], stats["v"] = q, k, v
        out = T.matmul(attn, v)                              # [NW, h, N, dh]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (nw, n, c))
        if stats is not None:
            stats["pre_projection"] = out.data.copy()
        return self.proj(out)


def _attention_on_grid(x: Tensor, p: WindowAttentionParams, shifted: bool,
                       stats: Optional[dict] = None) -> Tensor:
    """Window attention over a [B, H, W, C] grid, with optional cyclic shift
    plus cross-window mask, inverse-shifted on the way out."""
    b, h_grid, w_grid, _ = x.shape
    w = p.window_size
    if h_grid % w or w_grid % w:
        raise ConfigError(
            f"window {w} does not divide grid {h_grid}x{w_grid}")
    s = w // 2 if shifted else 0
    mask = None
    if s > 0:
        x = T.cyclic_shift(x, -s, -s)
        mask = shift_attention_mask(h_grid, w_grid, w, s, x.data.dtype)
    wins = T.window_partition(x, w)
    nwin = (h_grid // w) * (w_grid // w)
    out = p.attend(wins, mask, nwin, stats=stats)
    out = T.window_reverse(out, w, h_grid, w_grid, batch=b)
    if s > 0:
        out = T.cyclic_shift(out, s, s)
    return out


def window_self_attention(x: FeatureMap, p: WindowAttentionParams,
                          shifted: bool,
                          stats: Optional[dict] = None) -> FeatureMap:
    """Windowed cosine self-attention over a feature map (no residual)."""
    return FeatureMap(_attention_on_grid(x.data, p, shifted, stats=stats),
                      stage_tag=x.stage_tag)


class PatchEmbed(Module):
    """Non-overlapping patch projection followed by layernorm.

    Patches are flattened row-major as (patch_row, patch_col, channel)
    before the affine map.
    """

    def __init__(self, in_channels: int, patch_size: int, embed_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(patch_size * patch_size * in_channels, embed_dim,
                           rng, dtype=dtype)
        self.norm = LayerNorm(embed_dim, dtype=dtype)
        self.patch_size = patch_size
        self.in_channels = in_channels

    def project_grid(self, x: Tensor) -> Tensor:
        """Patchify + affine map, before the layernorm."""
        b, h, w, c = x.shape
        p = self.patch_size
        if h % p or w % p or c != self.in_channels:
            raise ConfigError(
                f"grid {x.shape} incompatible with patch {p} x {p} "
                f"over {self.in_channels} channels")
        t = T.reshape(x, (b, h // p, p, w // p, p, c))
        t = T.transpose(t, (0, 1, 3, 2, 4, 5))
        t = T.reshape(t, (b, h // p, w // p, p * p * c))
        return self.proj(t)

    def embed_grid(self, x: Tensor) -> Tensor:
        return self.norm(self.project_grid(x))

    def __call__(self, image: Tensor) -> Tensor:
        """Embed a [B, C, H, W] image into a [B, H/p, W/p, D] grid."""
        if image.ndim != 4:
            raise ConfigError(f"expected [B,C,H,W] image, got {image.shape}")
        return self.embed_grid(T.transpose(image, (0, 2, 3, 1)))


class PatchMerge(Module):
    """2x2 neighborhood concat (row-major over the 2x2 offsets) projected
    from 4C down to 2C channels; halves each spatial side."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False,
                                dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"patch merge needs even extents, got {h}x{w}")
        t = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
        t = T.transpose(t, (0, 1, 3, 2, 4, 5))
        t = T.reshape(t, (b, h // 2, w // 2, 4 * c))
        return self.reduction(t)


def patch_merge(x: FeatureMap, m: PatchMerge) -> FeatureMap:
    return FeatureMap(m(x.data), stage_tag=x.stage_tag)


class SwinBlock(Module):
    """Attention + MLP block in post-normalization order:
    x -> norm(x + attn(x)) -> norm(.. + mlp(..))."""

    def __init__(self, dim: int, heads: int, window_size: int, shift: bool,
                 rng: np.random.Generator, drop_path: float = 0.0,
                 dtype=np.float32):
        self.attn = WindowAttentionParams(dim, heads, window_size, rng,
                                          dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * MLP_RATIO), rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.shift = shift
        self.drop_path = drop_path
        self.training = False

    def _branch(self, t: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        if self.drop_path > 0.0 and self.training and rng is not None:
            keep = 0.0 if rng.random() < self.drop_path else \
                1.0 / (1.0 - self.drop_path)
            t = T.mul(t, keep)
        return t

    def __call__(self, x: Tensor,
                 droppath_rng: Optional[np.random.Generator] = None) -> Tensor:
        a = _attention_on_grid(x, self.attn, shifted=self.shift)
        a.label = "attn_out"
        r1 = T.add(x, self._branch(a, droppath_rng))
        r1.label = "residual_add_attn"
        y = self.norm1(r1)
        y.label = "post_norm_attn"
        m = self.mlp(y)
        m.label = "mlp_out"
        r2 = T.add(y, self._branch(m, droppath_rng))
        r2.label = "residual_add_mlp"
        out = self.norm2(r2)
        out.label = "post_norm_mlp"
        return out


class SwinEncoder(Module):
    """Four-stage encoder exporting taps S1..S5.

    S1 is the patch-embedding output, S2..S5 the stage outputs. Blocks
    within a stage alternate plain and shifted windows; the shift is
    suppressed when the (capped) window covers the whole grid.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.patch_size,
                                      cfg.embed_dim, rng, dtype=dtype)
        dims = cfg.stage_dims()
        grids = cfg.stage_grids()
        self.merges = [PatchMerge(cfg.embed_dim, rng, dtype=dtype),
                       PatchMerge(2 * cfg.embed_dim, rng, dtype=dtype)]
        self.stages: List[List[SwinBlock]] = []
        for k in range(4):
            w_eff = cfg.stage_window(k)
            blocks = []
            for i in range(cfg.depths[k]):
                shifted = (i % 2 == 1) and w_eff < grids[k]
                blocks.append(SwinBlock(dims[k], cfg.num_heads[k], w_eff,
                                        shifted, rng,
                                        drop_path=cfg.drop_path, dtype=dtype))
            self.stages.append(blocks)
        self.droppath_rng: Optional[np.random.Generator] = None
        self.training = False

    def encode(self, image: Tensor) -> Dict[str, FeatureMap]:
        """Run the full encoder, returning all five taps."""
        if image.ndim == 3:
            image = T.reshape(image, (1,) + image.shape)
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels or \
                image.shape[2] != self.cfg.image_size or \
                image.shape[3] != self.cfg.image_size:
            raise ConfigError(
                f"image shape {image.shape} does not match config "
                f"[{self.cfg.in_channels},{self.cfg.image_size},"
                f"{self.cfg.image_size}]")
        rng = self.droppath_rng if self.training else None
        x = self.patch_embed(image)
        taps = {"S1": FeatureMap(x, stage_tag="S1")}
        for k in range(4):
            if k in (1, 2):
                x = self.merges[k - 1](x)
            for block in self.stages[k]:
                x = block(x, droppath_rng=rng)
            taps[STAGE_TAGS[k + 1]] = FeatureMap(x,
                                                 stage_tag=STAGE_TAGS[k + 1])
        return taps

    def __call__(self, image: Tensor) -> FeatureMap:
        return self.encode(image)["S5"]
