"""Cosine cross-attention fusing output-encoder queries with input-encoder
keys/values.

Per window and head the logits are cos(Q(o), K(i)) / tau + B; the weighted
values come from the input side only. The residual connection wraps the
query (output) stream and the block ends with a post-norm layernorm. An
optional cyclic shift (with the standard cross-window mask) rolls both
feature maps before attention and rolls the result back, reproducing the
shift-in-cross ablation axis.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from . import tensor as T
from .encoder import (FeatureMap, relative_position_index,
                      shift_attention_mask, TAU_INIT, TAU_MIN)
from .errors import ConfigError, ContractError, WiringError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


class CrossAttentionParams(Module):
    """Learned state of one cross-attention block.

    The Q projection only ever sees output-encoder features; K and V only
    input-encoder features. tau is per head, clamped to >= 0.01 after
    optimizer steps; the relative position bias table is separate per block.
    """

    def __init__(self, dim: int, heads: int, window_size: int,
                 rng: np.random.Generator, cyclic_shift_enabled: bool = False,
                 dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        # matched Q/K init: cosine logits start out reflecting raw
        # feature similarity between the two streams
        self.k.w.data = self.q.w.data.copy()
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        self.tau = Tensor(np.full(heads, TAU_INIT, dtype=dtype),
                          requires_grad=True)
        self.tau.clamp_min = TAU_MIN
        self.bias_table = Tensor(
            np.zeros(((2 * window_size - 1) ** 2, heads), dtype=dtype),
            requires_grad=True)
        self.heads = heads
        self.window_size = window_size
        self.cyclic_shift_enabled = cyclic_shift_enabled
        self.rel_index = relative_position_index(window_size)


def cross_attend(i_feat: FeatureMap, o_feat: FeatureMap,
                 p: CrossAttentionParams,
                 stats: Optional[dict] = None) -> FeatureMap:
    """One cross-attention block: softmax(cos(Q(o), K(i))/tau + B) V(i),
    heads concatenated, output projection, residual from the o-side stream,
    then post-norm."""
    if (i_feat.height, i_feat.width, i_feat.channels, i_feat.batch) != \
            (o_feat.height, o_feat.width, o_feat.channels, o_feat.batch):
        raise WiringError(
            f"cross_attend taps disagree: i={i_feat.data.shape} "
            f"o={o_feat.data.shape}")
    h_grid, w_grid = i_feat.height, i_feat.width
    b = i_feat.batch
    w = p.window_size
    if h_grid % w or w_grid % w:
        raise ConfigError(
            f"window {w} does not divide grid {h_grid}x{w_grid}")

    xi, xo = i_feat.data, o_feat.data
    s = w // 2 if p.cyclic_shift_enabled else 0
    mask = None
    if s > 0:
        xi = T.cyclic_shift(xi, -s, -s)
        xo = T.cyclic_shift(xo, -s, -s)
        mask = shift_attention_mask(h_grid, w_grid, w, s, xi.data.dtype)

    wins_i = T.window_partition(xi, w)
    wins_o = T.window_partition(xo, w)
    nw, n, c = wins_i.shape
    heads = p.heads
    dh = c // heads

    def split_heads(t):
        return T.transpose(T.reshape(t, (nw, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(p.q(wins_o))
    k = split_heads(p.k(wins_i))
    v = split_heads(p.v(wins_i))
    attn = T.cosine_similarity_matrix(q, k)
    attn = T.div(attn, T.reshape(p.tau, (heads, 1, 1)))
    bias = T.transpose(T.take_rows(p.bias_table, p.rel_index), (2, 0, 1))
    attn = T.add(attn, bias)
    if mask is not None:
        nwin = (h_grid // w) * (w_grid // w)
        attn = T.reshape(attn, (b, nwin, heads, n, n))
        attn = T.add(attn, Tensor(
            mask[None, :, None, :, :].astype(wins_i.data.dtype)))
        attn = T.reshape(attn, (nw, heads, n, n))
    attn = T.softmax_rows(attn)
    if stats is not None:
        stats["attn_weights"] = attn.data.copy()
        stats["q"], stats["k"], stats["v"] = q, k, v
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (nw, n, c))
    if stats is not None:
        stats["pre_projection"] = out.data.copy()
    out = p.proj(out)
    out = T.window_reverse(out, w, h_grid, w_grid, batch=b)
    if s > 0:
        out = T.cyclic_shift(out, s, s)
    out.label = "cross_attn_out"
    r = T.add(o_feat.data, out)
    r.label = "cross_residual_add"
    y = p.norm(r)
    y.label = "cross_post_norm"
    return FeatureMap(y, stage_tag=o_feat.stage_tag)


class CrossBlockStack(Module):
    """Sequential cross blocks: block k's query stream is block k-1's
    output while K/V re-use the same input tap for every block."""

    def __init__(self, dim: int, heads: int, window_size: int, count: int,
                 rng: np.random.Generator, cyclic_shift_enabled: bool = False,
                 dtype=np.float32):
        if count < 1:
            raise ContractError(f"stack needs count >= 1, got {count}")
        self.blocks = [CrossAttentionParams(
            dim, heads, window_size, rng,
            cyclic_shift_enabled=cyclic_shift_enabled, dtype=dtype)
            for _ in range(count)]

    def __call__(self, i_feat: FeatureMap, o_feat: FeatureMap) -> FeatureMap:
        return cross_block_stack(i_feat, o_feat, self.blocks,
                                 len(self.blocks))


def cross_block_stack(i_feat: FeatureMap, o_feat: FeatureMap,
                      params: List[CrossAttentionParams],
                      count: int) -> FeatureMap:
    if count < 1:
        raise ContractError(f"cross_block_stack needs count >= 1, got {count}")
    if len(params) != count:
        raise ContractError(
            f"params length {len(params)} != count {count}")
    out = o_feat
    for blk in params:
        out = cross_attend(i_feat, out, blk)
    return out
