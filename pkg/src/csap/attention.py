"""Pooled cross-attention: full-resolution queries against average-pooled context."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv1x1, LayerNorm, Linear, MixFFN, Module
from .tensor import Tensor


@dataclass(frozen=True)
class PooledAttentionConfig:
    d_model: int
    d: int = 128
    n_heads: int = 4
    r: int = 2
    ffn_expansion: int = 4

    def __post_init__(self):
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d={self.d}", key="n_heads")
        if self.r < 1:
            raise ConfigError(f"pool ratio must be >= 1, got {self.r}", key="r")
        if self.d_model < 1 or self.ffn_expansion < 1:
            raise ConfigError("d_model and ffn_expansion must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


@dataclass
class AttentionMaps:
    """Per-head query-over-key weights, shape (B, n_heads, N', M)."""

    weights: Tensor

    @property
    def n_queries(self) -> int:
        return self.weights.shape[2]

    @property
    def n_keys(self) -> int:
        return self.weights.shape[3]

    def row_sum_error(self) -> float:
        w = self.weights.data
        return float(np.abs(w.sum(axis=-1) - 1.0).max())

    def is_row_stochastic(self, tol: float = 1e-6) -> bool:
        return bool(self.weights.data.min() >= 0.0) and self.row_sum_error() <= tol


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, N, d) -> (B, n_heads, N, d / n_heads)."""
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    """(B, n_heads, N, d_h) -> (B, N, n_heads * d_h)."""
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def pool_context(
    c: Tensor,
    height: int,
    width: int,
    r: int,
    conv: Conv1x1,
    norm: LayerNorm,
) -> Tensor:
    """Average-pool tokens by ``r``, then 1x1 conv, layer norm and GELU.

    Returns ``(B, M, D)`` context tokens with ``M = (height/r) * (width/r)``.
    """
    if c.shape[1] != height * width:
        raise ShapeError(f"token count {c.shape[1]} != {height}x{width}")
    if height % r or width % r:
        raise ShapeError(f"pool ratio {r} does not divide {height}x{width}")
    pooled = T.avg_pool2d(T.tokens_to_spatial(c, height, width), r)
    tokens = T.spatial_to_tokens(conv(pooled))
    return T.gelu(norm(tokens))


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, n_heads: int
) -> tuple[Tensor, AttentionMaps]:
    """Scaled dot-product attention per head; the maps are returned, not dropped."""
    d = q.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"n_heads={n_heads} must divide d={d}", key="n_heads")
    if k.shape[-1] != d or v.shape != k.shape or q.shape[0] != k.shape[0]:
        raise ShapeError(f"inconsistent Q/K/V shapes {q.shape}, {k.shape}, {v.shape}")
    qh, kh, vh = (split_heads(t, n_heads) for t in (q, k, v))
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // n_heads))
    weights = T.softmax(scores, axis=-1)
    return merge_heads(weights @ vh), AttentionMaps(weights)


class PooledCrossAttentionBlock(Module):
    """Pre-norm residual pooled attention followed by a pre-norm residual Mix-FFN."""

    def __init__(self, cfg: PooledAttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        dm, d = cfg.d_model, cfg.d
        self.norm1 = LayerNorm(dm)
        self.context_conv = Conv1x1(dm, dm, rng)
        self.context_norm = LayerNorm(dm)
        self.q_proj = Linear(dm, d, rng, bias=False)
        self.k_proj = Linear(dm, d, rng, bias=False)
        self.v_proj = Linear(dm, d, rng, bias=False)
        self.out_proj = Linear(d, dm, rng)
        self.norm2 = LayerNorm(dm)
        self.ffn = MixFFN(dm, cfg.ffn_expansion, rng)

    def attend(self, x: Tensor, height: int, width: int) -> tuple[Tensor, AttentionMaps]:
        ctx = pool_context(x, height, width, self.cfg.r, self.context_conv, self.context_norm)
        out, maps = multi_head_attention(self.q_proj(x), self.k_proj(ctx), self.v_proj(ctx), self.cfg.n_heads)
        return self.out_proj(out), maps

    def __call__(self, x: Tensor, height: int, width: int) -> tuple[Tensor, AttentionMaps]:
        attn, maps = self.attend(self.norm1(x), height, width)
        x = x + attn
        x = x + self.ffn(self.norm2(x), height, width)
        return x, maps


def attention_block(
    x: Tensor, height: int, width: int, block: PooledCrossAttentionBlock
) -> tuple[Tensor, AttentionMaps]:
    if x.shape[1] != height * width:
        raise ShapeError(f"token count {x.shape[1]} != {height}x{width}")
    return block(x, height, width)
