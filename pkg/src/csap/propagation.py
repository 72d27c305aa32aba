"""Cross-stage attention propagation and value-only refinement.

The source stage's maps (B, h, N', M) are spatialized along the query axis,
pooled to a fixed s x s grid and re-weighted per target stage by a learned
M x M matrix acting on the key axis. Target stages then only project values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionMaps, merge_heads, split_heads
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, MixFFN, Module, trunc_normal
from .tensor import Parameter, Tensor

STAGES = (2, 3, 4)


@dataclass(frozen=True)
class PropagationConfig:
    s: int = 8
    source_stage: int = 4

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError(f"propagation size must be >= 1, got {self.s}", key="s")
        if self.source_stage not in STAGES:
            raise ConfigError(f"source stage must be one of {STAGES}", key="source_stage")

    @property
    def target_stages(self) -> tuple[int, ...]:
        return tuple(k for k in STAGES if k != self.source_stage)


@dataclass
class PropagatedAttention:
    """Stage-specific weights, shape (B, n_heads, s*s, M)."""

    weights: Tensor
    stage: int

    def is_row_stochastic(self, tol: float = 1e-6) -> bool:
        return AttentionMaps(self.weights).is_row_stochastic(tol)


def pool_attention(maps: AttentionMaps | Tensor, h_src: int, w_src: int, s: int) -> Tensor:
    """Adaptive-pool the query axis of (B, h, N', M) maps to an s x s grid."""
    a = maps.weights if isinstance(maps, AttentionMaps) else maps
    b, h, n, m = a.shape
    if n != h_src * w_src:
        raise ShapeError(f"query count {n} != {h_src}x{w_src}")
    grid = a.transpose(0, 1, 3, 2).reshape(b, h, m, h_src, w_src)
    pooled = T.adaptive_avg_pool2d(grid, s)
    return pooled.reshape(b, h, m, s * s).transpose(0, 1, 3, 2)


def project_attention(pooled: Tensor, weight: Tensor, stage: int) -> PropagatedAttention:
    """Row-softmax of ``pooled @ weight.T``; ``weight`` is the stage's M x M matrix."""
    m = pooled.shape[-1]
    if weight.shape != (m, m):
        raise ConfigError(f"projection for stage {stage} is {weight.shape}, maps have M={m}")
    logits = pooled @ weight.transpose(1, 0)
    return PropagatedAttention(T.softmax(logits, axis=-1), stage)


class AttentionPropagation(Module):
    """One bias-free M x M projection per target stage."""

    def __init__(self, n_keys: int, target_stages, rng: np.random.Generator):
        self.n_keys = n_keys
        self.proj = {}
        for k in target_stages:
            w = np.eye(n_keys, dtype=np.float32) + trunc_normal(rng, (n_keys, n_keys), std=0.01)
            p = Parameter(w, name=f"proj_{k}")
            setattr(self, f"proj_{k}", p)
            self.proj[k] = p

    def named_parameters(self, prefix: str = ""):
        for k, p in self.proj.items():
            yield f"{prefix}proj_{k}", p

    def __call__(self, pooled: Tensor) -> dict[int, PropagatedAttention]:
        return {k: project_attention(pooled, w, k) for k, w in self.proj.items()}


def propagated_values(
    c: Tensor,
    height: int,
    width: int,
    attn: PropagatedAttention | Tensor,
    value_grid: tuple[int, int],
    v_proj: Linear,
) -> Tensor:
    """Pool stage tokens to the source key grid, project values, apply the maps.

    Returns (B, s*s, d): one refined token per propagated query cell.
    """
    w = attn.weights if isinstance(attn, PropagatedAttention) else attn
    b, n_heads, _, m = w.shape
    if c.shape[1] != height * width:
        raise ShapeError(f"token count {c.shape[1]} != {height}x{width}")
    if value_grid[0] * value_grid[1] != m:
        raise ShapeError(f"value grid {value_grid} gives {value_grid[0] * value_grid[1]} tokens, maps expect {m}")
    pooled = T.adaptive_avg_pool2d(T.tokens_to_spatial(c, height, width), value_grid)
    values = v_proj(T.spatial_to_tokens(pooled))
    return merge_heads(w @ split_heads(values, n_heads))


class ValueRefinementBlock(Module):
    """Target-stage block: value projection only, no query or key parameters."""

    def __init__(self, dim: int, d: int, ffn_expansion: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.v_proj = Linear(dim, d, rng, bias=False)
        self.out_proj = Linear(d, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MixFFN(dim, ffn_expansion, rng)

    def refinement(self, c, height, width, attn, value_grid) -> Tensor:
        """Pre-residual refinement resized to the stage grid, (B, N', D)."""
        w = attn.weights if isinstance(attn, PropagatedAttention) else attn
        s = int(round(np.sqrt(w.shape[2])))
        tokens = propagated_values(self.norm1(c), height, width, w, value_grid, self.v_proj)
        out = T.tokens_to_spatial(self.out_proj(tokens), s, s)
        return T.spatial_to_tokens(T.bilinear_resize(out, height, width))

    def __call__(self, c, height, width, attn, value_grid) -> Tensor:
        x = c + self.refinement(c, height, width, attn, value_grid)
        return x + self.ffn(self.norm2(x), height, width)


def value_refine(
    c: Tensor,
    height: int,
    width: int,
    attn: PropagatedAttention,
    value_grid: tuple[int, int],
    block: ValueRefinementBlock,
) -> Tensor:
    return block(c, height, width, attn, value_grid)
