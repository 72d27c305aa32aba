"""Decoder assembly: CSAP and per-stage standard attention, stub encoder, fusion head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import AttentionMaps, PooledAttentionConfig, PooledCrossAttentionBlock
from .errors import ConfigError, ShapeError
from .nn import Conv1x1, Module
from .propagation import (
    STAGES,
    AttentionPropagation,
    PropagatedAttention,
    PropagationConfig,
    ValueRefinementBlock,
    pool_attention,
)
from .tensor import Parameter, Tensor

VARIANTS = ("csap", "standard")


@dataclass(frozen=True)
class DecoderConfig:
    stage_channels: tuple[int, int, int, int] = (32, 64, 160, 256)
    d: int = 128
    n_heads: int = 4
    r: int = 2
    ffn_expansion: int = 4
    s: int = 8
    num_classes: int = 150
    source_stage: int = 4
    variant: str = "csap"
    input_size: int = 512

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ConfigError("stage_channels needs four positive entries", key="stage_channels")
        if self.d < 1:
            raise ConfigError("d must be >= 1", key="d")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d={self.d}", key="n_heads")
        if self.r < 1:
            raise ConfigError("pool ratio r must be >= 1", key="r")
        if self.ffn_expansion < 1:
            raise ConfigError("ffn_expansion must be >= 1", key="ffn_expansion")
        if self.s < 1:
            raise ConfigError("s must be >= 1", key="s")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1", key="num_classes")
        if self.source_stage not in STAGES:
            raise ConfigError(f"source_stage must be one of {STAGES}", key="source_stage")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}", key="variant")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input size {self.input_size} is not a positive multiple of 32", key="input_size")
        for k, ratio in self.pool_ratios().items():
            side = self.stage_size(k)
            if side % ratio:
                raise ConfigError(
                    f"pool ratio {ratio} does not divide stage-{k} extent {side} at input {self.input_size}",
                    key="r",
                )

    def stage_size(self, stage: int, input_size: int | None = None) -> int:
        return (input_size or self.input_size) // 2 ** (stage + 1)

    def channels(self, stage: int) -> int:
        return self.stage_channels[stage - 1]

    def pool_ratios(self) -> dict[int, int]:
        """Per-stage K/V pool ratio for the stages that compute Q-K attention.

        The standard variant pools every stage to the same grid as stage 4,
        so each stage sees the same number of context tokens.
        """
        if self.variant == "csap":
            return {self.source_stage: self.r}
        return {k: self.r * 2 ** (4 - k) for k in STAGES}

    def key_grid(self, input_size: int | None = None) -> tuple[int, int]:
        """Pooled context grid of the Q-K stage(s)."""
        k = self.source_stage if self.variant == "csap" else 4
        side = self.stage_size(k, input_size) // self.pool_ratios()[k]
        return side, side

    @property
    def n_keys(self) -> int:
        gh, gw = self.key_grid()
        return gh * gw

    def attention_config(self, stage: int) -> PooledAttentionConfig:
        return PooledAttentionConfig(
            d_model=self.channels(stage),
            d=self.d,
            n_heads=self.n_heads,
            r=self.pool_ratios()[stage],
            ffn_expansion=self.ffn_expansion,
        )

    @property
    def propagation(self) -> PropagationConfig:
        return PropagationConfig(s=self.s, source_stage=self.source_stage)

    def with_(self, **changes) -> "DecoderConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper": DecoderConfig(),
    # 64x64 synthetic blobs: r=1 keeps four context tokens at the 2x2 deepest stage
    "toy": DecoderConfig(
        stage_channels=(16, 32, 64, 128), d=64, n_heads=4, r=1, s=4, num_classes=4, input_size=64
    ),
    "tiny": DecoderConfig(
        stage_channels=(8, 16, 24, 32), d=32, n_heads=2, r=1, s=4, ffn_expansion=2,
        num_classes=3, input_size=64,
    ),
}


@dataclass
class StageFeatures:
    """Encoder outputs for stages 2-4 as (B, H_k * W_k, C_k) tokens."""

    tokens: dict[int, Tensor]
    sizes: dict[int, tuple[int, int]]

    def __post_init__(self):
        for k in STAGES:
            h, w = self.sizes[k]
            if self.tokens[k].shape[1] != h * w:
                raise ShapeError(f"stage {k}: {self.tokens[k].shape[1]} tokens for a {h}x{w} grid")
        for k in (3, 4):
            ph, pw = self.sizes[k - 1]
            if self.sizes[k] != (ph // 2, pw // 2):
                raise ShapeError(f"stage {k} extents {self.sizes[k]} are not half of stage {k - 1}")

    @property
    def batch(self) -> int:
        return self.tokens[2].shape[0]

    def astype(self, dtype) -> "StageFeatures":
        return StageFeatures({k: Tensor(t.data.astype(dtype)) for k, t in self.tokens.items()}, dict(self.sizes))


class StubEncoder(Module):
    """Four strided 3x3 conv + GELU blocks standing in for the hierarchical backbone."""

    STRIDES = (4, 2, 2, 2)

    def __init__(self, stage_channels, rng: np.random.Generator):
        self.weights = []
        self.biases = []
        c_in = 3
        for c_out in stage_channels:
            std = np.sqrt(2.0 / (9 * c_in))
            self.weights.append(Parameter(rng.normal(0.0, std, (c_out, c_in, 3, 3)).astype(np.float32)))
            self.biases.append(Parameter(np.zeros(c_out, dtype=np.float32)))
            c_in = c_out

    def __call__(self, image: Tensor) -> StageFeatures:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) image, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input extents {h}x{w} must be divisible by 32")
        x = image
        tokens, sizes = {}, {}
        for k, (wt, b, stride) in enumerate(zip(self.weights, self.biases, self.STRIDES), start=1):
            x = T.gelu(T.conv3x3(x, wt, b, stride=stride))
            if k in STAGES:
                tokens[k] = T.spatial_to_tokens(x)
                sizes[k] = x.shape[2:]
        return StageFeatures(tokens, sizes)


def stub_encoder(image: Tensor, cfg: DecoderConfig, seed: int) -> StageFeatures:
    return StubEncoder(cfg.stage_channels, np.random.default_rng(seed))(image)


class FusionHead(Module):
    """Resize to stage-2 grid, concatenate channels, 1x1 fuse + GELU, 1x1 classify."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        total = sum(cfg.channels(k) for k in STAGES)
        self.fuse = Conv1x1(total, cfg.d, rng)
        self.classifier = Conv1x1(cfg.d, cfg.num_classes, rng)

    def __call__(self, refined: dict[int, Tensor], sizes: dict[int, tuple[int, int]]) -> Tensor:
        h2, w2 = sizes[2]
        maps = []
        for k in STAGES:
            x = T.tokens_to_spatial(refined[k], *sizes[k])
            if sizes[k] != (h2, w2):
                x = T.bilinear_resize(x, h2, w2)
            maps.append(x)
        fused = T.gelu(self.fuse(T.concat(maps, axis=1)))
        return self.classifier(fused)


@dataclass
class Diagnostics:
    source_maps: AttentionMaps | None = None
    pooled: Tensor | None = None
    propagated: dict[int, PropagatedAttention] = field(default_factory=dict)
    stage_maps: dict[int, AttentionMaps] = field(default_factory=dict)


def _check_features(features: StageFeatures, cfg: DecoderConfig) -> None:
    for k in STAGES:
        side = cfg.stage_size(k)
        if features.sizes[k] != (side, side):
            raise ShapeError(
                f"decoder built for input {cfg.input_size}: stage {k} expects {side}x{side}, got {features.sizes[k]}"
            )
        if features.tokens[k].shape[2] != cfg.channels(k):
            raise ShapeError(f"stage {k} expects {cfg.channels(k)} channels, got {features.tokens[k].shape[2]}")


class CSAPDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        if cfg.variant != "csap":
            raise ConfigError("CSAPDecoder needs variant='csap'", key="variant")
        self.cfg = cfg
        src = cfg.source_stage
        self.source_block = PooledCrossAttentionBlock(cfg.attention_config(src), rng)
        self.propagation = AttentionPropagation(cfg.n_keys, cfg.propagation.target_stages, rng)
        self.refine = {
            k: ValueRefinementBlock(cfg.channels(k), cfg.d, cfg.ffn_expansion, rng)
            for k in cfg.propagation.target_stages
        }
        self.head = FusionHead(cfg, rng)

    def __call__(self, features: StageFeatures) -> tuple[Tensor, Diagnostics]:
        cfg = self.cfg
        _check_features(features, cfg)
        src = cfg.source_stage
        h_src, w_src = features.sizes[src]
        refined = {}
        refined[src], maps = self.source_block(features.tokens[src], h_src, w_src)
        pooled = pool_attention(maps, h_src, w_src, cfg.s)
        propagated = self.propagation(pooled)
        grid = cfg.key_grid()
        for k, block in self.refine.items():
            refined[k] = block(features.tokens[k], *features.sizes[k], propagated[k], grid)
        logits = self.head(refined, features.sizes)
        return logits, Diagnostics(source_maps=maps, pooled=pooled, propagated=propagated)


class StandardDecoder(Module):
    """Independent pooled-attention block with its own Q, K, V at every stage."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        if cfg.variant != "standard":
            raise ConfigError("StandardDecoder needs variant='standard'", key="variant")
        self.cfg = cfg
        self.blocks = {k: PooledCrossAttentionBlock(cfg.attention_config(k), rng) for k in STAGES}
        self.head = FusionHead(cfg, rng)

    def __call__(self, features: StageFeatures) -> tuple[Tensor, Diagnostics]:
        _check_features(features, self.cfg)
        refined, stage_maps = {}, {}
        for k, block in self.blocks.items():
            refined[k], stage_maps[k] = block(features.tokens[k], *features.sizes[k])
        return self.head(refined, features.sizes), Diagnostics(stage_maps=stage_maps)


def build_decoder(cfg: DecoderConfig, seed: int = 0) -> CSAPDecoder | StandardDecoder:
    rng = np.random.default_rng(seed)
    return CSAPDecoder(cfg, rng) if cfg.variant == "csap" else StandardDecoder(cfg, rng)


def forward_csap(features: StageFeatures, decoder: CSAPDecoder) -> tuple[Tensor, Diagnostics]:
    if decoder.cfg.variant != "csap":
        raise ConfigError("forward_csap needs a csap decoder", key="variant")
    return decoder(features)


def forward_standard(features: StageFeatures, decoder: StandardDecoder) -> Tensor:
    if decoder.cfg.variant != "standard":
        raise ConfigError("forward_standard needs a standard decoder", key="variant")
    return decoder(features)[0]


class SegmentationModel(Module):
    """Stub encoder plus decoder; logits come out at stage-2 resolution."""

    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = StubEncoder(cfg.stage_channels, rng)
        self.decoder = CSAPDecoder(cfg, rng) if cfg.variant == "csap" else StandardDecoder(cfg, rng)

    def __call__(self, images) -> tuple[Tensor, Diagnostics]:
        images = images if isinstance(images, Tensor) else Tensor(images)
        return self.decoder(self.encoder(images))


def predict(logits: Tensor | np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsample to (height, width) and argmax; ties go to the lowest class."""
    x = logits if isinstance(logits, Tensor) else Tensor(logits)
    with T.no_grad():
        up = T.bilinear_resize(x, height, width) if x.shape[2:] != (height, width) else x
    return np.argmax(up.data, axis=1)


def decoder_parameter_groups(decoder: Module) -> dict[str, int]:
    """Parameter count per top-level decoder submodule (e.g. ``refine.2``)."""
    groups: dict[str, int] = {}
    for name, p in decoder.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("refine", "blocks") else parts[0]
        groups[key] = groups.get(key, 0) + p.size
    return groups
