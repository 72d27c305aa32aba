"""Closed-form parameter and FLOP accounting for both decoder variants.

FLOPs count one multiply-accumulate as 2 operations and cover matrix-type
work only (matmuls, convolutions); elementwise ops, norms and softmax are
left out. The standard baseline pools every stage to the stage-4 context
grid (ratios 8r/4r/2r) so all stages share M keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .decoder import DecoderConfig
from .propagation import STAGES

CATEGORIES = (
    "qk_matmul",
    "av_matmul",
    "attn_projection_matmul",
    "value_projection",
    "conv",
    "ffn",
    "other",
)
ATTENTION_CATEGORIES = ("qk_matmul", "av_matmul", "attn_projection_matmul")
CONVENTION = "1 multiply-accumulate = 2 FLOPs; matrix/conv work only"


@dataclass
class FlopReport:
    variant: str
    height: int
    width: int
    batch: int = 1
    by_part: dict[str, dict[str, int]] = field(default_factory=dict)
    convention: str = CONVENTION

    def add(self, part: str, category: str, count: int) -> None:
        if category not in CATEGORIES:
            raise KeyError(category)
        bucket = self.by_part.setdefault(part, dict.fromkeys(CATEGORIES, 0))
        bucket[category] += int(count) * self.batch

    @property
    def categories(self) -> dict[str, int]:
        out = dict.fromkeys(CATEGORIES, 0)
        for bucket in self.by_part.values():
            for k, v in bucket.items():
                out[k] += v
        return out

    @property
    def total(self) -> int:
        return sum(self.categories.values())

    @property
    def attention_matmul(self) -> int:
        cats = self.categories
        return sum(cats[k] for k in ATTENTION_CATEGORIES)

    def stage(self, k: int) -> dict[str, int]:
        return self.by_part.get(f"stage{k}", dict.fromkeys(CATEGORIES, 0))


# -- parameters -----------------------------------------------------------
def _ffn_params(dim: int, expansion: int) -> int:
    hidden = dim * expansion
    return (dim * hidden + hidden) + (9 * hidden + hidden) + (hidden * dim + dim)


def attention_block_params(dim: int, d: int, expansion: int) -> int:
    norms = 3 * 2 * dim
    context_conv = dim * dim + dim
    qkv = 3 * dim * d
    out_proj = d * dim + dim
    return norms + context_conv + qkv + out_proj + _ffn_params(dim, expansion)


def refinement_block_params(dim: int, d: int, expansion: int) -> int:
    return 2 * 2 * dim + dim * d + (d * dim + dim) + _ffn_params(dim, expansion)


def head_params(cfg: DecoderConfig) -> int:
    total = sum(cfg.channels(k) for k in STAGES)
    return (total * cfg.d + cfg.d) + (cfg.d * cfg.num_classes + cfg.num_classes)


def count_params(cfg: DecoderConfig, variant: str | None = None) -> dict[str, int]:
    """Analytic parameter count per decoder submodule, keyed like the built model."""
    cfg = cfg.with_(variant=variant or cfg.variant)
    d, e = cfg.d, cfg.ffn_expansion
    out: dict[str, int] = {}
    if cfg.variant == "csap":
        out["source_block"] = attention_block_params(cfg.channels(cfg.source_stage), d, e)
        targets = cfg.propagation.target_stages
        out["propagation"] = len(targets) * cfg.n_keys**2
        for k in targets:
            out[f"refine.{k}"] = refinement_block_params(cfg.channels(k), d, e)
    else:
        for k in STAGES:
            out[f"blocks.{k}"] = attention_block_params(cfg.channels(k), d, e)
    out["head"] = head_params(cfg)
    return out


# -- FLOPs ----------------------------------------------------------------
def _ffn_flops(n: int, dim: int, expansion: int) -> int:
    hidden = dim * expansion
    return 2 * n * dim * hidden + 2 * 9 * n * hidden + 2 * n * hidden * dim


def count_attention_matmul_flops(
    cfg: DecoderConfig, variant: str | None = None, height: int | None = None,
    width: int | None = None, batch: int = 1,
) -> FlopReport:
    """FLOP report for one decoder forward at the given input size."""
    height = height or cfg.input_size
    width = width or height
    cfg = cfg.with_(variant=variant or cfg.variant)
    d, e, heads = cfg.d, cfg.ffn_expansion, cfg.n_heads
    if height % 32 or width % 32:
        raise ValueError(f"input {height}x{width} must be divisible by 32")
    size = {k: (height // 2 ** (k + 1), width // 2 ** (k + 1)) for k in STAGES}
    tokens = {k: size[k][0] * size[k][1] for k in STAGES}
    report = FlopReport(cfg.variant, height, width, batch)
    ratios = cfg.pool_ratios()

    def attention_stage(k: int) -> int:
        n, dim = tokens[k], cfg.channels(k)
        r = ratios[k]
        m = (size[k][0] // r) * (size[k][1] // r)
        part = f"stage{k}"
        report.add(part, "qk_matmul", 2 * n * m * d)
        report.add(part, "av_matmul", 2 * n * m * d)
        report.add(part, "conv", 2 * m * dim * dim)
        report.add(part, "value_projection", 2 * m * dim * d)
        report.add(part, "other", 2 * n * dim * d + 2 * m * dim * d + 2 * n * d * dim)
        report.add(part, "ffn", _ffn_flops(n, dim, e))
        return m

    if cfg.variant == "csap":
        m = attention_stage(cfg.source_stage)
        q = cfg.s * cfg.s
        for k in cfg.propagation.target_stages:
            dim, part = cfg.channels(k), f"stage{k}"
            report.add(part, "qk_matmul", 0)
            report.add(part, "attn_projection_matmul", 2 * heads * q * m * m)
            report.add(part, "value_projection", 2 * m * dim * d)
            report.add(part, "av_matmul", 2 * q * m * d)
            report.add(part, "other", 2 * q * d * dim)
            report.add(part, "ffn", _ffn_flops(tokens[k], dim, e))
    else:
        for k in STAGES:
            attention_stage(k)

    total_c = sum(cfg.channels(k) for k in STAGES)
    report.add("head", "conv", 2 * tokens[2] * total_c * d + 2 * tokens[2] * d * cfg.num_classes)
    return report


def compare_variants(cfg: DecoderConfig, height: int | None = None, width: int | None = None) -> dict[str, dict]:
    """Side-by-side params and FLOPs; ratio = standard attention matmul / variant's."""
    reports = {v: count_attention_matmul_flops(cfg, v, height, width) for v in ("standard", "csap")}
    base = reports["standard"].attention_matmul
    return {
        v: {
            "params": sum(count_params(cfg, v).values()),
            "report": rep,
            "ratio": base / rep.attention_matmul,
        }
        for v, rep in reports.items()
    }


def flop_ratio(a: FlopReport, b: FlopReport) -> float:
    return a.attention_matmul / b.attention_matmul


# -- formatting -----------------------------------------------------------
def format_report(report: FlopReport, fmt: str = "text") -> str:
    cats = report.categories
    if fmt == "kv":
        lines = [
            f"convention={report.convention}",
            f"variant={report.variant}",
            f"input={report.height}x{report.width}",
            f"batch={report.batch}",
        ]
        for part in sorted(report.by_part):
            for c in CATEGORIES:
                lines.append(f"{part}.{c}={report.by_part[part][c]}")
        for c in CATEGORIES:
            lines.append(f"total.{c}={cats[c]}")
        lines.append(f"attention_matmul={report.attention_matmul}")
        lines.append(f"total={report.total}")
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    parts = sorted(report.by_part)
    width = max(len(c) for c in CATEGORIES)
    lines = [
        f"# FLOPs ({report.convention})",
        f"# variant={report.variant} input={report.height}x{report.width} batch={report.batch}",
        f"{'category':<{width}}" + "".join(f"{p:>16}" for p in parts) + f"{'total':>16}",
    ]
    for c in CATEGORIES:
        row = "".join(f"{report.by_part[p][c]:>16,}" for p in parts)
        lines.append(f"{c:<{width}}{row}{cats[c]:>16,}")
    lines.append(f"attention matmul total: {report.attention_matmul:,} ({report.attention_matmul / 1e9:.2f}G)")
    lines.append(f"all categories total:   {report.total:,}")
    return "\n".join(lines) + "\n"
