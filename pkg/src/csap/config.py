"""Run configuration: ``key = value`` files merged with defaults and flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .decoder import PRESETS, VARIANTS, DecoderConfig
from .errors import ConfigError

FORMATS = ("text", "kv")
# decoder fields that a run config may override on top of a preset
DECODER_KEYS = (
    "stage_channels", "d", "n_heads", "r", "ffn_expansion", "s",
    "num_classes", "source_stage", "variant", "input_size",
)
COMMAND_PRESETS = {"gradcheck": "tiny", "train-toy": "toy", "attn-sim": "toy"}


def _parse_channels(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


_PARSERS = {
    "preset": _choice(tuple(PRESETS)),
    "stage_channels": _parse_channels,
    "d": int,
    "n_heads": int,
    "r": int,
    "ffn_expansion": int,
    "s": int,
    "num_classes": int,
    "source_stage": int,
    "variant": _choice(VARIANTS),
    "input_size": int,
    "seed": int,
    "steps": int,
    "lr": float,
    "eps": float,
    "probes": int,
    "n_train": int,
    "n_eval": int,
    "noise": float,
    "eval_every": int,
    "format": _choice(FORMATS),
}


@dataclass(frozen=True)
class RunConfig:
    """Decoder keys left as ``None`` fall back to the preset in effect."""

    preset: str | None = None
    stage_channels: tuple[int, ...] | None = None
    d: int | None = None
    n_heads: int | None = None
    r: int | None = None
    ffn_expansion: int | None = None
    s: int | None = None
    num_classes: int | None = None
    source_stage: int | None = None
    variant: str | None = None
    input_size: int | None = None
    seed: int = 0
    steps: int = 2000
    lr: float = 0.1
    eps: float = 1e-3
    probes: int = 2
    n_train: int = 16
    n_eval: int = 32
    noise: float = 0.08
    eval_every: int = 100
    format: str = "text"

    def decoder_config(self, command: str | None = None) -> DecoderConfig:
        preset = self.preset or COMMAND_PRESETS.get(command, "paper")
        overrides = {k: getattr(self, k) for k in DECODER_KEYS if getattr(self, k) is not None}
        return PRESETS[preset].with_(**overrides)

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, value, line: int | None):
    if key not in _PARSERS:
        raise ConfigError(f"unknown key {key!r}", key=key, line=line)
    if value is None:
        return None
    if not isinstance(value, str):
        value = ",".join(str(v) for v in value) if isinstance(value, (tuple, list)) else str(value)
    try:
        return _PARSERS[key](value.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r}: {exc}", key=key, line=line) from None


def parse_lines(text: str) -> dict[str, tuple[object, int]]:
    """``key -> (typed value, line number)`` for every assignment in ``text``."""
    out: dict[str, tuple[object, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError("duplicate key", key=key, line=lineno)
        out[key] = (_coerce(key, value, lineno), lineno)
    return out


def parse_config(path=None, overrides: dict | None = None, text: str | None = None) -> RunConfig:
    """Merge defaults < file (``path`` or ``text``) < ``overrides`` and validate.

    ``overrides`` entries whose value is ``None`` are ignored, which lets
    unset command-line flags pass straight through.
    """
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc.strerror}", key="config") from None
    entries = parse_lines(text or "")
    values = {k: v for k, (v, _) in entries.items()}
    lines = {k: n for k, (_, n) in entries.items()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = _coerce(key, value, None)
        lines.pop(key, None)
    cfg = RunConfig(**values)
    _validate(cfg, lines)
    return cfg


def _validate(cfg: RunConfig, lines: dict[str, int]) -> None:
    def fail(message: str, key: str):
        raise ConfigError(message, key=key, line=lines.get(key))

    for key in ("steps", "probes", "n_train", "n_eval", "eval_every"):
        if getattr(cfg, key) < 1:
            fail(f"{key} must be >= 1", key)
    if cfg.lr < 0:
        fail("lr must be >= 0", "lr")
    if cfg.eps <= 0:
        fail("eps must be > 0", "eps")
    if cfg.noise < 0:
        fail("noise must be >= 0", "noise")
    try:
        cfg.decoder_config()
    except ConfigError as exc:
        # re-raise with the line of the offending key when it came from the file
        message = str(exc).split(" (key", 1)[0]
        raise ConfigError(message, key=exc.key, line=lines.get(exc.key)) from None
