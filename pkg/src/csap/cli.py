"""Command-line entry point: ``csap <command> [flags]``.

Exit status is 0 on success, 1 when a check fails and 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import cstf
from . import tensor as T
from .config import RunConfig, parse_config
from .cost_model import compare_variants, count_attention_matmul_flops, count_params, format_report
from .decoder import DecoderConfig, SegmentationModel, build_decoder, decoder_parameter_groups, predict
from .errors import ConfigError, CSAPError, FormatError, TrainingError
from .harness import (
    attention_similarity,
    decoder_grad_check,
    make_synthetic_dataset,
    miou,
    stack,
    train_toy,
)

COMMANDS = ("flops", "params", "gradcheck", "train-toy", "attn-sim", "predict")
GRADCHECK_TOL = 1e-4
HELD_OUT_OFFSET = 1000  # held-out data uses seed + offset
CONFIG_FILE = "config.txt"


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csap", description="Cross-scale attention propagation decoder tools.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="key = value run configuration file")
    parser.add_argument("--preset", choices=("paper", "toy", "tiny"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--variant", choices=("csap", "standard"))
    parser.add_argument("--source-stage", type=int, choices=(2, 3, 4), dest="source_stage")
    parser.add_argument("--input-size", type=int, dest="input_size")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--eps", type=float)
    parser.add_argument("--format", choices=("text", "kv"))
    parser.add_argument("--checkpoint", metavar="DIR")
    parser.add_argument("--out", metavar="PATH")
    return parser


# -- output helpers -----------------------------------------------------------
def _emit(lines: list[str] | str) -> None:
    text = lines if isinstance(lines, str) else "\n".join(lines) + "\n"
    sys.stdout.write(text)


def _kv_or_text(pairs: list[tuple[str, object]], fmt: str, title: str) -> str:
    if fmt == "kv":
        return "".join(f"{k}={v}\n" for k, v in pairs)
    width = max(len(k) for k, _ in pairs)
    return f"# {title}\n" + "".join(f"{k:<{width}}  {v}\n" for k, v in pairs)


def _check_out_path(path: str | None) -> None:
    if path is None:
        return
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")
    if Path(path).is_dir():
        raise UsageError(f"--out {path} is a directory")


def _check_checkpoint_target(path: str | None) -> None:
    if path is None:
        return
    target = Path(path)
    if not target.resolve().parent.is_dir():
        raise UsageError(f"checkpoint parent directory {target.resolve().parent} does not exist")
    if target.exists() and (not target.is_dir() or (any(target.iterdir()) and not (target / cstf.MANIFEST).exists())):
        raise UsageError(f"refusing to overwrite {path}: not a checkpoint directory")


def _write_checkpoint(path: str, model: SegmentationModel, run: RunConfig) -> None:
    """Write into a sibling temp directory, then swap it into place."""
    target = Path(path).resolve()
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}."))
    try:
        cstf.save_checkpoint(tmp, model.state_dict())
        cstf.atomic_write(tmp / CONFIG_FILE, run.serialize().encode())
        if target.exists():
            shutil.rmtree(target)
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _resolved_run(run: RunConfig, cfg: DecoderConfig) -> RunConfig:
    """Pin every decoder field so a saved config does not depend on command presets."""
    return RunConfig(**{**run.__dict__, **{k: getattr(cfg, k) for k in (
        "stage_channels", "d", "n_heads", "r", "ffn_expansion", "s",
        "num_classes", "source_stage", "variant", "input_size")}})


# -- commands -------------------------------------------------------------------
def cmd_flops(run: RunConfig, cfg: DecoderConfig, args) -> int:
    report = count_attention_matmul_flops(cfg, cfg.variant, cfg.input_size, cfg.input_size)
    table = compare_variants(cfg, cfg.input_size, cfg.input_size)
    text = format_report(report, run.format)
    ratio = table[cfg.variant]["ratio"]
    text += f"ratio_vs_standard={ratio!r}\n" if run.format == "kv" else f"reduction vs standard: {ratio:.2f}x\n"
    _emit(text)
    return 0


def cmd_params(run: RunConfig, cfg: DecoderConfig, args) -> int:
    analytic = count_params(cfg)
    enumerated = decoder_parameter_groups(build_decoder(cfg, run.seed))
    ok = analytic == enumerated
    pairs: list[tuple[str, object]] = [("variant", cfg.variant)]
    for name in analytic:
        pairs.append((name, analytic[name]))
    pairs.append(("total", sum(analytic.values())))
    pairs.append(("enumerated_total", sum(enumerated.values())))
    pairs.append(("match", "yes" if ok else "no"))
    _emit(_kv_or_text(pairs, run.format, "decoder parameters (analytic vs constructed model)"))
    return 0 if ok else 1


def cmd_gradcheck(run: RunConfig, cfg: DecoderConfig, args) -> int:
    report = decoder_grad_check(cfg, seed=run.seed, eps=run.eps, probes=run.probes)
    pairs: list[tuple[str, object]] = [(name, f"{err:.3e}") for name, err in sorted(report.errors.items())]
    pairs.append(("max_relative_error", f"{report.max_error:.3e}"))
    pairs.append(("tolerance", f"{GRADCHECK_TOL:.0e}"))
    passed = report.passed(GRADCHECK_TOL)
    pairs.append(("status", "pass" if passed else "fail"))
    _emit(_kv_or_text(pairs, run.format, f"finite-difference check, {cfg.variant}, float64, eps={run.eps:g}"))
    return 0 if passed else 1


def _datasets(run: RunConfig, cfg: DecoderConfig):
    size, k = cfg.input_size, cfg.num_classes
    train = make_synthetic_dataset(run.seed, run.n_train, size, size, k, run.noise)
    held = make_synthetic_dataset(run.seed + HELD_OUT_OFFSET, run.n_eval, size, size, k, run.noise)
    return train, held


def cmd_train_toy(run: RunConfig, cfg: DecoderConfig, args) -> int:
    train, held = _datasets(run, cfg)
    result = train_toy(cfg, train, run.steps, run.lr, run.seed, eval_set=held, eval_every=run.eval_every)
    csv_text = result.log.to_csv()
    if args.checkpoint:
        _write_checkpoint(args.checkpoint, result.model, _resolved_run(run, cfg))
    final = result.log.evals[run.steps]
    if args.out:
        cstf.atomic_write(args.out, csv_text.encode())
        _emit(_kv_or_text(
            [("variant", cfg.variant), ("steps", run.steps), ("final_loss", repr(result.log.losses[-1])),
             ("final_miou", repr(final))],
            run.format, "toy training"))
    else:
        _emit(csv_text)
    return 0


def cmd_attn_sim(run: RunConfig, cfg: DecoderConfig, args) -> int:
    train, held = _datasets(run, cfg)
    models, pairs = {}, []
    for variant in ("csap", "standard"):
        res = train_toy(cfg.with_(variant=variant), train, run.steps, run.lr, run.seed,
                        eval_set=held, eval_every=run.eval_every)
        models[variant] = res.model
        pairs.append((f"{variant}_miou", repr(res.log.evals[run.steps])))
    images, _ = stack(held)
    stats = attention_similarity(models["csap"], models["standard"], images, seed=run.seed)
    for k, value in sorted(stats.per_stage.items()):
        pairs.append((f"stage{k}_cosine", repr(value)))
    pairs.append(("mean_cosine", repr(stats.mean_cosine)))
    pairs.append(("shuffled_baseline", repr(stats.shuffled_baseline)))
    passed = stats.mean_cosine > stats.shuffled_baseline
    pairs.append(("status", "pass" if passed else "fail"))
    _emit(_kv_or_text(pairs, run.format, "propagated vs standard attention maps"))
    return 0 if passed else 1


def cmd_predict(run: RunConfig, cfg: DecoderConfig, args) -> int:
    model = SegmentationModel(cfg, run.seed)
    if args.checkpoint:
        model.load_state_dict(cstf.load_checkpoint(args.checkpoint))
    size = cfg.input_size
    sample = make_synthetic_dataset(run.seed + HELD_OUT_OFFSET, 1, size, size, cfg.num_classes, run.noise)[0]
    with T.no_grad():
        logits, _ = model(sample.image)
    labels = predict(logits, size, size)
    counts = np.bincount(labels.ravel(), minlength=cfg.num_classes)
    pairs: list[tuple[str, object]] = [("variant", cfg.variant), ("input", f"{size}x{size}")]
    pairs += [(f"class{c}_pixels", int(n)) for c, n in enumerate(counts)]
    pairs.append(("miou", repr(miou(labels, sample.labels, cfg.num_classes))))
    if args.out:
        cstf.save(args.out, labels.astype(np.float32))
    _emit(_kv_or_text(pairs, run.format, "prediction on a held-out synthetic sample"))
    return 0


HANDLERS = {
    "flops": cmd_flops,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "attn-sim": cmd_attn_sim,
    "predict": cmd_predict,
}


def _load_run(args) -> tuple[RunConfig, DecoderConfig]:
    overrides = {
        key: getattr(args, key)
        for key in ("preset", "seed", "variant", "source_stage", "input_size", "steps", "lr", "eps", "format")
    }
    config_path = args.config
    if args.command == "predict" and args.checkpoint and config_path is None:
        saved = Path(args.checkpoint) / CONFIG_FILE
        if saved.exists():
            config_path = saved
    run = parse_config(config_path, overrides)
    return run, run.decoder_config(args.command)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        run, cfg = _load_run(args)
        _check_out_path(args.out)
        if args.command == "train-toy":
            _check_checkpoint_target(args.checkpoint)
        elif args.checkpoint and args.command == "predict" and not Path(args.checkpoint).is_dir():
            raise UsageError(f"checkpoint {args.checkpoint} does not exist")
        elif args.checkpoint and args.command != "predict":
            raise UsageError(f"--checkpoint is not used by {args.command}")
    except (ConfigError, UsageError) as exc:
        print(f"csap: error: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](run, cfg, args)
    except TrainingError as exc:
        print(f"csap: training failed: {exc}", file=sys.stderr)
        return 1
    except (FormatError, KeyError) as exc:
        print(f"csap: error: {exc}", file=sys.stderr)
        return 2
    except CSAPError as exc:
        print(f"csap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
