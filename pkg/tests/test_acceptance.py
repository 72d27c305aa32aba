"""Acceptance criteria 1-10, one test each; every test prints a single PASS/FAIL line.

Run with ``pytest -v -s tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
Criteria 7 and 8 share one pair of trained models (about five minutes on one core).
"""

from __future__ import annotations

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from csap import tensor as T
from csap.attention import multi_head_attention
from csap.cost_model import compare_variants, count_attention_matmul_flops, count_params
from csap.decoder import PRESETS, DecoderConfig, build_decoder, decoder_parameter_groups, stub_encoder
from csap.harness import (
    attention_similarity,
    decoder_grad_check,
    make_synthetic_dataset,
    stack,
    train_toy,
)
from csap.propagation import ValueRefinementBlock, pool_attention, project_attention, value_refine
from csap.tensor import Tensor

GRAD_TOL = 1e-4
STOCHASTIC_TOL = 1e-6
ORACLE_TOL = 1e-6
TRAIN_STEPS = 2000
TRAIN_LR = 0.1
MIOU_TARGET = 0.9


RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()


def _features(cfg: DecoderConfig, batch: int = 1, seed: int = 0):
    image = Tensor(np.random.default_rng(seed).random((batch, 3, cfg.input_size, cfg.input_size), dtype=np.float32))
    with T.no_grad():
        return stub_encoder(image, cfg, seed)


# -- 1 ------------------------------------------------------------------------
def test_criterion_01_propagation_parameters():
    t0 = time.perf_counter()
    cfg = DecoderConfig()
    analytic = count_params(cfg)["propagation"]
    enumerated = decoder_parameter_groups(build_decoder(cfg, 0))["propagation"]
    elapsed = time.perf_counter() - t0
    ok = analytic == enumerated == 8192 and elapsed < 1.0
    report(1, ok, f"propagation params analytic={analytic} enumerated={enumerated} (target 8192), {elapsed:.2f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------
def test_criterion_02_flop_reduction():
    t0 = time.perf_counter()
    table = compare_variants(DecoderConfig(), 512, 512)
    std = table["standard"]["report"].attention_matmul
    csap = table["csap"]["report"].attention_matmul
    ratio = table["csap"]["ratio"]
    elapsed = time.perf_counter() - t0
    ok = std == 176_160_768 and csap <= 1.5e7 and ratio >= 10 and elapsed < 1.0
    report(2, ok, f"standard={std:,} csap={csap:,} ratio={ratio:.2f}x, {elapsed:.2f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------
def _qk_bypass(cfg: DecoderConfig, sizes=(64, 128, 256, 512, 1024)) -> tuple[bool, str]:
    dec = build_decoder(cfg, 0)
    targets = cfg.propagation.target_stages
    qk_params = sum(
        p.size for n, p in dec.named_parameters()
        if n.split(".")[0] == "refine" and int(n.split(".")[1]) in targets and ("q_proj" in n or "k_proj" in n)
    )
    qk_flops = 0
    for size in sizes:
        c = cfg.with_(input_size=size)
        rep = count_attention_matmul_flops(c, "csap", size, size)
        qk_flops += sum(rep.stage(k)["qk_matmul"] for k in targets)
    return qk_params == 0 and qk_flops == 0, f"target-stage q/k params={qk_params}, qk FLOPs={qk_flops}"


def test_criterion_03_qk_bypass():
    ok, detail = _qk_bypass(DecoderConfig())
    report(3, ok, detail + " at inputs 64..1024")
    assert ok


# -- 4 ------------------------------------------------------------------------
def _gradcheck(cfg: DecoderConfig) -> tuple[bool, float, int, float]:
    t0 = time.perf_counter()
    rep = decoder_grad_check(cfg, seed=42, eps=1e-3)
    elapsed = time.perf_counter() - t0
    n_params = len(dict(build_decoder(cfg, 0).named_parameters()))
    ok = rep.passed(GRAD_TOL) and len(rep.errors) == n_params and elapsed < 120
    return ok, rep.max_error, len(rep.errors), elapsed


def test_criterion_04_gradients():
    ok, err, count, elapsed = _gradcheck(PRESETS["tiny"])
    report(4, ok, f"{count} decoder parameters, max relative error {err:.2e} (< {GRAD_TOL:g}), {elapsed:.1f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------
def _random_config(rng: np.random.Generator, source_stage: int | None = None) -> DecoderConfig:
    n_heads = int(rng.choice([1, 2, 4]))
    d = n_heads * int(rng.choice([2, 4, 8]))
    input_size = int(rng.choice([64, 128]))
    r = int(rng.choice([1, 2])) if input_size == 128 else 1
    return DecoderConfig(
        stage_channels=tuple(int(c) for c in rng.integers(2, 12, 4)),
        d=d, n_heads=n_heads, r=r, ffn_expansion=1, s=int(rng.integers(1, 5)),
        num_classes=int(rng.integers(1, 5)),
        source_stage=source_stage or int(rng.choice([2, 3, 4])),
        variant="csap", input_size=input_size,
    )


def _row_stochastic_sweep(n: int, source_stage: int | None = None, seed: int = 0) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for i in range(n):
        cfg = _random_config(rng, source_stage)
        with T.no_grad():
            _, diag = build_decoder(cfg, i)(_features(cfg, int(rng.integers(1, 3)), i))
        maps = [diag.source_maps.weights.data] + [p.weights.data for p in diag.propagated.values()]
        for w in maps:
            err = float(np.abs(w.sum(-1) - 1).max())
            worst = max(worst, err)
            ok &= bool(w.min() >= 0) and err <= STOCHASTIC_TOL
    return ok, worst


def test_criterion_05_row_stochastic():
    ok, worst = _row_stochastic_sweep(100)
    report(5, ok, f"100 random configs/inputs, max row-sum error {worst:.1e} (<= {STOCHASTIC_TOL:g})")
    assert ok


# -- 6 ------------------------------------------------------------------------
def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _oracle_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    errs = {}

    # multi-head attention, 16 queries x 6 keys, 2 heads
    q, k, v = rng.standard_normal((1, 16, 8)), rng.standard_normal((1, 6, 8)), rng.standard_normal((1, 6, 8))
    out, maps = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 2)
    ref = np.zeros_like(q)
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        for i in range(16):
            a = _softmax(np.array([q[0, i, sl] @ k[0, j, sl] for j in range(6)]) / 2.0)
            ref[0, i, sl] = sum(a[j] * v[0, j, sl] for j in range(6))
    errs["multi_head_attention"] = float(np.abs(out.data - ref).max())

    # pool_attention, 8x8 query grid -> 4x4
    a = rng.dirichlet(np.ones(5), size=(1, 2, 64))
    got = pool_attention(Tensor(a), 8, 8, 4).data
    ref = np.zeros((1, 2, 16, 5))
    for i in range(4):
        for j in range(4):
            cells = [(2 * i + di) * 8 + 2 * j + dj for di in range(2) for dj in range(2)]
            ref[:, :, i * 4 + j] = a[:, :, cells].mean(axis=2)
    errs["pool_attention"] = float(np.abs(got - ref).max())

    # project_attention
    pooled = rng.dirichlet(np.ones(4), size=(1, 2, 9))
    w = rng.standard_normal((4, 4))
    got = project_attention(Tensor(pooled), Tensor(w), 2).weights.data
    ref = np.array([[[_softmax(w @ pooled[0, h, i]) for i in range(9)] for h in range(2)]])
    errs["project_attention"] = float(np.abs(got - ref).max())

    # value_refine: B=1, 2 heads, s=2, M=4, D=6 on a 4x4 stage grid
    block = ValueRefinementBlock(6, 4, 2, rng)
    c = rng.standard_normal((1, 16, 6)).astype(np.float32)
    attn = project_attention(Tensor(rng.dirichlet(np.ones(4), size=(1, 2, 4))), Tensor(np.eye(4)), 2)
    got = value_refine(Tensor(c), 4, 4, attn, (2, 2), block).data[0].astype(np.float64)
    ref = _value_refine_loop(block, c[0].astype(np.float64), attn.weights.data[0].astype(np.float64))
    errs["value_refine"] = float(np.abs(got - ref).max())
    return errs


def _ln(x, g, b):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b


def _gelu(x):
    return np.array([t * 0.5 * (1 + math.erf(t / math.sqrt(2))) for t in x.ravel()]).reshape(x.shape)


def _value_refine_loop(block, c, attn):
    """Explicit loops: LN, 2x2 value pooling, per-head A.V, out proj, bilinear 2->4, residual, Mix-FFN."""
    f64 = lambda p: p.data.astype(np.float64)
    x = _ln(c, f64(block.norm1.weight), f64(block.norm1.bias))
    grid = x.reshape(4, 4, 6)
    pooled = np.array([grid[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean(axis=(0, 1)) for i in range(2) for j in range(2)])
    values = pooled @ f64(block.v_proj.weight)
    heads = np.zeros((4, 4))
    for h in range(2):
        for qi in range(4):
            heads[qi, 2 * h : 2 * h + 2] = sum(attn[h, qi, m] * values[m, 2 * h : 2 * h + 2] for m in range(4))
    small = (heads @ f64(block.out_proj.weight) + f64(block.out_proj.bias)).reshape(2, 2, 6)
    taps = [(0, 0, 0.0), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 0.0)]  # half-pixel 2 -> 4
    up = np.zeros((4, 4, 6))
    for i, (a0, a1, ty) in enumerate(taps):
        for j, (b0, b1, tx) in enumerate(taps):
            up[i, j] = ((1 - ty) * ((1 - tx) * small[a0, b0] + tx * small[a0, b1])
                        + ty * ((1 - tx) * small[a1, b0] + tx * small[a1, b1]))
    y = c + up.reshape(16, 6)
    z = _ln(y, f64(block.norm2.weight), f64(block.norm2.bias))
    ffn = block.ffn
    h1 = (z @ f64(ffn.fc1.weight) + f64(ffn.fc1.bias)).reshape(4, 4, -1)
    hp = np.pad(h1, ((1, 1), (1, 1), (0, 0)))
    dw = np.zeros_like(h1)
    for i in range(4):
        for j in range(4):
            dw[i, j] = (hp[i : i + 3, j : j + 3] * f64(ffn.dw_weight).transpose(1, 2, 0)).sum(axis=(0, 1))
    dw += f64(ffn.dw_bias)
    return y + _gelu(dw.reshape(16, -1)) @ f64(ffn.fc2.weight) + f64(ffn.fc2.bias)


def test_criterion_06_oracles():
    errs = _oracle_errors()
    ok = all(e <= ORACLE_TOL for e in errs.values())
    report(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" (<= {ORACLE_TOL:g})")
    assert ok


# -- 7 and 8: shared training ---------------------------------------------------
@pytest.fixture(scope="module")
def trained():
    cfg = PRESETS["toy"]
    train = make_synthetic_dataset(0, 16, 64, 64, 4)
    held = make_synthetic_dataset(1000, 32, 64, 64, 4)
    runs = {}
    for variant in ("csap", "standard"):
        t0 = time.perf_counter()
        res = train_toy(cfg.with_(variant=variant), train, TRAIN_STEPS, TRAIN_LR, seed=0, eval_set=held)
        runs[variant] = (res, time.perf_counter() - t0)
    return runs, held


def test_criterion_07_learnability(trained):
    runs, _ = trained
    res, elapsed = runs["csap"]
    log = res.log
    best = max(m for step, m in log.evals.items() if step <= TRAIN_STEPS)
    first = min(step for step, m in sorted(log.evals.items()) if m >= MIOU_TARGET) if best >= MIOU_TARGET else None
    early, late = log.smoothed(0, 10), log.smoothed(90, 100)
    ok = best >= MIOU_TARGET and late < early and elapsed < 900
    report(7, ok, f"held-out mIoU best {best:.3f} (first >= {MIOU_TARGET} at step {first}), "
                  f"loss mean 0-10 {early:.3f} -> 90-100 {late:.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_08_attention_similarity(trained):
    runs, held = trained
    images, _ = stack(held)
    stats = attention_similarity(runs["csap"][0].model, runs["standard"][0].model, images, seed=0)
    ok = stats.mean_cosine > stats.shuffled_baseline
    per = ", ".join(f"stage {k} {v:.7f}" for k, v in sorted(stats.per_stage.items()))
    report(8, ok, f"mean cosine {stats.mean_cosine:.7f} vs shuffled {stats.shuffled_baseline:.7f} ({per})")
    assert ok


# -- 9 ------------------------------------------------------------------------
CLI_RUNS = [
    ["flops", "--variant", "csap", "--input-size", "512"],
    ["flops", "--variant", "standard", "--format", "kv"],
    ["params", "--seed", "1"],
    ["gradcheck", "--seed", "42", "--eps", "1e-3"],
    ["train-toy", "--steps", "5", "--seed", "3"],
    ["attn-sim", "--steps", "3", "--seed", "3"],
    ["predict", "--seed", "2", "--preset", "toy"],
]


def test_criterion_09_cli_determinism():
    mismatched = []
    for argv in CLI_RUNS:
        outs = [subprocess.run([sys.executable, "-m", "csap", *argv], capture_output=True) for _ in range(2)]
        if outs[0].stdout != outs[1].stdout or outs[0].returncode != outs[1].returncode or not outs[0].stdout:
            mismatched.append(argv[0])
    ok = not mismatched
    report(9, ok, f"{len(CLI_RUNS)} command lines run twice, byte-identical stdout"
                  + (f"; differing: {mismatched}" if mismatched else ""))
    assert ok


# -- 10 -----------------------------------------------------------------------
def test_criterion_10_source_stage_generality():
    parts, ok = [], True
    for src in (2, 3):
        tiny = PRESETS["tiny"].with_(source_stage=src)
        with T.no_grad():
            logits, _ = build_decoder(tiny, 0)(_features(tiny))
        built = logits.shape == (1, tiny.num_classes, 8, 8)
        c3, _ = _qk_bypass(DecoderConfig(source_stage=src), sizes=(128, 256, 512))
        c4, err, _, _ = _gradcheck(tiny)
        c5, _ = _row_stochastic_sweep(100, source_stage=src, seed=src)
        paper = DecoderConfig(source_stage=src)
        n_prop = decoder_parameter_groups(build_decoder(paper, 0))["propagation"]
        count_ok = n_prop == 2 * paper.n_keys**2
        ok &= built and c3 and c4 and c5 and count_ok
        parts.append(f"src {src}: build {built}, crit3 {c3}, crit4 {c4} ({err:.1e}), crit5 {c5}, "
                     f"prop params {n_prop} = 2*{paper.n_keys}^2 {count_ok}")
    report(10, ok, "; ".join(parts))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
