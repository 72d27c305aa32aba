"""Synthetic segmentation data, mIoU, a toy trainer and the attention-similarity probe."""

from __future__ import annotations

import colorsys
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, SegmentationModel, build_decoder, stub_encoder
from .errors import NumericError, TrainingError
from .gradcheck import GradCheckReport, grad_check, randomize
from .propagation import pool_attention


@dataclass
class SyntheticSample:
    image: np.ndarray  # (1, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (1, H, W) int64 in [0, K)


def class_palette(k: int) -> np.ndarray:
    """Mean RGB color per class; class 0 (background) is dark gray."""
    colors = [(0.25, 0.25, 0.25)]
    for c in range(1, k):
        colors.append(colorsys.hsv_to_rgb((c - 1) / max(k - 1, 1), 0.85, 0.95))
    return np.array(colors, dtype=np.float64)


def _render_sample(rng: np.random.Generator, h: int, w: int, k: int, noise: float) -> SyntheticSample:
    labels = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    for c in range(1, k):
        sh = int(rng.integers(h // 4, h // 2 + 1))
        sw = int(rng.integers(w // 4, w // 2 + 1))
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        if rng.random() < 0.5:
            mask = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
        else:
            cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
            mask = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
        labels[mask] = c
    palette = class_palette(k)
    image = palette[labels] + rng.normal(0.0, noise, (h, w, 3))
    image = np.clip(image, 0.0, 1.0).transpose(2, 0, 1)
    return SyntheticSample(image[None].astype(np.float32), labels[None])


def make_synthetic_dataset(
    seed: int, n: int, height: int = 64, width: int = 64, k: int = 4, noise: float = 0.08
) -> list[SyntheticSample]:
    """``n`` samples, one rectangle or ellipse per foreground class on background 0."""
    if k < 2:
        raise ValueError("need at least two classes")
    if height % 32 or width % 32:
        raise ValueError(f"extents {height}x{width} must be divisible by 32")
    # per-sample seeds keep each sample independent of n
    return [_render_sample(np.random.default_rng([seed, i]), height, width, k, noise) for i in range(n)]


def stack(samples: list[SyntheticSample]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.concatenate([s.image for s in samples]),
        np.concatenate([s.labels for s in samples]),
    )


def downsample_labels(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour (half-pixel centers) downsampling of (B, H, W) labels."""
    h, w = labels.shape[-2:]
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def miou(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """Mean IoU over classes present in ``pred`` or ``gt``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.size == 0 or gt.size == 0:
        raise ValueError("mIoU of an empty label map")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.min() < 0 or gt.min() < 0 or pred.max() >= k or gt.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    ious = []
    for c in range(k):
        p, g = pred == c, gt == c
        union = np.logical_or(p, g).sum()
        if union:
            ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious))


# -- training ---------------------------------------------------------------
@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    evals: dict[int, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "miou"])
        for step, loss in zip(self.steps, self.losses):
            m = self.evals.get(step)
            writer.writerow([step, repr(loss), "" if m is None else repr(m)])
        return buf.getvalue()

    def smoothed(self, start: int, stop: int) -> float:
        return float(np.mean(self.losses[start:stop]))

    @property
    def best_miou(self) -> float:
        return max(self.evals.values(), default=float("nan"))


@dataclass
class TrainResult:
    model: SegmentationModel
    log: TrainLog


def evaluate(model: SegmentationModel, samples: list[SyntheticSample], batch_size: int = 16) -> float:
    """mIoU of stage-2 resolution argmax against nearest-downsampled labels."""
    preds, gts = [], []
    for i in range(0, len(samples), batch_size):
        images, labels = stack(samples[i : i + batch_size])
        with T.no_grad():
            logits, _ = model(images)
        h2, w2 = logits.shape[2:]
        preds.append(np.argmax(logits.data, axis=1))
        gts.append(downsample_labels(labels, h2, w2))
    return miou(np.concatenate(preds), np.concatenate(gts), model.cfg.num_classes)


def train_toy(
    cfg: DecoderConfig,
    dataset: list[SyntheticSample],
    steps: int,
    lr: float,
    seed: int = 0,
    eval_set: list[SyntheticSample] | None = None,
    eval_every: int = 100,
    momentum: float = 0.9,
) -> TrainResult:
    """Full-batch gradient descent with momentum on stage-2 cross-entropy."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    model = SegmentationModel(cfg, seed)
    images, labels = stack(dataset)
    x = T.Tensor(images)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    log = TrainLog()
    targets = None
    for step in range(steps):
        if eval_set is not None and step % eval_every == 0:
            log.evals[step] = evaluate(model, eval_set)
        model.zero_grad()
        # divergence is reported as a TrainingError below, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                logits, _ = model(x)
                if targets is None:
                    targets = downsample_labels(labels, *logits.shape[2:])
                loss = T.cross_entropy(logits, targets)
            except NumericError as exc:
                raise TrainingError(f"non-finite activations ({exc})", step) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError("non-finite loss", step)
            loss.backward()
        for p, v in zip(params, velocity):
            v *= momentum
            v += p.grad
            p.data -= lr * v
        log.steps.append(step)
        log.losses.append(value)
    if eval_set is not None:
        log.evals[steps] = evaluate(model, eval_set)
    return TrainResult(model, log)


# -- gradient check ---------------------------------------------------------
def decoder_grad_check(
    cfg: DecoderConfig, seed: int = 0, eps: float = 1e-3, probes: int = 2, batch: int = 2
) -> GradCheckReport:
    """Finite-difference check of every decoder parameter in float64.

    Encoder features are computed once and frozen; decoder weights are
    randomized away from their small initialization first.
    """

    def build(sd: int):
        rng = np.random.default_rng(sd)
        image = T.Tensor(rng.random((batch, 3, cfg.input_size, cfg.input_size)))
        with T.no_grad():
            feats = stub_encoder(image, cfg, sd).astype(np.float64)
        decoder = build_decoder(cfg, sd).astype(np.float64)
        randomize(decoder.parameters(), rng)
        side = cfg.stage_size(2)
        labels = rng.integers(0, cfg.num_classes, (batch, side, side))
        return dict(decoder.named_parameters()), lambda: T.cross_entropy(decoder(feats)[0], labels)

    return grad_check(build, seed=seed, eps=eps, probes=probes)


# -- attention similarity ---------------------------------------------------
@dataclass
class SimilarityStats:
    mean_cosine: float
    per_stage: dict[int, float]
    shuffled_baseline: float


def row_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity along the last axis."""
    num = (a * b).sum(axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return np.clip(num / np.maximum(den, 1e-30), -1.0, 1.0)


def attention_similarity(
    model_csap: SegmentationModel,
    model_standard: SegmentationModel,
    images: np.ndarray,
    seed: int = 0,
) -> SimilarityStats:
    """Cosine between propagated maps and the standard model's pooled per-stage maps."""
    if model_csap.cfg.variant != "csap" or model_standard.cfg.variant != "standard":
        raise ValueError("expected a csap model and a standard model")
    with T.no_grad():
        _, diag_c = model_csap(images)
        _, diag_s = model_standard(images)
    s = model_csap.cfg.s
    rng = np.random.default_rng(seed)
    per_stage, shuffled = {}, []
    for k, prop in sorted(diag_c.propagated.items()):
        maps = diag_s.stage_maps[k]
        side_h = model_standard.cfg.stage_size(k)
        with T.no_grad():
            ref = pool_attention(maps, side_h, side_h, s).data
        ours = prop.weights.data
        if ref.shape != ours.shape:
            raise ValueError(f"stage {k}: standard maps pool to {ref.shape}, propagated maps are {ours.shape}")
        per_stage[k] = float(row_cosine(ours, ref).mean())
        perm = rng.permuted(ours, axis=-1)
        shuffled.append(float(row_cosine(perm, ref).mean()))
    return SimilarityStats(
        mean_cosine=float(np.mean(list(per_stage.values()))),
        per_stage=per_stage,
        shuffled_baseline=float(np.mean(shuffled)),
    )
