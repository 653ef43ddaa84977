"""Adam training loop, evaluation and overlay rendering."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from . import autodiff as ad
from .data import SegmentationSample, collate, iterate_batches
from .losses import LossWeights, class_targets, hybrid_loss
from .metrics import (METRIC_NAMES, ConfusionCounts, Scores, confusion, format_mean_std, metrics,
                      score_row, write_metrics_csv)
from .model import CADUnet, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("step", "epoch", "lr", "loss_total", "loss_inf", "loss_lung", "loss_edge")


class TrainingDiverged(RuntimeError):
    pass


# ----------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, lr, tuple(betas), eps)


def adam_step(params, grads, state: OptimState, names: list[str] | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {label}")
        if g.shape != params[i].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {params[i].shape}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def lr_schedule(epoch: int, base_lr: float = 1e-4, milestones=(50, 90), factor: float = 0.1) -> float:
    """Step decay: ``base_lr`` through epoch 50, x0.1 through 90, x0.01 after."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    drops = sum(1 for m in milestones if epoch > m)
    return base_lr * factor ** drops


# ----------------------------------------------------------------------
# configuration and records


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    epochs: int = 120
    batch_size: int = 4
    lr: float = 1e-4
    lr_milestones: tuple[int, ...] = (50, 90)
    lr_factor: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 10
    max_steps: int | None = None
    threshold: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = LossWeights(**d.pop("loss", {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        for key in ("lr_milestones", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(model=model, loss=loss, **d)

    def lr_at(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr, self.lr_milestones, self.lr_factor)


@dataclass
class RunRecord:
    steps: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ValueError("run record rows must be appended in step order")
        self.steps.append(row)

    def losses(self) -> np.ndarray:
        return np.array([r["loss_total"] for r in self.steps])


class _RecordWriter:
    def __init__(self, path: Path | None):
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=RECORD_COLUMNS)
            self.writer.writeheader()

    def write(self, row: dict) -> None:
        if self.fh is not None:
            self.writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in RECORD_COLUMNS})
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


@dataclass
class TrainResult:
    model: CADUnet
    record: RunRecord
    state: OptimState
    best_f1: float | None = None
    out_dir: Path | None = None


# ----------------------------------------------------------------------
# training


def train(config: TrainConfig, samples: list[SegmentationSample], val_samples: list[SegmentationSample] | None = None,
          out_dir: str | Path | None = None,
          callback: Callable[[int, CADUnet, RunRecord], bool] | None = None) -> TrainResult:
    """Train a fresh model; everything is determined by ``config.seed``.

    ``callback(step, model, record)`` runs after every optimizer step and may
    return True to stop early.
    """
    if not samples:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    model = CADUnet(config.model, seed=config.seed)
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    state = OptimState.for_params(params, config.lr, config.betas, config.eps)
    record = RunRecord()
    writer = _RecordWriter(out / "run_record.csv" if out else None)
    best_f1 = None
    step = 0
    stop = False
    try:
        for epoch in range(config.epochs):
            state.lr = config.lr_at(epoch)
            model.train()
            for batch in iterate_batches(samples, config.batch_size, config.seed, epoch, config.augment):
                model.zero_grad()
                output = model(batch.images)
                total, parts = hybrid_loss(output, batch.infection, batch.lung, config.loss, batch.lung_available)
                loss_value = float(total.data)
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(f"loss became {loss_value} at step {step + 1} (epoch {epoch})")
                grads = ad.backward(total, params)
                adam_step(params, grads, state, names)
                step += 1
                row = {"step": step, "epoch": epoch, "lr": state.lr, "loss_total": loss_value,
                       "loss_inf": float(parts["inf"].data), "loss_lung": float(parts["lung"].data),
                       "loss_edge": float(parts["edge"].data)}
                record.append(row)
                writer.write(row)
                if callback is not None and callback(step, model, record):
                    stop = True
                if stop or (config.max_steps is not None and step >= config.max_steps):
                    stop = True
                    break
            if val_samples:
                scores = evaluate_model(model, val_samples, config.threshold).pooled[0]
                record.validation.append({"epoch": epoch, "step": step, **scores.as_dict()})
                if best_f1 is None or scores.f1 > best_f1:
                    best_f1 = scores.f1
                    if out is not None:
                        save_checkpoint(model, out / "best", step, {"epoch": epoch, "val_f1": best_f1})
            if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, out / "last", step, {"epoch": epoch})
            if stop:
                break
    finally:
        writer.close()
    if out is not None:
        save_checkpoint(model, out / "final", step)
        if record.validation:
            with open(out / "validation.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["epoch", "step", *METRIC_NAMES])
                w.writeheader()
                w.writerows(record.validation)
    return TrainResult(model, record, state, best_f1, out)


# ----------------------------------------------------------------------
# evaluation


def predict_probabilities(model: CADUnet, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Sigmoid infection probabilities (N, C, H, W) in eval mode."""
    was_training = model.training
    model.eval()
    try:
        chunks = []
        for start in range(0, len(images), batch_size):
            out = model(images[start:start + batch_size])
            chunks.append(ad._sigmoid(out.infection_logits.data))
        return np.concatenate(chunks)
    finally:
        model.train(was_training)


def class_names(num_classes: int) -> list[str]:
    return ["infection"] if num_classes == 1 else ["GGO", "CON"]


@dataclass
class EvalResult:
    classes: list[str]
    per_slice: list[list[Scores]]  # [slice][class]
    pooled: list[Scores]  # scores of the summed confusion counts, per class
    counts: list[ConfusionCounts]
    predictions: np.ndarray

    def mean_std(self) -> dict[str, dict[str, str]]:
        return {cls: {m: format_mean_std([s[k].as_dict()[m] for s in self.per_slice]) for m in METRIC_NAMES}
                for k, cls in enumerate(self.classes)}


def score_predictions(pred: np.ndarray, targets: np.ndarray, classes: list[str], predictions=None) -> EvalResult:
    per_slice, totals = [], [ConfusionCounts(0, 0, 0, 0) for _ in classes]
    for i in range(len(pred)):
        row = []
        for k in range(len(classes)):
            c = confusion(pred[i, k], targets[i, k])
            totals[k] = totals[k] + c
            row.append(metrics(c))
        per_slice.append(row)
    return EvalResult(classes, per_slice, [metrics(c) for c in totals], totals,
                      pred if predictions is None else predictions)


def evaluate_model(model: CADUnet, samples: list[SegmentationSample], threshold: float = 0.5,
                   batch_size: int = 4) -> EvalResult:
    batch = collate(samples)
    probs = predict_probabilities(model, batch.images, batch_size)
    pred = probs > threshold
    targets = class_targets(batch.infection, model.config.num_classes).astype(bool)
    return score_predictions(pred, targets, class_names(model.config.num_classes), pred)


def evaluate(checkpoint: str | Path | CADUnet, samples: list[SegmentationSample], out_dir: str | Path | None = None,
             threshold: float = 0.5, run: str = "run", dataset: str = "dataset", overlays: bool = True,
             num_classes: int | None = None) -> EvalResult:
    """Score a checkpoint on ``samples``; optionally write CSVs and overlay PNGs.

    The checkpoint directory is only read.
    """
    model = checkpoint if isinstance(checkpoint, CADUnet) else load_checkpoint(checkpoint)[0]
    if num_classes is not None and num_classes != model.config.num_classes:
        raise ValueError(f"dataset expects {num_classes} classes, checkpoint predicts {model.config.num_classes}")
    if any(s.infection_mask.max() > 1 for s in samples) and model.config.num_classes == 1:
        log.info("multi-class labels scored in binary mode (any lesion counts as infection)")
    result = evaluate_model(model, samples, threshold)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv",
                          [score_row(run, dataset, cls, result.pooled[k]) for k, cls in enumerate(result.classes)])
        with open(out / "per_slice.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slice", "source", "class", *METRIC_NAMES])
            for i, row in enumerate(result.per_slice):
                for k, cls in enumerate(result.classes):
                    w.writerow([i, samples[i].source, cls, *(f"{getattr(row[k], m):.6f}" for m in METRIC_NAMES)])
        (out / "summary.json").write_text(json.dumps(
            {"pooled": {cls: result.pooled[k].as_dict() for k, cls in enumerate(result.classes)},
             "per_slice_mean_std": result.mean_std(), "threshold": threshold}, indent=2))
        if overlays:
            odir = out / "overlays"
            odir.mkdir(exist_ok=True)
            for i, s in enumerate(samples):
                Image.fromarray(overlay(s.image, result.predictions[i])).save(odir / f"slice_{i:04d}.png")
    return result


GGO_COLOUR = np.array([0, 255, 0], dtype=np.float64)
CON_COLOUR = np.array([255, 0, 0], dtype=np.float64)


def overlay(image: np.ndarray, masks: np.ndarray, opacity: float = 0.5) -> np.ndarray:
    """RGB overlay: first mask channel green (GGO / infection), second red (CON)."""
    grey = np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    for k, colour in enumerate((GGO_COLOUR, CON_COLOUR)[:len(masks)]):
        m = np.asarray(masks[k], dtype=bool)
        rgb[m] = (1 - opacity) * rgb[m] + opacity * colour
    return np.round(rgb).astype(np.uint8)
