"""SGD training with a stepwise learning-rate schedule, plus split-level prediction."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .boxes import DetectionBox
from .detector import (DetectorModel, LossParts, detection_loss, postprocess,
                       sample_negative_boxes, assign_targets)
from .metrics import average_precision
from .synth import TILE, LARGE_TILE, crop_boxes, crop_origin, load_pixels, read_manifest

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-3
    milestones: tuple = (5, 10, 16)
    gamma: float = 0.1
    max_epochs: int = 20
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    polar_weight: float = 1.0
    clip_norm: Optional[float] = 10.0
    seed: int = 0
    max_train: Optional[int] = None
    max_val: Optional[int] = None

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or (ms and ms[-1] >= self.max_epochs):
            raise ConfigurationError(
                f"milestones {ms} must be strictly increasing and below max_epochs={self.max_epochs}")
        self.milestones = ms

    @classmethod
    def full_schedule(cls, **kw) -> "TrainConfig":
        return cls(milestones=(25, 50, 80), max_epochs=100, **kw)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)


class SGD:
    """Momentum SGD with L2 weight decay and optional global gradient-norm clipping."""

    def __init__(self, projections, momentum=0.9, weight_decay=0.0, clip_norm=None):
        self.params = [pair for p in projections for pair in ((p, "weight"), (p, "bias"))]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(getattr(p, name), dtype=np.float64) for p, name in self.params]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((getattr(p, n + "_grad").astype(np.float64) ** 2).sum())
                                 for p, n in self.params)))

    def step(self, lr: float, grad_scale: float = 1.0):
        if self.clip_norm:
            norm = self.grad_norm() * grad_scale
            if norm > self.clip_norm:
                grad_scale *= self.clip_norm / norm
        for (p, name), v in zip(self.params, self.velocity):
            w = getattr(p, name)
            g = getattr(p, name + "_grad").astype(np.float64) * grad_scale
            if self.weight_decay and name == "weight":
                g = g + self.weight_decay * w
            v *= self.momentum
            v += g
            w -= (lr * v).astype(w.dtype)


@dataclass
class Sample:
    path: Path
    boxes: list
    source: str = "gc"


def load_split(manifest, split: str, sources=None, limit: Optional[int] = None) -> list[Sample]:
    root = Path(manifest).parent
    out = [Sample(root / e.path, e.boxes, e.source) for e in read_manifest(manifest)
           if e.split == split and (sources is None or e.source in sources)]
    return out[:limit] if limit is not None else out


def train_view(sample: Sample, pixels: np.ndarray, seed: int):
    """Random 1024 crop of a stored 1536 training tile (identity for 1024 tiles)."""
    if pixels.shape[0] == LARGE_TILE:
        ox, oy = crop_origin("train", seed)
        return pixels[oy:oy + TILE, ox:ox + TILE], crop_boxes(sample.boxes, ox, oy)
    return pixels, list(sample.boxes)


def predict_split(model: DetectorModel, samples, alpha: Optional[float] = None,
                  pre_nms: bool = False):
    """Run the model over samples; returns ``(predictions, annotations)`` per image.

    ``pre_nms`` keeps every candidate above the score floor (for re-fusion sweeps).
    """
    alpha = model.config.alpha if alpha is None else alpha
    out = []
    for s in samples:
        fwd = model.forward(load_pixels(s.path))
        preds = (fwd.candidates(alpha, model.config.score_floor) if pre_nms
                 else postprocess(fwd, alpha, model.config))
        out.append((preds, s.boxes))
    return out


def evaluate_ap(model: DetectorModel, samples, iou_threshold=0.5, alpha=None) -> Optional[float]:
    return average_precision(predict_split(model, samples, alpha), iou_threshold).ap


@dataclass
class EpochLog:
    epoch: int
    lr: float
    obj: float
    box: float
    cls: float
    polar: float
    total: float
    val_ap50: Optional[float]
    seconds: float


def train(model: DetectorModel, manifest, cfg: Optional[TrainConfig] = None,
          out_dir=None, cache_pixels: bool = True) -> list[EpochLog]:
    """Train in place; keeps the best-validation weights and returns per-epoch logs."""
    cfg = cfg or TrainConfig()
    train_set = load_split(manifest, "train", limit=cfg.max_train)
    if not train_set:
        raise ConfigurationError("manifest has no training tiles")
    val_set = load_split(manifest, "val", limit=cfg.max_val)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    cache = {}
    opt = SGD(model.projections(), cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    history = []
    best_ap, best_state = -1.0, None
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_set))
        sums = LossParts()
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            for k in batch:
                s = train_set[k]
                if s.path in cache:
                    pixels = cache[s.path]
                else:
                    pixels = load_pixels(s.path)
                    if cache_pixels:
                        cache[s.path] = pixels
                crop_seed = int(rng.integers(0, 2 ** 31))
                img, boxes = train_view(s, pixels, crop_seed)
                fwd = model.forward(img)
                negs = []
                if model.polar is not None:
                    t = assign_targets(boxes, *fwd.grid, fwd.scale)
                    negs = sample_negative_boxes(fwd, t, boxes, max(1, len(boxes)), rng)
                parts = detection_loss(model, fwd, boxes, negs, cfg.polar_weight)
                for f in ("obj", "box", "cls", "polar"):
                    setattr(sums, f, getattr(sums, f) + getattr(parts, f))
            opt.step(lr, 1.0 / len(batch))
        n = len(train_set)
        val_ap = evaluate_ap(model, val_set) if val_set else None
        rec = EpochLog(epoch, lr, sums.obj / n, sums.box / n, sums.cls / n, sums.polar / n,
                       sums.total / n, val_ap, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d lr %.1e loss %.4f (obj %.4f box %.4f cls %.4f polar %.4f) val AP50 %s",
                 epoch, lr, rec.total, rec.obj, rec.box, rec.cls, rec.polar,
                 "n/a" if val_ap is None else f"{val_ap:.4f}")
        if out_dir:
            with open(out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
        score = -1.0 if val_ap is None else val_ap
        if best_state is None or score > best_ap:
            best_ap = score
            best_state = [(p.weight.copy(), p.bias.copy()) for p in model.projections()]
            if out_dir:
                model.save(out_dir / "best.tdk")
    for p, (w, b) in zip(model.projections(), best_state):
        p.weight[...] = w
        p.bias[...] = b
    return history
