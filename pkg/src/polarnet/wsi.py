"""Whole-slide tiling inference with a deterministic parallel merge, plus cost benchmarks."""

from __future__ import annotations

import csv
import json
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .boxes import DomainError, DetectionBox, format_detection, nms, rank_key
from .detector import DetectorModel, postprocess
from .metrics import topn_accuracy, truth_flags
from .synth import (SynthObject, _background, _borderline, _cluster, _gc, _place, _rng,
                    _round, render_object)

TILE = 1024


@dataclass(frozen=True)
class TileJob:
    slide_id: str
    x: int
    y: int
    index: int
    size: int = TILE


def _axis_origins(length: int, tile: int, stride: int) -> list[int]:
    xs = list(range(0, length - tile + 1, stride))
    if xs[-1] + tile < length:
        xs.append(length - tile)
    return xs


def plan_tiles(width: int, height: int, tile: int = TILE, overlap: int = 0,
               slide_id: str = "slide") -> list[TileJob]:
    """Row-major tile grid; the last row/column is shifted inward to stay in bounds."""
    if width < tile or height < tile:
        raise DomainError(f"slide {width}x{height} is smaller than the {tile}px tile")
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must be in [0, {tile}), got {overlap}")
    stride = tile - overlap
    jobs = []
    for y in _axis_origins(height, tile, stride):
        for x in _axis_origins(width, tile, stride):
            jobs.append(TileJob(slide_id, x, y, len(jobs), tile))
    return jobs


# -- slide storage -------------------------------------------------------------

class TiledSlide:
    """A single-resolution slide stored as ``tile_<x>_<y>.png`` files plus ``slide.txt``.

    ``slide.txt`` holds ``width height tile`` on its first line.
    """

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "slide.txt") as fh:
            w, h, t = fh.readline().split()[:3]
        self.width, self.height, self.store_tile = int(w), int(h), int(t)
        self.slide_id = self.root.name

    def _stored(self, tx: int, ty: int) -> np.ndarray:
        return np.asarray(Image.open(self.root / f"tile_{tx}_{ty}.png").convert("L"))

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        out = np.zeros((h, w), dtype=np.uint8)
        s = self.store_tile
        for ty in range(y // s * s, y + h, s):
            for tx in range(x // s * s, x + w, s):
                tile = self._stored(tx, ty)
                x0, y0 = max(x, tx), max(y, ty)
                x1, y1 = min(x + w, tx + tile.shape[1]), min(y + h, ty + tile.shape[0])
                out[y0 - y:y1 - y, x0 - x:x1 - x] = tile[y0 - ty:y1 - ty, x0 - tx:x1 - tx]
        return out

    def ground_truth(self) -> list[DetectionBox]:
        p = self.root / "planted.txt"
        if not p.exists():
            return []
        out = []
        with open(p) as fh:
            for line in fh:
                if line.strip():
                    cx, cy, w, h, cls = line.split(",")
                    out.append(DetectionBox(float(cx), float(cy), float(w), float(h),
                                            class_id=int(cls)))
        return out


def write_slide(root, pixels: np.ndarray, tile: int = TILE) -> TiledSlide:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    h, w = pixels.shape
    for ty in range(0, h, tile):
        for tx in range(0, w, tile):
            Image.fromarray(pixels[ty:ty + tile, tx:tx + tile]).save(
                root / f"tile_{tx}_{ty}.png", compress_level=1)
    (root / "slide.txt").write_text(f"{w} {h} {tile}\n")
    return TiledSlide(root)


def make_mosaic(root, width: int = 8192, height: int = 8192, n_planted: int = 10,
                seed: int = 0, difficulty: float = 0.5, n_distractors: int = 40) -> TiledSlide:
    """Synthetic slide: background cells and borderline distractors with planted polar objects."""
    rng = _rng(seed, 99, width, height)
    canvas = _background(rng, max(width, height))[:height, :width].copy()
    placed: list = []
    planted: list[SynthObject] = []
    objects: list[SynthObject] = []

    def add(o):
        objects.append(o)
        placed.append((o.cx, o.cy, o.major_axis / 2))

    while len(planted) < n_planted:
        at = _place(rng, placed, 80, min(width, height) - 80, 200)
        if at is None:
            raise RuntimeError("could not place planted objects")
        o = _gc(rng, *at)
        planted.append(o)
        add(o)
    for _ in range(n_distractors):
        at = _place(rng, placed, 60, min(width, height) - 60, 60)
        if at is not None:
            add(_borderline(rng, *at))
    for _ in range(n_distractors // 4):
        at = _place(rng, placed, 80, min(width, height) - 80, 60)
        if at is not None:
            for o in _cluster(rng, *at):
                add(o)
    area_tiles = width * height / (TILE * TILE)
    for _ in range(int(area_tiles * (8 + 20 * difficulty))):
        at = _place(rng, placed, 20, min(width, height) - 20, 20, tries=10)
        if at is not None:
            add(_round(rng, *at))
    for o in objects:
        render_object(canvas, o, rng, brightness=float(rng.uniform(95, 125)))
    pixels = np.clip(canvas + rng.normal(0, 2.0, canvas.shape), 0, 255).astype(np.uint8)
    slide = write_slide(root, pixels)
    with open(Path(root) / "planted.txt", "w") as fh:
        for o in planted:
            b = o.box()
            fh.write(f"{b.cx:.3f},{b.cy:.3f},{b.w:.3f},{b.h:.3f},{b.class_id}\n")
    return slide


# -- inference -----------------------------------------------------------------

@dataclass
class TileOutcome:
    job: TileJob
    detections: list
    read_ms: float = 0.0
    infer_ms: float = 0.0
    polar_ms: float = 0.0
    error: Optional[str] = None


@dataclass
class SlideResult:
    slide_id: str
    detections: list               # (TileJob, DetectionBox in slide coordinates), ranked
    top: list                      # first N of ``detections``
    timings: dict                  # milliseconds
    failed: list = field(default_factory=list)
    n_tiles: int = 0

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    def dump_lines(self) -> list[str]:
        return [format_detection(self.slide_id, job.x, job.y, b) for job, b in self.detections]

    def top_json(self) -> list[dict]:
        return [{"slide": self.slide_id, "rank": k, "cx": round(b.cx, 6), "cy": round(b.cy, 6),
                 "w": round(b.w, 6), "h": round(b.h, 6), "class_id": b.class_id,
                 "p_obj": round(b.p_obj, 6),
                 "p_polar": None if b.p_polar is None else round(b.p_polar, 6),
                 "fused": round(b.fused, 6)}
                for k, (_, b) in enumerate(self.top, 1)]


def _run_tile(model: DetectorModel, slide, job: TileJob, alpha: float) -> TileOutcome:
    t0 = time.perf_counter()
    try:
        pixels = slide.read_region(job.x, job.y, job.size, job.size)
    except Exception as e:  # unreadable tile: recorded, not fatal
        return TileOutcome(job, [], error=f"{type(e).__name__}: {e}")
    t1 = time.perf_counter()
    timer: dict = {}
    fwd = model.forward(pixels, timer=timer)
    dets = postprocess(fwd, alpha, model.config)
    t2 = time.perf_counter()
    return TileOutcome(job, [d.shifted(job.x, job.y) for d in dets],
                       (t1 - t0) * 1e3, (t2 - t1) * 1e3, timer.get("polar", 0.0) * 1e3)


def run_slide(model: DetectorModel, slide, n: int = 20, workers: int = 1, overlap: int = 0,
              alpha: Optional[float] = None, nms_iou: Optional[float] = None,
              max_in_flight: Optional[int] = None) -> SlideResult:
    """Tile, detect, merge in job order, apply global per-class NMS and rank.

    The output depends only on the slide and the model, never on ``workers``.
    """
    alpha = model.config.alpha if alpha is None else alpha
    nms_iou = model.config.nms_iou if nms_iou is None else nms_iou
    t0 = time.perf_counter()
    jobs = plan_tiles(slide.width, slide.height, TILE, overlap, slide.slide_id)
    t_plan = time.perf_counter()
    outcomes: list[Optional[TileOutcome]] = [None] * len(jobs)
    if workers <= 1:
        for job in jobs:
            outcomes[job.index] = _run_tile(model, slide, job, alpha)
    else:
        limit = max_in_flight or 2 * workers
        with ThreadPoolExecutor(workers) as pool:
            pending: deque = deque()
            for job in jobs:
                pending.append(pool.submit(_run_tile, model, slide, job, alpha))
                if len(pending) >= limit:
                    out = pending.popleft().result()
                    outcomes[out.job.index] = out
            while pending:
                out = pending.popleft().result()
                outcomes[out.job.index] = out
    t_inf = time.perf_counter()

    merged = [(o.job, d) for o in outcomes for d in o.detections]
    keep = nms([d for _, d in merged], nms_iou)
    owner = {id(d): job for job, d in merged}
    ranked = [(owner[id(d)], d) for d in keep]
    t_merge = time.perf_counter()
    timings = {
        "plan_ms": (t_plan - t0) * 1e3,
        "read_ms": sum(o.read_ms for o in outcomes),
        "infer_ms": sum(o.infer_ms for o in outcomes),
        "polar_ms": sum(o.polar_ms for o in outcomes),
        "merge_ms": (t_merge - t_inf) * 1e3,
        "wall_ms": (t_merge - t0) * 1e3,
    }
    failed = [o.job for o in outcomes if o.error]
    return SlideResult(slide.slide_id, ranked, ranked[:max(n, 0)], timings, failed, len(jobs))


def slide_topn_accuracy(result: SlideResult, truth: Sequence[DetectionBox], n: int = 20,
                        iou_threshold: float = 0.5) -> float:
    flags = truth_flags([d for _, d in result.detections], truth, iou_threshold)
    return topn_accuracy(flags, n)


def recovered(result: SlideResult, truth: Sequence[DetectionBox], iou_threshold=0.5) -> int:
    """How many ground-truth objects are matched by an entry of the top list."""
    flags = truth_flags([d for _, d in result.top], truth, iou_threshold)
    return int(sum(flags))


def write_outputs(result: SlideResult, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{result.slide_id}.det.txt").write_text(
        "".join(line + "\n" for line in result.dump_lines()))
    (out_dir / f"{result.slide_id}.top.json").write_text(json.dumps(result.top_json(), indent=1))
    with open(out_dir / f"{result.slide_id}.timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "ms"])
        for k, v in result.timings.items():
            w.writerow([k, f"{v:.3f}"])


# -- benchmark -----------------------------------------------------------------

@dataclass
class CostRow:
    name: str
    total_s: float
    avg_s: float
    per_tile_ms: float
    polar_ms_per_tile: float
    topn: Optional[float]
    delta_avg_s: float = 0.0
    delta_topn: Optional[float] = None


def bench(variants: dict, slides: Sequence, n: int = 20, workers: int = 1,
          overlap: int = 0) -> list[CostRow]:
    """Per-variant wall time over slides; deltas are relative to the first variant."""
    if len(variants) < 2:
        raise ValueError("bench needs at least two model variants")
    rows = []
    for name, model in variants.items():
        total = 0.0
        tiles = 0
        polar = 0.0
        accs = []
        for slide in slides:
            t0 = time.perf_counter()
            res = run_slide(model, slide, n, workers, overlap)
            total += time.perf_counter() - t0
            tiles += res.n_tiles
            polar += res.timings["polar_ms"]
            gt = slide.ground_truth() if hasattr(slide, "ground_truth") else []
            if gt:
                accs.append(slide_topn_accuracy(res, gt, n))
        rows.append(CostRow(name, total, total / max(len(slides), 1),
                            total * 1e3 / max(tiles, 1), polar / max(tiles, 1),
                            float(np.mean(accs)) if accs else None))
    base = rows[0]
    for r in rows[1:]:
        r.delta_avg_s = r.avg_s - base.avg_s
        if r.topn is not None and base.topn is not None:
            r.delta_topn = r.topn - base.topn
    return rows


def format_cost_table(rows: Sequence[CostRow], n: int = 20) -> str:
    def t(s):
        return f"{s / 3600:.2f} hr" if s >= 3600 else f"{s:.2f} s"

    lines = [f"{'Model':<24}{'Total Time':>16}{'Average Time':>22}{'Per Tile':>14}"
             f"{f'Top-{n} Acc.':>20}"]
    for r in rows:
        d = f" (+{r.delta_avg_s:.2f})" if r is not rows[0] else ""
        acc = "-" if r.topn is None else f"{100 * r.topn:.1f}%"
        if r.delta_topn is not None:
            acc += f" ({100 * r.delta_topn:+.1f})"
        lines.append(f"{r.name:<24}{t(r.total_s):>16}{t(r.avg_s) + d:>22}"
                     f"{r.per_tile_ms:>11.1f} ms{acc:>20}")
    return "\n".join(lines)


def polar_overhead(width: int = 32, grid: int = 32, repeats: int = 20, seed: int = 0,
                   dtype=np.float32) -> dict:
    """Per-tile latency of the baseline detector vs the added polar work.

    The baseline is backbone + head on a ``grid * 32`` square tile; the overhead
    is the polar layer forward plus box pooling on the resulting ``width x grid x grid``
    features.  Medians over ``repeats`` runs, in milliseconds.
    """
    from .detector import DetectorConfig

    model = DetectorModel(DetectorConfig(width=width, use_polar=True), seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    tile = rng.integers(0, 255, (grid * 32, grid * 32), dtype=np.uint8)
    base, extra = [], []
    for _ in range(repeats + 2):
        timer: dict = {}
        model.forward(tile, timer=timer)
        base.append((timer["backbone"] + timer["head"]) * 1e3)
        extra.append((timer["polar"]) * 1e3)
    base_ms = float(np.median(base[2:]))
    polar_ms = float(np.median(extra[2:]))
    return {"baseline_ms": base_ms, "polar_ms": polar_ms, "ratio": polar_ms / base_ms,
            "features": f"{width}x{grid}x{grid}"}
