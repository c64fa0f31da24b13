"""Deterministic synthetic cytology-like tiles.

Elongated ellipses with a nucleus at one pole play the role of glandular cells;
round blobs, blob clusters, fibres and moderately elongated blobs are the
negatives.  Every tile is a pure function of its seed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import CLASS_NAMES, DetectionBox
from .tensor import DimensionError

TILE = 1024
LARGE_TILE = 1536
SOURCES = ("gc", "nc", "fp")
KINDS = ("polar_gc", "round_sc", "cluster_sc", "artifact")

# Ratio split between the two glandular subclasses.
AGC_ELONGATION = 3.0
MAX_GC_PER_TILE = 17

DEFAULT_COUNTS = {
    ("train", "gc"): 400,
    ("val", "gc"): 60,
    ("test", "gc"): 60,
    ("test", "nc"): 80,
    ("test", "fp"): 120,
}


@dataclass(frozen=True)
class SynthObject:
    cx: float
    cy: float
    major_axis: float
    minor_axis: float
    orientation: float
    kind: str

    @property
    def elongation(self) -> float:
        return self.major_axis / self.minor_axis

    @property
    def class_id(self) -> int:
        if self.kind != "polar_gc":
            return -1
        return 0 if self.elongation >= AGC_ELONGATION else 1

    @property
    def is_positive(self) -> bool:
        return self.kind == "polar_gc"

    def half_extent(self) -> tuple[float, float]:
        a, b = self.major_axis / 2, self.minor_axis / 2
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        return math.hypot(a * c, b * s), math.hypot(a * s, b * c)

    def box(self) -> DetectionBox:
        hw, hh = self.half_extent()
        return DetectionBox(self.cx, self.cy, 2 * hw, 2 * hh, class_id=self.class_id)

    def shifted(self, dx, dy) -> "SynthObject":
        return replace(self, cx=self.cx + dx, cy=self.cy + dy)


@dataclass
class SynthTile:
    pixels: np.ndarray
    annotations: list = field(default_factory=list)
    source_tag: str = "gc"
    distractors: list = field(default_factory=list)

    @property
    def positives(self) -> list[SynthObject]:
        return [o for o in self.annotations if o.is_positive]

    def gt_boxes(self) -> list[DetectionBox]:
        """Positive boxes clipped to the tile."""
        h, w = self.pixels.shape[:2]
        return [b for b in (clip_box(o.box(), w, h) for o in self.positives) if b is not None]


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])


def _upsample(a: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(a.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BICUBIC))


def _background(rng, size: int) -> np.ndarray:
    low = _upsample(rng.standard_normal((size // 32, size // 32)), size)
    fine = _upsample(rng.standard_normal((size // 4, size // 4)), size)
    return 40.0 + 6.0 * low + 3.0 * fine


def _texture(rng, shape) -> np.ndarray:
    small = rng.standard_normal((max(2, shape[0] // 6 + 2), max(2, shape[1] // 6 + 2)))
    return ndimage.zoom(small, 6, order=1)[:shape[0], :shape[1]]


def render_object(canvas: np.ndarray, obj: SynthObject, rng, brightness: float = 110.0):
    """Paint an anti-aliased, textured ellipse (plus a nucleus for polar cells)."""
    a, b = obj.major_axis / 2, obj.minor_axis / 2
    r = int(math.ceil(a)) + 3
    x0, x1 = max(int(obj.cx) - r, 0), min(int(obj.cx) + r + 1, canvas.shape[1])
    y0, y1 = max(int(obj.cy) - r, 0), min(int(obj.cy) + r + 1, canvas.shape[0])
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float32)
    dx, dy = xx + 0.5 - obj.cx, yy + 0.5 - obj.cy
    c, s = math.cos(obj.orientation), math.sin(obj.orientation)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    rad = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # soft edge about 1.5 px wide
    alpha = np.clip((1.0 - rad) * min(a, b) / 1.5 + 0.5, 0.0, 1.0)
    body = brightness * (0.85 + 0.15 * _texture(rng, alpha.shape))
    if obj.kind == "polar_gc":
        side = 1.0 if rng.random() < 0.5 else -1.0
        nu = np.sqrt(((u - side * 0.55 * a) / (0.3 * a)) ** 2 + (v / (0.6 * b)) ** 2)
        body = body + 45.0 * np.clip(1.2 - nu, 0.0, 1.0)
    region = canvas[y0:y1, x0:x1]
    region[:] = region * (1 - alpha) + body * alpha


def _place(rng, placed, lo, hi, min_gap, tries=50):
    for _ in range(tries):
        cx, cy = rng.uniform(lo, hi, 2)
        if all(math.hypot(cx - px, cy - py) >= min_gap + pr for px, py, pr in placed):
            return cx, cy
    return None


def _gc(rng, cx, cy) -> SynthObject:
    major = rng.uniform(64, 104)
    ratio = rng.uniform(2.2, 4.0)
    return SynthObject(cx, cy, major, major / ratio, rng.uniform(0, math.pi), "polar_gc")


def _round(rng, cx, cy) -> SynthObject:
    d = rng.uniform(22, 34)
    ratio = rng.uniform(1.0, 1.3)
    return SynthObject(cx, cy, d * math.sqrt(ratio), d / math.sqrt(ratio),
                       rng.uniform(0, math.pi), "round_sc")


def _borderline(rng, cx, cy) -> SynthObject:
    major = rng.uniform(48, 80)
    ratio = rng.uniform(1.5, 2.0)
    return SynthObject(cx, cy, major, major / ratio, rng.uniform(0, math.pi), "artifact")


def _fibre(rng, cx, cy) -> SynthObject:
    major = rng.uniform(90, 200)
    return SynthObject(cx, cy, major, rng.uniform(4, 7), rng.uniform(0, math.pi), "artifact")


def _cluster(rng, cx, cy) -> list[SynthObject]:
    out = []
    for _ in range(int(rng.integers(3, 8))):
        ox, oy = rng.normal(0, 14, 2)
        o = _round(rng, cx + ox, cy + oy)
        out.append(replace(o, kind="cluster_sc"))
    return out


def generate_large_tile(seed: int, source_tag: str = "gc", difficulty: float = 0.5,
                        size: int = LARGE_TILE, render: bool = True) -> SynthTile:
    """Render a tile whose positives sit near the centre (a GC-annotation crop).

    Layout and pixels draw from separate streams, so ``render=False`` yields the
    same annotations with a blank canvas at a fraction of the cost.
    """
    if source_tag not in SOURCES:
        raise ValueError(f"unknown source {source_tag!r}")
    rng = _rng(seed, SOURCES.index(source_tag), size, 0)
    objects: list[SynthObject] = []
    placed: list[tuple[float, float, float]] = []

    def add(obj):
        objects.append(obj)
        placed.append((obj.cx, obj.cy, obj.major_axis / 2))

    if source_tag == "gc":
        n_gc = int(min(MAX_GC_PER_TILE, 1 + rng.poisson(1.5 + 4.0 * difficulty)))
        lo, hi = (size - TILE) / 2 + 60, (size + TILE) / 2 - 60
        for _ in range(n_gc):
            at = _place(rng, placed, lo, hi, 70)
            if at is not None:
                add(_gc(rng, *at))
    elif source_tag == "fp":
        for _ in range(int(rng.integers(1, 4 + int(6 * difficulty)))):
            at = _place(rng, placed, 60, size - 60, 50)
            if at is not None:
                add(_borderline(rng, *at))
    else:
        for _ in range(int(rng.integers(0, 3 + int(4 * difficulty)))):
            at = _place(rng, placed, 80, size - 80, 60)
            if at is not None:
                for o in _cluster(rng, *at):
                    add(o)
        for _ in range(int(rng.integers(0, 2 + int(3 * difficulty)))):
            at = _place(rng, placed, 100, size - 100, 30)
            if at is not None:
                add(_fibre(rng, *at))

    n_sc = int(rng.integers(4, 10 + int(30 * difficulty))) * size * size // (TILE * TILE)
    for _ in range(n_sc):
        at = _place(rng, placed, 20, size - 20, 12 + 20 * (1 - difficulty))
        if at is not None:
            add(_round(rng, *at))
    if source_tag == "gc" and rng.random() < 0.5:
        at = _place(rng, placed, 80, size - 80, 60)
        if at is not None:
            for o in _cluster(rng, *at):
                add(o)

    if render:
        paint = _rng(seed, SOURCES.index(source_tag), size, 1)
        canvas = _background(paint, size)
        for obj in objects:
            render_object(canvas, obj, paint, brightness=float(paint.uniform(95, 125)))
        pixels = np.clip(canvas + paint.normal(0, 2.0, canvas.shape), 0, 255).astype(np.uint8)
    else:
        pixels = np.zeros((size, size), dtype=np.uint8)
    positives = [o for o in objects if o.is_positive]
    others = [o for o in objects if not o.is_positive]
    return SynthTile(pixels, positives, source_tag, others)


def clip_box(b: DetectionBox, w: float, h: float) -> Optional[DetectionBox]:
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, w), min(b.y2, h)
    if x2 <= x1 or y2 <= y1:
        return None
    return DetectionBox.from_corners(x1, y1, x2, y2, p_obj=b.p_obj, p_polar=b.p_polar,
                                     class_id=b.class_id)


def crop_boxes(boxes, ox, oy, size=TILE, min_keep=0.25) -> list[DetectionBox]:
    """Shift boxes into a crop window, clip them, drop those keeping < ``min_keep`` area."""
    out = []
    for b in boxes:
        c = clip_box(b.shifted(-ox, -oy), size, size)
        if c is not None and c.area >= min_keep * b.area:
            out.append(c)
    return out


def crop_origin(mode: str, seed: Optional[int] = None, large: int = LARGE_TILE,
                size: int = TILE) -> tuple[int, int]:
    if mode == "train":
        ox, oy = _rng(seed or 0, 7).integers(0, large - size + 1, 2)
        return int(ox), int(oy)
    if mode == "eval":
        return (large - size) // 2, (large - size) // 2
    raise ValueError(f"mode must be train or eval, got {mode!r}")


def _crop_objects(objs, ox, oy, size=TILE, min_keep=0.25):
    kept = []
    for o in objs:
        b = o.box()
        ix = min(b.x2, ox + size) - max(b.x1, ox)
        iy = min(b.y2, oy + size) - max(b.y1, oy)
        if ix <= 0 or iy <= 0 or ix * iy < min_keep * b.area:
            continue
        kept.append(o.shifted(-ox, -oy))
    return kept


def crop_protocol(large: SynthTile, mode: str = "eval", seed: Optional[int] = None) -> SynthTile:
    """Cut a 1024 window from a 1536 tile: random in ``train`` mode, centred otherwise."""
    h, w = large.pixels.shape[:2]
    if (h, w) != (LARGE_TILE, LARGE_TILE):
        raise DimensionError(f"crop protocol expects {LARGE_TILE}x{LARGE_TILE}, got {w}x{h}")
    ox, oy = crop_origin(mode, seed)
    pix = large.pixels[oy:oy + TILE, ox:ox + TILE].copy()
    return SynthTile(pix, _crop_objects(large.annotations, ox, oy), large.source_tag,
                     _crop_objects(large.distractors, ox, oy))


def generate_tile(seed: int, source_tag: str = "gc", difficulty: float = 0.5,
                  render: bool = True) -> SynthTile:
    """A 1024x1024 evaluation tile (centre crop of the larger rendering)."""
    return crop_protocol(generate_large_tile(seed, source_tag, difficulty, render=render), "eval")


# -- manifest -----------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    split: str
    source: str
    boxes: list

    def format(self) -> str:
        objs = " ".join(f"{b.cx:.3f},{b.cy:.3f},{b.w:.3f},{b.h:.3f},{CLASS_NAMES[b.class_id]}"
                        for b in self.boxes)
        return f"{self.path} {self.split} {self.source} {objs}".rstrip()

    @classmethod
    def parse(cls, line: str) -> "ManifestEntry":
        f = line.split()
        boxes = []
        for rec in f[3:]:
            cx, cy, w, h, name = rec.split(",")
            boxes.append(DetectionBox(float(cx), float(cy), float(w), float(h),
                                      class_id=CLASS_NAMES.index(name)))
        return cls(f[0], f[1], f[2], boxes)


def read_manifest(path) -> list[ManifestEntry]:
    with open(path) as fh:
        return [ManifestEntry.parse(line) for line in fh if line.strip()]


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.format() + "\n")


def load_pixels(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def _tile_seed(seed: int, split: str, source: str, index: int) -> int:
    h = hashlib.sha256(f"{seed}/{split}/{source}/{index}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _render_entry(args):
    out_dir, seed, split, source, index, difficulty = args
    s = _tile_seed(seed, split, source, index)
    large = generate_large_tile(s, source, difficulty)
    tile = large if split == "train" else crop_protocol(large, "eval")
    rel = f"{split}/{source}_{index:05d}.png"
    Image.fromarray(tile.pixels).save(out_dir / rel, optimize=False, compress_level=1)
    return ManifestEntry(rel, split, source, tile.gt_boxes())


def build_dataset(out_dir, counts=None, seed: int = 0, difficulty: float = 0.5,
                  workers: int = 1) -> Path:
    """Render every tile and write ``manifest.txt``; returns the manifest path.

    Train tiles are stored at 1536x1536 and cropped at load time; all other
    splits are stored as 1024x1024 centre crops.
    """
    out_dir = Path(out_dir)
    counts = DEFAULT_COUNTS if counts is None else counts
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for split, _ in counts:
            (out_dir / split).mkdir(exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write dataset to {out_dir}: {e}") from e
    jobs = [(out_dir, seed, split, source, i, difficulty)
            for (split, source), n in sorted(counts.items()) for i in range(n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            entries = list(ex.map(_render_entry, jobs, chunksize=4))
    else:
        entries = [_render_entry(j) for j in jobs]
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def manifest_digest(path) -> str:
    h = hashlib.sha256()
    root = Path(path).parent
    for e in read_manifest(path):
        h.update(e.format().encode())
        h.update((root / e.path).read_bytes())
    return h.hexdigest()


def second_moment_ratio(pixels: np.ndarray, background: float) -> float:
    """Eigenvalue ratio of the intensity-weighted second moment of a patch."""
    m = np.clip(pixels.astype(float) - background, 0, None)
    yy, xx = np.mgrid[:m.shape[0], :m.shape[1]]
    tot = m.sum()
    mx, my = (m * xx).sum() / tot, (m * yy).sum() / tot
    cxx = (m * (xx - mx) ** 2).sum() / tot
    cyy = (m * (yy - my) ** 2).sum() / tot
    cxy = (m * (xx - mx) * (yy - my)).sum() / tot
    ev = np.linalg.eigvalsh(np.array([[cxx, cxy], [cxy, cyy]]))
    return float(ev[1] / max(ev[0], 1e-12))
