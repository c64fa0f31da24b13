"""A deliberately small single-stage detector hosting the polar attention layer.

Backbone: ``stage`` blocks of 2x2 space-to-depth + 1x1 projection + ReLU, so the
grid is the input downsampled by ``2**stage``.  The polar layer (optional) sits
between backbone and head; the head is a per-cell linear map to one objectness
logit, four box offsets and two class logits.  By default the head reads the polar
output together with the backbone features (``head_skip``), so localisation does
not have to come through the attention weights.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from .attention import PolarLayer, PolarParams, polarnet_batch_loss
from .boxes import DetectionBox, fuse_confidence, iou_matrix, nms
from .tensor import (DimensionError, LinearProjection, project, project_backward,
                     read_projection, write_projection)

PIXEL_MEAN = 40.0
PIXEL_STD = 40.0
N_OUT = 7  # objectness, dx, dy, log w, log h, 2 class logits
MIN_BOX, MAX_BOX = 4.0, 256.0


@dataclass
class DetectorConfig:
    stage: int = 5
    width: int = 32
    alpha: float = 0.5
    use_polar: bool = True
    padding: str = "zero"
    nms_iou: float = 0.45
    score_floor: float = 1e-3
    max_detections: int = 100
    # the head sees the backbone features alongside the polar output y
    head_skip: bool = True

    def stage_widths(self) -> list[int]:
        ws = [min(self.width, 8 * 2 ** i) for i in range(self.stage)]
        ws[-1] = self.width
        return ws


def space_to_depth(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"space_to_depth needs even sides, got {h}x{w}")
    return (x.reshape(c, h // 2, 2, w // 2, 2).transpose(2, 4, 0, 1, 3)
            .reshape(4 * c, h // 2, w // 2))


def depth_to_space(g: np.ndarray) -> np.ndarray:
    c4, h2, w2 = g.shape
    c = c4 // 4
    return g.reshape(2, 2, c, h2, w2).transpose(2, 3, 0, 4, 1).reshape(c, 2 * h2, 2 * w2)


def preprocess(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    p = np.asarray(pixels)
    if p.ndim == 2:
        p = p[None]
    elif p.ndim == 3 and p.shape[2] in (1, 3):
        p = p.transpose(2, 0, 1)
    return ((p.astype(dtype) - PIXEL_MEAN) / PIXEL_STD).astype(dtype)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class ForwardResult:
    head: np.ndarray                 # (7, H, W) raw head outputs
    pas: Optional[np.ndarray]        # (9, H, W) or None
    scale: int
    p_obj: np.ndarray                # (H, W)
    p_polar: Optional[np.ndarray]    # (H, W) pooled over each cell's decoded box
    boxes: np.ndarray                # (H, W, 4) cx, cy, w, h in input pixels
    class_id: np.ndarray             # (H, W)

    @property
    def grid(self) -> tuple[int, int]:
        return self.p_obj.shape

    def fused(self, alpha: float) -> np.ndarray:
        if self.p_polar is None:
            return self.p_obj
        return fuse_confidence(self.p_obj, self.p_polar, alpha)

    def candidates(self, alpha: float, score_floor: float = 0.0) -> list[DetectionBox]:
        """One box per cell (row-major), optionally dropping cells below ``score_floor``."""
        fused = self.fused(alpha)
        out = []
        h, w = self.grid
        for r in range(h):
            for c in range(w):
                po = float(self.p_obj[r, c])
                if po < score_floor:
                    continue
                cx, cy, bw, bh = (float(v) for v in self.boxes[r, c])
                pp = None if self.p_polar is None else float(self.p_polar[r, c])
                out.append(DetectionBox(cx, cy, bw, bh, p_obj=po, p_polar=pp,
                                        fused=float(fused[r, c]),
                                        class_id=int(self.class_id[r, c])))
        return out


def decode_boxes(head: np.ndarray, scale: int) -> np.ndarray:
    _, h, w = head.shape
    rr, cc = np.mgrid[:h, :w]
    cx = (cc + 0.5 + head[1]) * scale
    cy = (rr + 0.5 + head[2]) * scale
    lo, hi = math.log(MIN_BOX / scale), math.log(MAX_BOX / scale)
    bw = scale * np.exp(np.clip(head[3], lo, hi))
    bh = scale * np.exp(np.clip(head[4], lo, hi))
    return np.stack([cx, cy, bw, bh], axis=-1).astype(np.float64)


def box_cell_ranges(boxes: np.ndarray, scale: int, grid_h: int, grid_w: int):
    """Vectorised floor/ceil/clamp mapping of ``(..., 4)`` boxes onto inclusive cell ranges."""
    x1 = boxes[..., 0] - boxes[..., 2] / 2
    x2 = boxes[..., 0] + boxes[..., 2] / 2
    y1 = boxes[..., 1] - boxes[..., 3] / 2
    y2 = boxes[..., 1] + boxes[..., 3] / 2
    c0 = np.clip(np.floor(x1 / scale), 0, grid_w - 1).astype(int)
    r0 = np.clip(np.floor(y1 / scale), 0, grid_h - 1).astype(int)
    c1 = np.maximum(np.minimum(np.ceil(x2 / scale), grid_w), c0 + 1).astype(int) - 1
    r1 = np.maximum(np.minimum(np.ceil(y2 / scale), grid_h), r0 + 1).astype(int) - 1
    return r0, r1, c0, c1


def pool_polar_grid(pas: np.ndarray, boxes: np.ndarray, scale: int) -> np.ndarray:
    """Polar score for many boxes at once via summed-area tables."""
    _, gh, gw = pas.shape
    r0, r1, c0, c1 = box_cell_ranges(boxes, scale, gh, gw)
    polar = pas.sum(axis=0) - pas[4]
    sat = np.zeros((gh + 1, gw + 1))
    sat[1:, 1:] = polar.cumsum(0).cumsum(1)
    tot = sat[r1 + 1, c1 + 1] - sat[r0, c1 + 1] - sat[r1 + 1, c0] + sat[r0, c0]
    cells = (r1 - r0 + 1) * (c1 - c0 + 1)
    return tot / (8 * cells)


@dataclass
class Targets:
    positive: np.ndarray     # (H, W) bool
    offsets: np.ndarray      # (4, H, W)
    class_id: np.ndarray     # (H, W) int, -1 where negative
    gt_index: np.ndarray     # (H, W) int, -1 where negative


def assign_targets(annotations: Sequence[DetectionBox], grid_h: int, grid_w: int,
                   scale: int) -> Targets:
    """Centre-cell assignment; when several centres share a cell the nearest one wins."""
    pos = np.zeros((grid_h, grid_w), dtype=bool)
    off = np.zeros((4, grid_h, grid_w))
    cls = np.full((grid_h, grid_w), -1)
    idx = np.full((grid_h, grid_w), -1)
    best = np.full((grid_h, grid_w), np.inf)
    for k, a in enumerate(annotations):
        c = int(math.floor(a.cx / scale))
        r = int(math.floor(a.cy / scale))
        if not (0 <= r < grid_h and 0 <= c < grid_w):
            continue
        dx = a.cx / scale - (c + 0.5)
        dy = a.cy / scale - (r + 0.5)
        d = dx * dx + dy * dy
        if d >= best[r, c]:
            continue
        best[r, c] = d
        pos[r, c] = True
        off[:, r, c] = (dx, dy, math.log(a.w / scale), math.log(a.h / scale))
        cls[r, c] = a.class_id
        idx[r, c] = k
    return Targets(pos, off, cls, idx)


class DetectorModel:
    def __init__(self, config: Optional[DetectorConfig] = None, seed: int = 0,
                 dtype=np.float32, in_channels: int = 1):
        self.config = config or DetectorConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = self.config.stage_widths()
        self.backbone = []
        c = in_channels
        for w in widths:
            self.backbone.append(LinearProjection.init(4 * c, w, rng, dtype=dtype))
            c = w
        self.polar = (PolarParams.init(c, rng, dtype=dtype, padding=self.config.padding)
                      if self.config.use_polar else None)
        head_in = 2 * c if self.polar is not None and self.config.head_skip else c
        self.head = LinearProjection.init(head_in, N_OUT, rng, gain=0.1, dtype=dtype)
        # start with low objectness so the first epochs are not swamped by negatives
        self.head.bias[0] = -4.0
        self._cache = None

    def _head_input(self, y: np.ndarray) -> np.ndarray:
        # Unit-norm polar features share a large common component (the "1 +" term) and
        # entries of order 1/sqrt(C).  Centering across channels and rescaling is a fixed
        # linear map, so the head stays linear in y, but SGD is far better conditioned.
        # The map is symmetric, so the same function serves as its own adjoint.
        return (y - y.mean(axis=0, keepdims=True)) * np.sqrt(y.shape[0], dtype=y.dtype)

    @property
    def scale(self) -> int:
        return 2 ** self.config.stage

    def projections(self) -> list[LinearProjection]:
        ps = list(self.backbone)
        if self.polar is not None:
            ps += self.polar.projections()
        return ps + [self.head]

    def zero_grad(self):
        for p in self.projections():
            p.zero_grad()

    def astype(self, dtype) -> "DetectorModel":
        m = DetectorModel.__new__(DetectorModel)
        m.config = self.config
        m.dtype = np.dtype(dtype)
        m.backbone = [p.astype(dtype) for p in self.backbone]
        m.polar = None if self.polar is None else self.polar.astype(dtype)
        m.head = self.head.astype(dtype)
        m._cache = None
        return m

    def without_polar(self) -> "DetectorModel":
        """Same backbone and head with the polar layer removed (shares the backbone arrays).

        With ``head_skip`` the baseline head keeps only the weights that act on the
        backbone features.
        """
        m = DetectorModel.__new__(DetectorModel)
        m.config = replace(self.config, use_polar=False)
        m.dtype = self.dtype
        m.backbone = self.backbone
        m.polar = None
        m.head = self.head
        if self.polar is not None and self.config.head_skip:
            c = self.polar.channels
            m.head = LinearProjection(self.head.weight[:, c:].copy(), self.head.bias.copy())
        m._cache = None
        return m

    # -- forward / backward ------------------------------------------------

    def features(self, pixels):
        """Backbone output plus the per-stage cache; float (C, H, W) input is used as is."""
        x = np.asarray(pixels)
        x = x.astype(self.dtype) if x.dtype.kind == "f" and x.ndim == 3 else preprocess(x, self.dtype)
        _, h, w = x.shape
        if h % self.scale or w % self.scale:
            raise DimensionError(f"input {w}x{h} is not a multiple of {self.scale}")
        caches = []
        for p in self.backbone:
            s = space_to_depth(x)
            pre = project(p, s)
            x = np.maximum(pre, 0)
            caches.append((s, pre > 0))
        return x, caches

    def forward(self, pixels, fuse: bool = True, timer: Optional[dict] = None) -> ForwardResult:
        """Dense per-cell predictions; ``fuse=False`` skips polar pooling (p_polar is None).

        ``timer`` (if given) receives seconds spent in backbone, polar and head.
        """
        clock = time.perf_counter
        t0 = clock()
        feat, caches = self.features(pixels)
        t1 = clock()
        layer = None
        pas = None
        if self.polar is not None:
            layer = PolarLayer(self.polar)
            y, pas = layer.forward(feat)
            y = self._head_input(y)
            if self.config.head_skip:
                y = np.concatenate([y, feat])
        else:
            y = feat
        t2 = clock()
        head = project(self.head, y)
        self._cache = (caches, feat, layer, y)
        boxes = decode_boxes(head, self.scale)
        t3 = clock()
        p_polar = None
        if pas is not None and fuse:
            p_polar = pool_polar_grid(pas, boxes, self.scale)
        t4 = clock()
        if timer is not None:
            timer["backbone"] = timer.get("backbone", 0.0) + t1 - t0
            timer["polar"] = timer.get("polar", 0.0) + (t2 - t1) + (t4 - t3)
            timer["head"] = timer.get("head", 0.0) + t3 - t2
        return ForwardResult(head, pas, self.scale, _sigmoid(head[0].astype(np.float64)),
                             p_polar, boxes, np.argmax(head[5:7], axis=0))

    def backward(self, d_head: np.ndarray, d_pas: Optional[np.ndarray] = None) -> np.ndarray:
        """Accumulate gradients into every projection; returns the input gradient."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        caches, feat, layer, y = self._cache
        d = project_backward(self.head, y, d_head.astype(self.dtype))
        if layer is not None:
            c = feat.shape[0]
            d_skip = d[c:] if self.config.head_skip else None
            d = layer.backward(self._head_input(d[:c]), None if d_pas is None else d_pas.astype(self.dtype))
            if d_skip is not None:
                d = d + d_skip
        for p, (s, mask) in zip(reversed(self.backbone), reversed(caches)):
            d = depth_to_space(project_backward(p, s, d * mask))
        return d

    def detect(self, pixels, alpha: Optional[float] = None) -> list[DetectionBox]:
        """Fused, NMS-filtered detections for one tile."""
        alpha = self.config.alpha if alpha is None else alpha
        fwd = self.forward(pixels)
        return postprocess(fwd, alpha, self.config)

    # -- checkpoint --------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(b"TDK1")
            cfg = ";".join(f"{f.name}={getattr(self.config, f.name)}"
                           for f in fields(DetectorConfig)).encode()
            fh.write(len(cfg).to_bytes(4, "little"))
            fh.write(cfg)
            for p in self.backbone:
                write_projection(fh, p)
            if self.polar is not None:
                self.polar.save(fh)
            write_projection(fh, self.head)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "DetectorModel":
        with open(path, "rb") as fh:
            if fh.read(4) != b"TDK1":
                raise ValueError(f"{path} is not a detector checkpoint")
            n = int.from_bytes(fh.read(4), "little")
            kv = dict(item.split("=", 1) for item in fh.read(n).decode().split(";"))
            cfg = DetectorConfig()
            for f in fields(DetectorConfig):
                if f.name in kv:
                    raw = kv[f.name]
                    val = raw == "True" if f.type in (bool, "bool") else type(getattr(cfg, f.name))(raw)
                    setattr(cfg, f.name, val)
            m = cls.__new__(cls)
            m.config = cfg
            m.dtype = np.dtype(dtype)
            m.backbone = [read_projection(fh).astype(dtype) for _ in range(cfg.stage)]
            m.polar = (PolarParams.load(fh, padding=cfg.padding).astype(dtype)
                       if cfg.use_polar else None)
            m.head = read_projection(fh).astype(dtype)
            m._cache = None
        return m


def postprocess(fwd: ForwardResult, alpha: float, config: DetectorConfig) -> list[DetectionBox]:
    cands = fwd.candidates(alpha, config.score_floor)
    return nms(cands, config.nms_iou)[:config.max_detections]


def _clip_to_image(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    x1 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0, width - 1)
    y1 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0, height - 1)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, x1 + 1, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, y1 + 1, height)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=1)


def sample_negative_boxes(fwd: ForwardResult, targets: Targets,
                          annotations: Sequence[DetectionBox], n: int,
                          rng: np.random.Generator) -> list[DetectionBox]:
    """Background boxes for polar supervision: half the most confident non-object
    cells (hard negatives), half uniformly random cells, using the predicted boxes."""
    h, w = fwd.grid
    boxes = _clip_to_image(fwd.boxes.reshape(-1, 4), w * fwd.scale, h * fwd.scale)
    ok = ~targets.positive.reshape(-1)
    if annotations:
        cells = [DetectionBox(*b) for b in boxes]
        ok &= iou_matrix(cells, list(annotations)).max(axis=1) < 0.3
    idx = np.flatnonzero(ok)
    if n <= 0 or idx.size == 0:
        return []
    n = min(n, idx.size)
    n_hard = (n + 1) // 2
    score = fwd.p_obj.reshape(-1)[idx]
    hard = idx[np.argsort(-score, kind="stable")[:n_hard]]
    rest = np.setdiff1d(idx, hard)
    easy = rng.choice(rest, size=min(n - n_hard, rest.size), replace=False) if rest.size else []
    return [DetectionBox(*boxes[i]) for i in list(hard) + list(easy)]


@dataclass
class LossParts:
    obj: float = 0.0
    box: float = 0.0
    cls: float = 0.0
    polar: float = 0.0

    @property
    def total(self) -> float:
        return self.obj + self.box + self.cls + self.polar


def detection_loss(model: DetectorModel, fwd: ForwardResult, annotations: Sequence[DetectionBox],
                   negatives: Optional[Sequence[DetectionBox]] = None,
                   polar_weight: float = 1.0, backward: bool = True) -> LossParts:
    """Objectness BCE + L1 box + class CE on positives + polar loss; optionally backprop."""
    parts, g, d_pas = loss_terms(model, fwd, annotations, negatives, polar_weight)
    if backward:
        model.backward(g, d_pas)
    return parts


def loss_terms(model: DetectorModel, fwd: ForwardResult, annotations: Sequence[DetectionBox],
               negatives: Optional[Sequence[DetectionBox]] = None, polar_weight: float = 1.0):
    """Loss parts plus the gradients w.r.t. the head output and the PAS map."""
    gh, gw = fwd.grid
    t = assign_targets(annotations, gh, gw, fwd.scale)
    head = fwd.head.astype(np.float64)
    npos = max(1, int(t.positive.sum()))
    g = np.zeros_like(head)
    parts = LossParts()

    z = head[0]
    tgt = t.positive.astype(float)
    parts.obj = float((_softplus(z) - tgt * z).sum() / npos)
    g[0] = (_sigmoid(z) - tgt) / npos

    m = t.positive
    if m.any():
        diff = head[1:5][:, m] - t.offsets[:, m]
        parts.box = float(np.abs(diff).sum() / npos)
        g[1:5][:, m] = np.sign(diff) / npos
        logits = head[5:7][:, m]
        mx = logits.max(axis=0)
        lse = mx + np.log(np.exp(logits - mx).sum(axis=0))
        cls = t.class_id[m]
        parts.cls = float((lse - logits[cls, np.arange(cls.size)]).sum() / npos)
        prob = np.exp(logits - lse)
        prob[cls, np.arange(cls.size)] -= 1.0
        g[5:7][:, m] = prob / npos

    d_pas = None
    if model.polar is not None and fwd.pas is not None and polar_weight:
        negs = list(negatives or [])
        boxes = list(annotations) + negs
        labels = [1] * len(annotations) + [0] * len(negs)
        loss, d_pas = polarnet_batch_loss(fwd.pas.astype(np.float64), boxes, labels, fwd.scale)
        parts.polar = polar_weight * loss
        d_pas = polar_weight * d_pas
    return parts, g, d_pas
