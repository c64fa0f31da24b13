"""Detection boxes, IoU, confidence fusion, NMS and image-to-grid mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

CLASS_NAMES = ("AGC", "nGEC")
BACKGROUND = -1

# Scanner resolution of the source slides.
MICRONS_PER_PIXEL = 0.2499


class DomainError(ValueError):
    """Raised when a box does not intersect the region it is mapped onto."""


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionBox:
    cx: float
    cy: float
    w: float
    h: float
    p_obj: float = 1.0
    p_polar: Optional[float] = None
    fused: Optional[float] = None
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w} h={self.h}")
        if self.fused is None:
            object.__setattr__(self, "fused", self.p_obj)

    @property
    def x1(self):
        return self.cx - self.w / 2

    @property
    def y1(self):
        return self.cy - self.h / 2

    @property
    def x2(self):
        return self.cx + self.w / 2

    @property
    def y2(self):
        return self.cy + self.h / 2

    @property
    def area(self):
        return self.w * self.h

    @property
    def confidence(self) -> float:
        return self.fused

    def shifted(self, dx: float, dy: float) -> "DetectionBox":
        return replace(self, cx=self.cx + dx, cy=self.cy + dy)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, **kw) -> "DetectionBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, **kw)


@dataclass(frozen=True)
class ScaleSpec:
    stage: int = 5
    microns_per_pixel: float = MICRONS_PER_PIXEL

    def __post_init__(self):
        if self.stage not in (2, 3, 4, 5):
            raise ParameterError(f"stage must be in 2..5, got {self.stage}")

    @property
    def factor(self) -> int:
        return 2 ** self.stage

    @property
    def cell_microns(self) -> float:
        return self.factor * self.microns_per_pixel


def iou(a: DetectionBox, b: DetectionBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner values as the intersection, so iou(a, a) == 1 exactly
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    return inter / (area_a + area_b - inter)


def iou_matrix(a: Sequence[DetectionBox], b: Sequence[DetectionBox]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([[r.x1, r.y1, r.x2, r.y2] for r in a])
    B = np.array([[r.x1, r.y1, r.x2, r.y2] for r in b])
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def fuse_confidence(p_obj, p_polar, alpha: float = 0.5):
    """Convex blend of objectness and polar salience; works on scalars or arrays."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * p_obj + alpha * p_polar


def refuse(box: DetectionBox, alpha: float) -> DetectionBox:
    if box.p_polar is None:
        return replace(box, fused=box.p_obj)
    return replace(box, fused=fuse_confidence(box.p_obj, box.p_polar, alpha))


def rank_key(box: DetectionBox):
    # descending confidence, then smaller cy, then smaller cx
    return (-box.fused, box.cy, box.cx)


def nms(boxes: Iterable[DetectionBox], iou_threshold: float = 0.45,
        per_class: bool = True) -> list[DetectionBox]:
    """Greedy non-maximum suppression with a deterministic tie-break."""
    order = sorted(boxes, key=rank_key)
    if not order:
        return []
    # one IoU row per kept box, so memory stays linear in the candidate count
    xy = np.array([[b.x1, b.y1, b.x2, b.y2] for b in order])
    area = (xy[:, 2] - xy[:, 0]) * (xy[:, 3] - xy[:, 1])
    classes = np.array([b.class_id for b in order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        iw = np.minimum(xy[i, 2], xy[:, 2]) - np.maximum(xy[i, 0], xy[:, 0])
        ih = np.minimum(xy[i, 3], xy[:, 3]) - np.maximum(xy[i, 1], xy[:, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        kill = inter / (area[i] + area - inter) > iou_threshold
        if per_class:
            kill &= classes == classes[i]
        alive &= ~kill
    return keep


def box_to_grid(box: DetectionBox, scale, grid_h: int, grid_w: int) -> tuple[int, int, int, int]:
    """Map an image-space box to the inclusive cell range ``(r0, r1, c0, c1)``.

    The start edge is floored and the end edge ceiled onto the grid; the range
    is clamped to the grid and always covers at least one cell.
    """
    s = scale.factor if isinstance(scale, ScaleSpec) else int(scale)
    if box.x2 <= 0 or box.y2 <= 0 or box.x1 >= grid_w * s or box.y1 >= grid_h * s:
        raise DomainError(f"box {box} lies outside the {grid_w * s}x{grid_h * s} image")
    c0 = min(max(math.floor(box.x1 / s), 0), grid_w - 1)
    r0 = min(max(math.floor(box.y1 / s), 0), grid_h - 1)
    c1 = max(min(math.ceil(box.x2 / s), grid_w), c0 + 1)
    r1 = max(min(math.ceil(box.y2 / s), grid_h), r0 + 1)
    return r0, r1 - 1, c0, c1 - 1


# Detection dump: slide,tile_x,tile_y,cx,cy,w,h,class,p_obj,p_polar,fused

def format_detection(slide_id: str, tile_x: int, tile_y: int, box: DetectionBox) -> str:
    cls = CLASS_NAMES[box.class_id] if 0 <= box.class_id < len(CLASS_NAMES) else "background"
    pp = "" if box.p_polar is None else f"{box.p_polar:.6f}"
    return (f"{slide_id},{tile_x},{tile_y},{box.cx:.6f},{box.cy:.6f},{box.w:.6f},{box.h:.6f},"
            f"{cls},{box.p_obj:.6f},{pp},{box.fused:.6f}")


def parse_detection(line: str) -> tuple[str, int, int, DetectionBox]:
    f = line.strip().split(",")
    if len(f) != 11:
        raise ValueError(f"expected 11 fields in detection record, got {len(f)}")
    cls = CLASS_NAMES.index(f[7]) if f[7] in CLASS_NAMES else BACKGROUND
    box = DetectionBox(float(f[3]), float(f[4]), float(f[5]), float(f[6]),
                       p_obj=float(f[8]), p_polar=float(f[9]) if f[9] else None,
                       fused=float(f[10]), class_id=cls)
    return f[0], int(f[1]), int(f[2]), box


def write_detections(path, records):
    """``records`` yields ``(slide_id, tile_x, tile_y, box)``."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(format_detection(*rec) + "\n")


def read_detections(path):
    with open(path) as fh:
        return [parse_detection(line) for line in fh if line.strip()]
