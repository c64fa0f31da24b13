"""Eight-neighbour polar self-attention.

For every feature cell the query vector is dotted with the key vectors of the
cell itself and its eight neighbours; a softmax over those nine logits gives the
polar attention score (PAS) map of shape ``(9, H, W)``.  The same scores weight
``1 + V`` over the neighbourhood to build the output features, which are then
L2-normalised across channels.  Box-pooled means of the PAS channels give the
polar / non-polar scores used for confidence fusion and supervision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import DetectionBox, box_to_grid
from .tensor import (DimensionError, LinearProjection, as_feature_map, load_feature_map,
                     project, project_backward, read_projection, save_feature_map, softmax,
                     softmax_backward, write_projection)

# (di, dj) offsets in the fixed neighbour order; index 4 is the cell itself.
NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1))
CENTER = 4
POLAR_CHANNELS = tuple(n for n in range(9) if n != CENTER)

PADDING_MODES = ("zero", "replicate")
PAS_MAGIC = b"PAS1"


class StateError(RuntimeError):
    pass


@dataclass
class PolarParams:
    q_proj: LinearProjection
    k_proj: LinearProjection
    v_proj: LinearProjection
    norm_epsilon: float = 1e-6
    padding: str = "zero"

    def __post_init__(self):
        c = self.q_proj.in_channels
        for p in (self.q_proj, self.k_proj, self.v_proj):
            if p.in_channels != c or p.out_channels != c:
                raise DimensionError("all polar projections must map C -> C")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}")

    @property
    def channels(self) -> int:
        return self.q_proj.in_channels

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float64,
             value_gain: float = 4.0, **kw) -> "PolarParams":
        # Small query/key gain keeps the initial attention close to uniform; a larger
        # value gain keeps V from being drowned by the constant 1 in (1 + V).
        return cls(LinearProjection.init(channels, channels, rng, gain=0.3, dtype=dtype),
                   LinearProjection.init(channels, channels, rng, gain=0.3, dtype=dtype),
                   LinearProjection.init(channels, channels, rng, gain=value_gain, dtype=dtype),
                   **kw)

    def projections(self):
        return [self.q_proj, self.k_proj, self.v_proj]

    def zero_grad(self):
        for p in self.projections():
            p.zero_grad()

    def astype(self, dtype) -> "PolarParams":
        return PolarParams(*(p.astype(dtype) for p in self.projections()),
                           norm_epsilon=self.norm_epsilon, padding=self.padding)

    def save(self, fh):
        fh.write(b"PPK1")
        for p in self.projections():
            write_projection(fh, p)

    @classmethod
    def load(cls, fh, **kw) -> "PolarParams":
        if fh.read(4) != b"PPK1":
            raise ValueError("not a polar parameter checkpoint")
        return cls(*(read_projection(fh) for _ in range(3)), **kw)


@dataclass(frozen=True)
class PolarScores:
    p_polar: float
    p_non_polar: float


def _pad(a: np.ndarray, mode: str) -> np.ndarray:
    if mode == "zero":
        return np.pad(a, ((0, 0), (1, 1), (1, 1)))
    return np.pad(a, ((0, 0), (1, 1), (1, 1)), mode="edge")


def _shifted(a: np.ndarray, mode: str) -> np.ndarray:
    """Stack of neighbour views, shape ``(9, C, H, W)``: out[n, :, i, j] = a[:, nei_n(i, j)]."""
    _, h, w = a.shape
    p = _pad(a, mode)
    return np.stack([p[:, 1 + di:1 + di + h, 1 + dj:1 + dj + w] for di, dj in NEIGHBORS])


def _unshift(g: np.ndarray, mode: str) -> np.ndarray:
    """Adjoint of ``_shifted``: scatter ``(9, C, H, W)`` gradients back onto ``(C, H, W)``."""
    _, c, h, w = g.shape
    p = np.zeros((c, h + 2, w + 2), dtype=g.dtype)
    for n, (di, dj) in enumerate(NEIGHBORS):
        p[:, 1 + di:1 + di + h, 1 + dj:1 + dj + w] += g[n]
    if mode == "replicate":
        p[:, 1, :] += p[:, 0, :]
        p[:, -2, :] += p[:, -1, :]
        p[:, :, 1] += p[:, :, 0]
        p[:, :, -2] += p[:, :, -1]
    return p[:, 1:-1, 1:-1]


def _check(params: PolarParams, x) -> np.ndarray:
    x = as_feature_map(x)
    if x.shape[0] != params.channels:
        raise DimensionError(f"polar params expect {params.channels} channels, got {x.shape[0]}")
    return x


def compute_pas(params: PolarParams, x) -> np.ndarray:
    x = _check(params, x)
    q = project(params.q_proj, x)
    k = _shifted(project(params.k_proj, x), params.padding)
    return softmax(np.einsum("chw,nchw->nhw", q, k), axis=0)


def _weighted(params: PolarParams, v_shift: np.ndarray, pas: np.ndarray):
    z = pas.sum(axis=0)[None] + np.einsum("nhw,nchw->chw", pas, v_shift)
    r = np.sqrt((z * z).sum(axis=0) + params.norm_epsilon)
    return z, r


def polar_weighted_features(params: PolarParams, x, pas: np.ndarray) -> np.ndarray:
    x = _check(params, x)
    if pas.shape != (9,) + x.shape[1:]:
        raise DimensionError(f"PAS shape {pas.shape} does not match features {x.shape}")
    v = _shifted(project(params.v_proj, x), params.padding)
    z, r = _weighted(params, v, pas)
    return z / r


def save_pas(path, pas: np.ndarray):
    save_feature_map(path, pas, magic=PAS_MAGIC)


def load_pas(path) -> np.ndarray:
    pas = load_feature_map(path, magic=PAS_MAGIC)
    if pas.shape[0] != 9:
        raise DimensionError(f"PAS dump has {pas.shape[0]} channels, expected 9")
    return pas


class PolarLayer:
    """Forward/backward wrapper that retains the intermediates needed for gradients."""

    def __init__(self, params: PolarParams):
        self.params = params
        self._cache = None

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        x = _check(p, x)
        q = project(p.q_proj, x)
        k = _shifted(project(p.k_proj, x), p.padding)
        v = _shifted(project(p.v_proj, x), p.padding)
        pas = softmax(np.einsum("chw,nchw->nhw", q, k), axis=0)
        z, r = _weighted(p, v, pas)
        y = z / r
        self._cache = (x, q, k, v, pas, z, r)
        return y, pas

    def backward(self, grad_y=None, grad_pas=None) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. the input map."""
        if self._cache is None:
            raise StateError("backward called before forward")
        p = self.params
        x, q, k, v, pas, z, r = self._cache
        d_pas = np.zeros_like(pas) if grad_pas is None else np.array(grad_pas, dtype=pas.dtype)
        d_v = np.zeros_like(v)
        if grad_y is not None:
            dz = grad_y / r - z * ((grad_y * z).sum(axis=0) / r ** 3)
            d_pas += dz.sum(axis=0)[None] + np.einsum("chw,nchw->nhw", dz, v)
            d_v = pas[:, None] * dz[None]
        d_logit = softmax_backward(pas, d_pas, axis=0)
        d_q = np.einsum("nhw,nchw->chw", d_logit, k)
        d_k = d_logit[:, None] * q[None]
        dx = project_backward(p.q_proj, x, d_q)
        dx += project_backward(p.k_proj, x, _unshift(d_k, p.padding))
        dx += project_backward(p.v_proj, x, _unshift(d_v, p.padding))
        return dx


def pool_polar_scores(pas: np.ndarray, box: DetectionBox, scale) -> PolarScores:
    """Box-pooled means of the eight neighbour channels and of the centre channel."""
    r0, r1, c0, c1 = box_to_grid(box, scale, pas.shape[1], pas.shape[2])
    block = pas[:, r0:r1 + 1, c0:c1 + 1]
    cells = block.shape[1] * block.shape[2]
    polar = (block.sum() - block[CENTER].sum()) / (8 * cells)
    return PolarScores(float(polar), float(block[CENTER].sum() / cells))


def pool_polar_scores_backward(pas_shape, box: DetectionBox, scale,
                               g_polar: float, g_non_polar: float) -> np.ndarray:
    d = np.zeros(pas_shape)
    r0, r1, c0, c1 = box_to_grid(box, scale, pas_shape[1], pas_shape[2])
    cells = (r1 - r0 + 1) * (c1 - c0 + 1)
    d[:, r0:r1 + 1, c0:c1 + 1] = g_polar / (8 * cells)
    d[CENTER, r0:r1 + 1, c0:c1 + 1] = g_non_polar / cells
    return d


def polarnet_loss(scores: PolarScores, target: int) -> tuple[float, float, float]:
    """Binary cross entropy over softmax([p_non_polar, p_polar]).

    Returns ``(loss, dloss/dp_polar, dloss/dp_non_polar)``; ``target`` 1 means polar.
    """
    logits = np.array([scores.p_non_polar, scores.p_polar])
    prob = softmax(logits)
    m = logits.max()
    loss = float(m + np.log(np.exp(logits - m).sum()) - logits[int(target)])
    grad = prob - np.eye(2)[int(target)]
    return loss, float(grad[1]), float(grad[0])


def polarnet_batch_loss(pas: np.ndarray, boxes: Sequence[DetectionBox],
                        targets: Sequence[int], scale) -> tuple[float, np.ndarray]:
    """Mean loss over boxes of one image together with its gradient w.r.t. the PAS map."""
    d_pas = np.zeros(pas.shape)
    if not boxes:
        return 0.0, d_pas
    total = 0.0
    n = len(boxes)
    for box, t in zip(boxes, targets):
        loss, gp, gn = polarnet_loss(pool_polar_scores(pas, box, scale), t)
        total += loss
        d_pas += pool_polar_scores_backward(pas.shape, box, scale, gp / n, gn / n)
    return total / n, d_pas
