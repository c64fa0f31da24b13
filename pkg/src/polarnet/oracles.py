"""Naive reference implementations used to cross-check the vectorised paths.

Everything here loops explicitly over positions, neighbours and channels and
shares no code with the production kernels beyond the parameter containers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .attention import NEIGHBORS, PolarParams

CENTER_INDEX = 4


def naive_project(weight, bias, x):
    c_in, h, w = x.shape
    out = np.zeros((weight.shape[0], h, w))
    for i in range(h):
        for j in range(w):
            for c in range(weight.shape[0]):
                acc = 0.0
                for k in range(c_in):
                    acc += weight[c, k] * x[k, i, j]
                out[c, i, j] = acc + bias[c]
    return out


def _neighbor(a, i, j, di, dj, padding):
    _, h, w = a.shape
    ii, jj = i + di, j + dj
    if 0 <= ii < h and 0 <= jj < w:
        return a[:, ii, jj]
    if padding == "replicate":
        return a[:, min(max(ii, 0), h - 1), min(max(jj, 0), w - 1)]
    return np.zeros(a.shape[0])


def naive_pas(params: PolarParams, x):
    q = naive_project(params.q_proj.weight, params.q_proj.bias, x)
    k = naive_project(params.k_proj.weight, params.k_proj.bias, x)
    _, h, w = x.shape
    pas = np.zeros((9, h, w))
    for i in range(h):
        for j in range(w):
            logits = [sum(q[c, i, j] * kv[c] for c in range(len(kv)))
                      for kv in (_neighbor(k, i, j, di, dj, params.padding) for di, dj in NEIGHBORS)]
            m = max(logits)
            ex = [math.exp(v - m) for v in logits]
            s = sum(ex)
            for n in range(9):
                pas[n, i, j] = ex[n] / s
    return pas


def naive_weighted_features(params: PolarParams, x, pas):
    v = naive_project(params.v_proj.weight, params.v_proj.bias, x)
    c_n, h, w = x.shape
    y = np.zeros((c_n, h, w))
    for i in range(h):
        for j in range(w):
            z = np.zeros(c_n)
            for n, (di, dj) in enumerate(NEIGHBORS):
                vn = _neighbor(v, i, j, di, dj, params.padding)
                for c in range(c_n):
                    z[c] += pas[n, i, j] * (1.0 + vn[c])
            norm = math.sqrt(sum(t * t for t in z) + params.norm_epsilon)
            y[:, i, j] = z / norm
    return y


def naive_pool(pas, r0, r1, c0, c1):
    """Direct summation over an inclusive cell range."""
    polar = 0.0
    center = 0.0
    cells = 0
    for i in range(r0, r1 + 1):
        for j in range(c0, c1 + 1):
            cells += 1
            for n in range(9):
                if n == CENTER_INDEX:
                    center += pas[n, i, j]
                else:
                    polar += pas[n, i, j]
    return polar / (8 * cells), center / cells


def finite_difference(f, arr: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros(arr.shape)
    it = [index] if index is not None else itertools.product(*map(range, arr.shape))
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """Norm-wise relative error ``max|a - n| / max(max|a|, max|n|, floor)`` of one tensor.

    Central differences carry roundoff of order ``eps * |loss| / h`` (about 1e-11
    here), so entries far below the tensor's own scale cannot be judged one by one.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if not a.size:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def brute_force_assignment(ious: np.ndarray, threshold: float) -> list[int]:
    """Enumerate every one-to-one partial assignment and keep the lexicographically best.

    Predictions are taken in row order; an assignment is ranked by the tuple of
    per-prediction IoUs (-1 when unmatched), so earlier predictions win first.
    """
    n_pred, n_ann = ious.shape
    best_key = None
    best = None

    def rec(k, used, chosen):
        nonlocal best_key, best
        if k == n_pred:
            key = tuple(ious[p, a] if a >= 0 else -1.0 for p, a in enumerate(chosen))
            if best_key is None or key > best_key:
                best_key, best = key, list(chosen)
            return
        rec(k + 1, used, chosen + [-1])
        for a in range(n_ann):
            if a not in used and ious[k, a] >= threshold:
                rec(k + 1, used | {a}, chosen + [a])

    rec(0, frozenset(), [])
    return best


def brute_force_ap(matched_sorted: list[bool], n_annotations: int):
    """All-point interpolated AP as an exact fraction from a confidence-sorted TP/FP list."""
    from fractions import Fraction

    if n_annotations == 0:
        return None
    points = []
    tp = 0
    for k, hit in enumerate(matched_sorted, start=1):
        tp += hit
        points.append((Fraction(tp, n_annotations), Fraction(tp, k)))
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for recall, _ in points:
        if recall > prev_recall:
            ap += (recall - prev_recall) * max(p for r, p in points if r >= recall)
            prev_recall = recall
    return ap
