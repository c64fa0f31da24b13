"""Detection metrics: greedy matching, all-point AP, top-N accuracy, alpha sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import DetectionBox, iou_matrix, nms, rank_key, refuse


class ConfigurationError(ValueError):
    pass


@dataclass
class MatchResult:
    preds: list                   # predictions in ranked order
    pred_tp: np.ndarray           # bool per ranked prediction
    pred_match: list              # matched annotation index or -1
    ann_matched: np.ndarray       # bool per annotation

    @property
    def tp(self) -> int:
        return int(self.pred_tp.sum())

    @property
    def fp(self) -> int:
        return int((~self.pred_tp).sum())

    @property
    def fn(self) -> int:
        return int((~self.ann_matched).sum())


def match(preds: Sequence[DetectionBox], annotations: Sequence[DetectionBox],
          iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending confidence order.

    Each prediction takes the unmatched annotation with the highest IoU, provided
    it reaches the threshold.
    """
    ranked = sorted(preds, key=rank_key)
    ious = iou_matrix(ranked, list(annotations))
    taken = np.zeros(len(annotations), dtype=bool)
    tp = np.zeros(len(ranked), dtype=bool)
    which = [-1] * len(ranked)
    for i in range(len(ranked)):
        if not len(annotations):
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            tp[i] = True
            which[i] = j
    return MatchResult(ranked, tp, which, taken)


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: Optional[float]
    n_annotations: int
    confidences: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def no_positives(self) -> bool:
        return self.ap is None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "confidence", "recall", "precision"])
            for k, (c, r, p) in enumerate(zip(self.confidences, self.recall, self.precision), 1):
                w.writerow([k, f"{c:.6f}", f"{r:.6f}", f"{p:.6f}"])


def curve_from_flags(confidences, tp_flags, n_annotations: int) -> PrCurve:
    conf = np.asarray(confidences, dtype=float)
    tp = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    ctp = np.cumsum(tp)
    k = np.arange(1, len(tp) + 1)
    precision = ctp / np.maximum(k, 1)
    if n_annotations == 0:
        return PrCurve(np.zeros(len(tp)), precision, None, 0, conf)
    recall = ctp / n_annotations
    if len(tp) == 0:
        return PrCurve(recall, precision, 0.0, n_annotations, conf)
    # precision envelope, right to left
    env = np.maximum.accumulate(precision[::-1])[::-1]
    dr = np.diff(np.concatenate([[0.0], recall]))
    return PrCurve(recall, precision, float(np.sum(dr * env)), n_annotations, conf)


def average_precision(images: Sequence[tuple], iou_threshold: float = 0.5,
                      class_id: Optional[int] = None) -> PrCurve:
    """All-point AP over ``(preds, annotations)`` pairs, one pair per image.

    With ``class_id`` both predictions and annotations are filtered to that class.
    """
    confs, flags = [], []
    n_ann = 0
    for preds, anns in images:
        if class_id is not None:
            preds = [p for p in preds if p.class_id == class_id]
            anns = [a for a in anns if a.class_id == class_id]
        m = match(preds, anns, iou_threshold)
        confs.extend(p.fused for p in m.preds)
        flags.extend(m.pred_tp.tolist())
        n_ann += len(anns)
    return curve_from_flags(confs, flags, n_ann)


def ap_table(images, thresholds=(0.5, 0.6, 0.7)) -> dict:
    out = {f"AP{int(round(t * 100))}": average_precision(images, t).ap for t in thresholds}
    out["AP50_AGC"] = average_precision(images, 0.5, class_id=0).ap
    out["AP50_nGEC"] = average_precision(images, 0.5, class_id=1).ap
    return out


def confusion_topn(truth_ranked: Sequence[bool], n: int) -> tuple[int, int, int, int]:
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    t = np.asarray(truth_ranked, dtype=bool)
    top, rest = t[:n], t[n:]
    return int(top.sum()), int((~top).sum()), int((~rest).sum()), int(rest.sum())


def balanced_accuracy(tp: int, fp: int, tn: int, fn: int) -> float:
    """``TP/(2(TP+FP)) + TN/(2(TN+FN))``; an empty term counts as 0.5 (neutral)."""
    a = tp / (tp + fp) if tp + fp else 1.0
    b = tn / (tn + fn) if tn + fn else 1.0
    return 0.5 * a + 0.5 * b


def topn_accuracy(truth_ranked: Sequence[bool], n: int) -> float:
    """Balanced accuracy when the first ``n`` ranked candidates are called positive."""
    return balanced_accuracy(*confusion_topn(truth_ranked, n))


def truth_flags(ranked: Sequence[DetectionBox], annotations, iou_threshold=0.5) -> list[bool]:
    """Whether each ranked candidate is a true positive under greedy matching."""
    m = match(ranked, annotations, iou_threshold)
    pos = {id(p): bool(t) for p, t in zip(m.preds, m.pred_tp)}
    return [pos[id(p)] for p in ranked]


def pooled_topn(images: Sequence[tuple], n: int = 20, iou_threshold: float = 0.5) -> float:
    """Top-N balanced accuracy after ranking every image's predictions together.

    Truth flags come from per-image matching, so a candidate can only claim an
    annotation of its own image.
    """
    scored = []
    for preds, anns in images:
        ranked = sorted(preds, key=rank_key)
        scored.extend(zip((rank_key(p) for p in ranked), truth_flags(ranked, anns, iou_threshold)))
    scored.sort(key=lambda t: t[0])
    return topn_accuracy([f for _, f in scored], n)


def sweep_alpha(images: Sequence[tuple], alphas=(0.0, 0.25, 0.5, 0.75, 1.0),
                iou_threshold: float = 0.5, nms_iou: Optional[float] = 0.45,
                top_n: int = 20) -> list[tuple]:
    """Re-fuse stored ``p_obj``/``p_polar`` per alpha; rows are ``(alpha, AP, top-N accuracy)``.

    ``images`` holds ``(candidates, annotations)``; when ``nms_iou`` is set the
    candidates are treated as pre-NMS and suppression is re-run per alpha.
    """
    for cands, _ in images:
        if any(c.p_polar is None for c in cands):
            raise ConfigurationError("alpha sweep needs p_polar on every prediction")
    rows = []
    for a in alphas:
        refused = []
        for cands, anns in images:
            preds = [refuse(c, a) for c in cands]
            if nms_iou is not None:
                preds = nms(preds, nms_iou)
            refused.append((preds, anns))
        curve = average_precision(refused, iou_threshold)
        rows.append((float(a), curve.ap, pooled_topn(refused, top_n, iou_threshold)))
    return rows


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])


def plot_lines(path, series: dict, xlabel: str, ylabel: str, title: str = ""):
    """Write an SVG line chart; ``series`` maps label -> (xs, ys)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o" if len(xs) < 30 else None, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
