"""Self-checks shared by the CLI and the test-suite: naive-oracle agreement and
finite-difference gradient agreement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import PolarLayer, PolarParams, compute_pas, polar_weighted_features, polarnet_batch_loss
from .boxes import DetectionBox
from .detector import DetectorConfig, DetectorModel, detection_loss, loss_terms, preprocess
from .oracles import finite_difference, naive_pas, naive_weighted_features, relative_error


@dataclass
class CheckReport:
    max_error: float
    errors: dict = field(default_factory=dict)
    seconds: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def oracle_check(n: int = 100, max_channels: int = 8, max_side: int = 8, seed: int = 0) -> CheckReport:
    """Compare the vectorised kernels against the nested-loop oracle on random float64 inputs."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_pas = worst_y = 0.0
    for k in range(n):
        c = int(rng.integers(1, max_channels + 1))
        h, w = (int(v) for v in rng.integers(1, max_side + 1, size=2))
        padding = "replicate" if k % 4 == 3 else "zero"
        params = PolarParams.init(c, rng, dtype=np.float64, padding=padding)
        x = rng.normal(size=(c, h, w))
        pas = compute_pas(params, x)
        y = polar_weighted_features(params, x, pas)
        ref_pas = naive_pas(params, x)
        worst_pas = max(worst_pas, float(np.abs(pas - ref_pas).max()))
        worst_y = max(worst_y, float(np.abs(y - naive_weighted_features(params, x, ref_pas)).max()))
    return CheckReport(max(worst_pas, worst_y), {"pas": worst_pas, "features": worst_y},
                       time.perf_counter() - t0)


def _polar_instance(rng, channels=3, side=4, padding="zero"):
    params = PolarParams.init(channels, rng, dtype=np.float64, padding=padding)
    # larger query/key weights than the default init so the softmax is far from uniform
    for p in (params.q_proj, params.k_proj):
        p.weight *= 3.0
    for p in params.projections():
        p.bias[...] = rng.normal(scale=0.3, size=p.bias.shape)
    x = rng.normal(size=(channels, side, side))
    probe = rng.normal(size=(channels, side, side))
    boxes = [DetectionBox(6.0, 6.0, 12.0, 8.0), DetectionBox(10.0, 4.0, 4.0, 4.0)]
    return params, x, probe, boxes, [1, 0]


def polar_loss_gradcheck(seed: int = 0, h: float = 1e-5, padding: str = "zero") -> CheckReport:
    """Gradient of ``sum(probe * y) + polar loss`` w.r.t. every parameter and the input.

    Uses a 3-channel 4x4 map with a grid scale of 4 pixels per cell.
    """
    rng = np.random.default_rng(seed)
    params, x, probe, boxes, labels = _polar_instance(rng, padding=padding)
    t0 = time.perf_counter()

    def loss():
        y, pas = PolarLayer(params).forward(x)
        return float((probe * y).sum()) + polarnet_batch_loss(pas, boxes, labels, 4)[0]

    layer = PolarLayer(params)
    for p in params.projections():
        p.zero_grad()
    _, pas = layer.forward(x)
    _, d_pas = polarnet_batch_loss(pas, boxes, labels, 4)
    dx = layer.backward(probe, d_pas)

    errors = {"input": relative_error(dx, finite_difference(loss, x, h))}
    for name, p in zip(("q", "k", "v"), params.projections()):
        errors[f"{name}.weight"] = relative_error(p.weight_grad, finite_difference(loss, p.weight, h))
        errors[f"{name}.bias"] = relative_error(p.bias_grad, finite_difference(loss, p.bias, h))
    return CheckReport(max(errors.values()), errors, time.perf_counter() - t0)


def detector_gradcheck(seed: int = 0, size: int = 64, h: float = 1e-5,
                       input_samples: int = 256, head_skip: bool = True) -> CheckReport:
    """Full toy-detector loss (all terms, polar included) on one ``size`` square input.

    Every parameter entry is checked; ``input_samples`` random input pixels are
    checked as well (all of them when the value is None).
    """
    rng = np.random.default_rng(seed)
    model = DetectorModel(DetectorConfig(stage=5, width=8, head_skip=head_skip), seed=seed, dtype=np.float64)
    for p in model.projections():
        p.bias[...] = rng.normal(scale=0.1, size=p.bias.shape)
    pixels = rng.integers(0, 255, size=(size, size)).astype(np.uint8)
    x = preprocess(pixels, np.float64)
    anns = [DetectionBox(20.0, 22.0, 30.0, 18.0, class_id=0),
            DetectionBox(44.0, 40.0, 24.0, 36.0, class_id=1)]
    negs = [DetectionBox(48.0, 12.0, 20.0, 16.0)]
    t0 = time.perf_counter()

    def loss():
        fwd = model.forward(x, fuse=False)
        return detection_loss(model, fwd, anns, negs, backward=False).total

    model.zero_grad()
    fwd = model.forward(x, fuse=False)
    _, g, d_pas = loss_terms(model, fwd, anns, negs)
    dx = model.backward(g, d_pas)

    errors = {}
    for k, p in enumerate(model.projections()):
        errors[f"p{k}.weight"] = relative_error(p.weight_grad, finite_difference(loss, p.weight, h))
        errors[f"p{k}.bias"] = relative_error(p.bias_grad, finite_difference(loss, p.bias, h))
    if input_samples is None:
        idx = list(np.ndindex(x.shape))
    else:
        flat = rng.choice(x.size, size=min(input_samples, x.size), replace=False)
        idx = [np.unravel_index(i, x.shape) for i in flat]
    num = np.array([finite_difference(loss, x, h, index=i)[i] for i in idx])
    ana = np.array([dx[i] for i in idx])
    errors["input"] = relative_error(ana, num)
    return CheckReport(max(errors.values()), errors, time.perf_counter() - t0)

