"""End-to-end acceptance checks; each test records one PASS/FAIL summary line.

The trained-model criteria share one dataset and one trained stage-5 model.
"""

import time

import numpy as np
import pytest

from polarnet.attention import PolarParams, compute_pas, pool_polar_scores
from polarnet.boxes import DetectionBox, iou_matrix, rank_key
from polarnet.checks import detector_gradcheck, oracle_check, polar_loss_gradcheck
from polarnet.detector import DetectorConfig, DetectorModel
from polarnet.metrics import ap_table, average_precision, match, sweep_alpha, topn_accuracy
from polarnet.oracles import brute_force_ap, brute_force_assignment
from polarnet.synth import DEFAULT_COUNTS, build_dataset
from polarnet.train import TrainConfig, load_split, predict_split, train
from polarnet.wsi import make_mosaic, polar_overhead, recovered, run_slide

pytestmark = pytest.mark.slow

ALPHAS = [round(0.1 * k, 1) for k in range(11)]
RECIPE = dict(lr=5e-3, milestones=(12, 17), max_epochs=20, batch_size=2)
TIME_BUDGET_S = 30 * 60


# -- criteria that need no training -------------------------------------------

def test_oracle_equivalence(criterion):
    r = oracle_check(n=100, max_channels=8, max_side=8, seed=0)
    ok = r.max_error < 1e-10 and r.seconds < 10
    criterion("1", "oracle equivalence", ok, f"max diff {r.max_error:.2e} in {r.seconds:.2f} s")
    assert ok


def test_gradient_correctness(criterion):
    polar = max(polar_loss_gradcheck(seed=s, padding=pad).max_error
                for s in range(5) for pad in ("zero", "replicate"))
    full = detector_gradcheck(seed=0, input_samples=256).max_error
    ok = polar < 1e-6 and full < 1e-5
    criterion("2", "gradient correctness", ok, f"polar loss {polar:.2e}, toy detector {full:.2e}")
    assert ok


def test_normalisation_invariants(criterion):
    rng = np.random.default_rng(7)
    worst_sum = worst_pool = 0.0
    for k in range(50):
        c = int(rng.integers(1, 9))
        h, w = (int(v) for v in rng.integers(2, 12, 2))
        params = PolarParams.init(c, rng, padding="replicate" if k % 2 else "zero")
        for p in (params.q_proj, params.k_proj):
            p.weight *= rng.uniform(1, 10)
        pas = compute_pas(params, rng.normal(size=(c, h, w)))
        worst_sum = max(worst_sum, float(np.abs(pas.sum(axis=0) - 1).max()))
        scale = 32
        r0, c0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        r1, c1 = int(rng.integers(r0, h)), int(rng.integers(c0, w))
        box = DetectionBox.from_corners(c0 * scale, r0 * scale, (c1 + 1) * scale, (r1 + 1) * scale)
        s = pool_polar_scores(pas, box, scale)
        worst_pool = max(worst_pool, abs(8 * s.p_polar + s.p_non_polar - 1))
    ok = worst_sum < 1e-10 and worst_pool < 1e-8
    criterion("3", "normalisation invariants", ok,
              f"PAS sum err {worst_sum:.1e}, 8*Ppolar+Pnon err {worst_pool:.1e}")
    assert ok


def test_fusion_degeneracy(criterion):
    tile = np.random.default_rng(3).integers(0, 255, (1024, 1024)).astype(np.uint8)
    model = DetectorModel(DetectorConfig(), seed=5)

    def order(boxes, key):
        return np.argsort([-key(b) for b in boxes], kind="stable")

    a0 = model.forward(tile).candidates(0.0)
    plain = model.forward(tile, fuse=False).candidates(0.0)
    a1 = model.forward(tile).candidates(1.0)
    ok0 = np.array_equal(order(a0, lambda b: b.fused), order(plain, lambda b: b.fused))
    ok1 = np.array_equal(order(a1, lambda b: b.fused), order(a1, lambda b: b.p_polar))
    criterion("4", "fusion degeneracy", ok0 and ok1,
              f"alpha=0 argsort equal: {ok0}, alpha=1 follows p_polar: {ok1}")
    assert ok0 and ok1


def _random_instance(rng):
    anns = [DetectionBox(*rng.uniform(20, 80, 2), *rng.uniform(8, 30, 2))
            for _ in range(int(rng.integers(0, 11)))]
    preds = []
    for _ in range(int(rng.integers(0, 11))):
        if anns and rng.uniform() < 0.7:
            a = anns[int(rng.integers(len(anns)))]
            preds.append(DetectionBox(a.cx + rng.normal(0, 3), a.cy + rng.normal(0, 3),
                                      a.w * rng.uniform(0.7, 1.3), a.h * rng.uniform(0.7, 1.3),
                                      p_obj=float(rng.uniform())))
        else:
            preds.append(DetectionBox(*rng.uniform(0, 100, 2), *rng.uniform(5, 30, 2),
                                      p_obj=float(rng.uniform())))
    return preds, anns


def test_metric_oracles(criterion):
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        preds, anns = _random_instance(rng)
        ranked = sorted(preds, key=rank_key)
        for thr in (0.5, 0.6, 0.7):
            assign = brute_force_assignment(iou_matrix(ranked, anns), thr)
            expected = brute_force_ap([a >= 0 for a in assign], len(anns))
            got = average_precision([(preds, anns)], thr).ap
            same_ap = (got is None) if expected is None else abs(got - float(expected)) < 1e-12
            mismatches += (match(preds, anns, thr).pred_match != assign) or not same_ap
    flags = [True] * 3 + [False] * 2 + [False] * 10 + [True] * 5
    topn = topn_accuracy(flags, 5)
    ok = mismatches == 0 and abs(topn - 0.6333333333333333) < 1e-12
    criterion("5", "metric oracles", ok, f"{mismatches} mismatches in 150 cases, top-5 {topn:.4f}")
    assert ok


def test_wsi_overhead(criterion):
    ov = polar_overhead(width=32, grid=32, repeats=20, seed=0)
    ok = ov["ratio"] <= 0.5
    criterion("8b", "polar per-tile overhead <= 50%", ok,
              f"baseline {ov['baseline_ms']:.1f} ms, polar {ov['polar_ms']:.1f} ms "
              f"({100 * ov['ratio']:.1f}%)")
    assert ok


# -- trained-model criteria ---------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    manifest = build_dataset(root / "data", DEFAULT_COUNTS, seed=0)
    return manifest, time.perf_counter() - t0


def _train(manifest, stage):
    model = DetectorModel(DetectorConfig(stage=stage), seed=0)
    t0 = time.perf_counter()
    train(model, manifest, TrainConfig(**RECIPE))
    return model, time.perf_counter() - t0


@pytest.fixture(scope="module")
def stage5(dataset):
    return _train(dataset[0], 5)


@pytest.fixture(scope="module")
def test_samples(dataset):
    return load_split(dataset[0], "test", ["gc", "fp"])


def test_synthetic_fp_rejection(criterion, stage5, test_samples):
    model, train_s = stage5
    t0 = time.perf_counter()
    images = predict_split(model, test_samples, pre_nms=True)
    rows = {a: (ap, acc) for a, ap, acc in sweep_alpha(images, ALPHAS, 0.5, model.config.nms_iou, 20)}
    total = train_s + time.perf_counter() - t0
    (ap0, acc0), (ap5, acc5) = rows[0.0], rows[0.5]
    best_low = max(rows[a][0] for a in ALPHAS if a < 0.5)
    best_high = max(rows[a][0] for a in ALPHAS if a >= 0.5)
    peak = max(ALPHAS, key=lambda a: (rows[a][0], a))
    checks = {"AP50": ap5 >= ap0, "top-20": acc5 >= acc0, "peak>=0.5": best_high >= best_low,
              "time": total < TIME_BUDGET_S}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion("6", "synthetic FP rejection", ok,
              f"AP50 a=0 {ap0:.4f} vs a=0.5 {ap5:.4f}; top-20 {acc0:.4f} vs {acc5:.4f}; "
              f"AP peak at a={peak}; train+eval {total / 60:.1f} min"
              + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, rows


def test_feature_scale_direction(criterion, dataset, stage5, test_samples):
    model5, _ = stage5
    model3, _ = _train(dataset[0], 3)
    ap5 = ap_table(predict_split(model5, test_samples))["AP50"]
    ap3 = ap_table(predict_split(model3, test_samples))["AP50"]
    ok = ap5 >= ap3
    criterion("7", "feature-scale direction", ok, f"stage-5 AP50 {ap5:.4f} vs stage-3 {ap3:.4f}")
    assert ok


@pytest.fixture(scope="module")
def mosaics(tmp_path_factory):
    root = tmp_path_factory.mktemp("mosaics")
    return [make_mosaic(root / f"slide_{k:02d}", 8192, 8192, 10, seed=k) for k in range(10)]


def test_wsi_determinism(criterion, stage5, mosaics):
    model, _ = stage5
    one = run_slide(model, mosaics[0], n=20, workers=1, overlap=128)
    eight = run_slide(model, mosaics[0], n=20, workers=8, overlap=128)
    a = "\n".join(one.dump_lines()).encode()
    b = "\n".join(eight.dump_lines()).encode()
    ok = a == b and one.top_json() == eight.top_json()
    criterion("8a", "WSI 1 vs 8 workers byte-identical", ok,
              f"{one.n_tiles} tiles, {len(one.detections)} detections, "
              f"{one.timings['wall_ms'] / 1e3:.1f} s vs {eight.timings['wall_ms'] / 1e3:.1f} s")
    assert ok


def test_planted_object_recovery(criterion, stage5, mosaics):
    model, _ = stage5
    found = []
    for slide in mosaics:
        res = run_slide(model, slide, n=20, workers=1, overlap=128)
        truth = slide.ground_truth()
        found.append(recovered(res, truth) / len(truth))
    ok = min(found) >= 0.8
    criterion("9", "planted-object recovery", ok,
              "per-slide recall in top-20: " + " ".join(f"{f:.0%}" for f in found))
    assert ok
