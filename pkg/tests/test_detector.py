import numpy as np
import pytest

from polarnet.boxes import DetectionBox
from polarnet.checks import detector_gradcheck
from polarnet.detector import (DetectorConfig, DetectorModel, assign_targets, box_cell_ranges,
                               decode_boxes, depth_to_space, detection_loss, pool_polar_grid,
                               postprocess, sample_negative_boxes, space_to_depth)
from polarnet.attention import pool_polar_scores
from polarnet.tensor import DimensionError
from polarnet.train import SGD, ConfigurationError, TrainConfig, train


@pytest.fixture(scope="module")
def tile():
    rng = np.random.default_rng(0)
    return rng.integers(0, 255, (1024, 1024)).astype(np.uint8)


@pytest.fixture(scope="module")
def model():
    return DetectorModel(DetectorConfig(), seed=3)


def test_stage_five_grid_and_candidate_count(model, tile):
    fwd = model.forward(tile)
    assert fwd.grid == (32, 32)
    assert fwd.pas.shape == (9, 32, 32)
    assert len(fwd.candidates(0.5)) == 1024


def test_stage_widths():
    assert DetectorConfig().stage_widths() == [8, 16, 32, 32, 32]
    assert DetectorConfig(stage=3, width=32).stage_widths() == [8, 16, 32]
    assert DetectorConfig(stage=2, width=8).stage_widths() == [8, 8]


@pytest.mark.parametrize("shape", [(100, 128), (1024, 1000)])
def test_non_multiple_input_is_dimension_error(model, shape):
    with pytest.raises(DimensionError):
        model.forward(np.zeros(shape, np.uint8))


def test_other_multiples_are_accepted(model):
    assert model.forward(np.zeros((64, 96), np.uint8)).grid == (2, 3)


def test_polar_disabled_has_no_polar_score(tile):
    m = DetectorModel(DetectorConfig(use_polar=False), seed=3)
    fwd = m.forward(tile)
    assert fwd.pas is None and fwd.p_polar is None
    for b in fwd.candidates(0.5)[:50]:
        assert b.p_polar is None and b.fused == b.p_obj


def test_forward_is_bitwise_reproducible(model, tile):
    a = model.forward(tile)
    b = DetectorModel(DetectorConfig(), seed=3).forward(tile)
    assert a.head.tobytes() == b.head.tobytes()
    assert a.p_polar.tobytes() == b.p_polar.tobytes()


def _argsort(boxes, key):
    return np.argsort([-key(b) for b in boxes], kind="stable")


def test_alpha_zero_ranking_equals_unfused_ranking(model, tile):
    fused = model.forward(tile, fuse=True).candidates(0.0)
    plain = model.forward(tile, fuse=False).candidates(0.0)
    assert all(p.p_polar is None for p in plain)
    np.testing.assert_array_equal(_argsort(fused, lambda b: b.fused),
                                  _argsort(plain, lambda b: b.fused))


def test_alpha_one_ranking_follows_polar_score(model, tile):
    cands = model.forward(tile).candidates(1.0)
    np.testing.assert_array_equal(_argsort(cands, lambda b: b.fused),
                                  _argsort(cands, lambda b: b.p_polar))


def test_grid_pooling_matches_per_box_pooling(model, tile):
    fwd = model.forward(tile)
    boxes = fwd.boxes.reshape(-1, 4)
    got = pool_polar_grid(fwd.pas.astype(np.float64), boxes, 32)
    for k in np.random.default_rng(0).choice(len(boxes), 40, replace=False):
        ref = pool_polar_scores(fwd.pas.astype(np.float64), DetectionBox(*boxes[k]), 32)
        assert got[k] == pytest.approx(ref.p_polar, abs=1e-12)


def test_box_cell_ranges_example():
    r0, r1, c0, c1 = box_cell_ranges(np.array([[512.0, 512.0, 64.0, 64.0]]), 32, 32, 32)
    assert (r0[0], r1[0], c0[0], c1[0]) == (15, 16, 15, 16)


def test_decode_inverts_target_offsets():
    a = DetectionBox(530.0, 470.0, 80.0, 30.0)
    t = assign_targets([a], 32, 32, 32)
    head = np.zeros((7, 32, 32))
    head[1:5] = t.offsets
    cx, cy, w, h = decode_boxes(head, 32)[14, 16]
    assert (cx, cy, w, h) == pytest.approx((530.0, 470.0, 80.0, 30.0))


def test_space_to_depth_round_trip(rng):
    x = rng.normal(size=(3, 8, 6))
    s = space_to_depth(x)
    assert s.shape == (12, 4, 3)
    np.testing.assert_array_equal(depth_to_space(s), x)
    # the transform is a permutation, so it is its own adjoint's inverse
    g = rng.normal(size=s.shape)
    assert np.sum(s * g) == pytest.approx(np.sum(x * depth_to_space(g)))


def test_assign_targets_examples():
    t = assign_targets([DetectionBox(512, 512, 60, 40)], 32, 32, 32)
    assert t.positive.sum() == 1 and t.positive[16, 16]
    assert not assign_targets([], 32, 32, 32).positive.any()
    near = DetectionBox(520, 520, 40, 40)
    far = DetectionBox(540, 540, 50, 50)
    t2 = assign_targets([far, near], 32, 32, 32)
    assert t2.positive.sum() == 1 and t2.gt_index[16, 16] == 1


def test_postprocess_limits_and_orders(model, tile):
    dets = postprocess(model.forward(tile), 0.5, model.config)
    assert len(dets) <= model.config.max_detections
    fused = [d.fused for d in dets]
    assert fused == sorted(fused, reverse=True)


def test_negative_sampling_avoids_objects(model, tile):
    fwd = model.forward(tile)
    anns = [DetectionBox(300, 300, 80, 30), DetectionBox(700, 600, 60, 60)]
    t = assign_targets(anns, *fwd.grid, 32)
    negs = sample_negative_boxes(fwd, t, anns, 6, np.random.default_rng(0))
    assert len(negs) == 6
    from polarnet.boxes import iou
    assert all(iou(n, a) < 0.3 for n in negs for a in anns)
    assert all(n.x1 >= 0 and n.y1 >= 0 and n.x2 <= 1024 and n.y2 <= 1024 for n in negs)


@pytest.mark.parametrize("head_skip", [True, False])
def test_full_detector_gradient_check(head_skip):
    report = detector_gradcheck(seed=0, input_samples=128, head_skip=head_skip)
    assert report.max_error < 1e-5, report.errors


def test_without_polar_keeps_feature_half_of_head(tile):
    m = DetectorModel(DetectorConfig(), seed=4)
    base = m.without_polar()
    assert base.polar is None and base.backbone is m.backbone
    assert base.head.weight.shape == (7, 32)
    np.testing.assert_array_equal(base.head.weight, m.head.weight[:, 32:])
    assert base.forward(tile).p_polar is None
    plain = DetectorModel(DetectorConfig(head_skip=False), seed=4).without_polar()
    assert plain.head.weight.shape == (7, 32)


def test_single_sgd_step_decreases_sample_loss():
    rng = np.random.default_rng(5)
    m = DetectorModel(DetectorConfig(stage=5, width=16), seed=1, dtype=np.float64)
    pixels = rng.integers(0, 255, (256, 256)).astype(np.uint8)
    anns = [DetectionBox(100, 90, 70, 25, class_id=0), DetectionBox(180, 200, 40, 40, class_id=1)]
    negs = [DetectionBox(40, 200, 30, 30)]
    m.zero_grad()
    before = detection_loss(m, m.forward(pixels), anns, negs).total
    SGD(m.projections(), momentum=0.0).step(1e-4)
    after = detection_loss(m, m.forward(pixels), anns, negs, backward=False).total
    assert after < before


def test_checkpoint_round_trip(tmp_path, tile):
    m = DetectorModel(DetectorConfig(stage=4, width=16, alpha=0.3, padding="replicate"), seed=9)
    m.save(tmp_path / "m.tdk")
    assert (tmp_path / "m.tdk").read_bytes()[:4] == b"TDK1"
    back = DetectorModel.load(tmp_path / "m.tdk")
    assert back.config == m.config
    crop = tile[:256, :256]
    assert back.forward(crop).head.tobytes() == m.forward(crop).head.tobytes()
    with pytest.raises(ValueError):
        (tmp_path / "bad.tdk").write_bytes(b"NOPE")
        DetectorModel.load(tmp_path / "bad.tdk")


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert cfg.milestones == (5, 10, 16) and cfg.max_epochs == 20 and cfg.lr == 5e-3
    assert cfg.lr_at(0) == 5e-3
    assert cfg.lr_at(19) == pytest.approx(5e-6, rel=1e-12)
    full = TrainConfig.full_schedule()
    assert full.milestones == (25, 50, 80) and full.max_epochs == 100
    assert [full.lr_at(e) for e in (24, 25, 50, 99)] == pytest.approx([5e-3, 5e-4, 5e-5, 5e-6])


@pytest.mark.parametrize("ms", [(5, 5), (10, 4), (3, 25)])
def test_invalid_milestones_rejected(ms):
    with pytest.raises(ConfigurationError):
        TrainConfig(milestones=ms, max_epochs=20)


def test_empty_train_split_is_configuration_error(tmp_path):
    (tmp_path / "manifest.txt").write_text("")
    with pytest.raises(ConfigurationError):
        train(DetectorModel(DetectorConfig(stage=2, width=8)), tmp_path / "manifest.txt",
              TrainConfig(max_epochs=1, milestones=()))
