import json
import math

import numpy as np
import pytest

from polarnet.boxes import DomainError
from polarnet.detector import DetectorConfig, DetectorModel
from polarnet.wsi import (TiledSlide, bench, format_cost_table, plan_tiles, polar_overhead,
                          recovered, run_slide, write_outputs, write_slide)


@pytest.mark.parametrize("w,h,expected", [(4096, 4096, 16), (4097, 4096, 20), (1024, 1024, 1),
                                          (8192, 8192, 64)])
def test_plan_tile_counts(w, h, expected):
    assert len(plan_tiles(w, h)) == expected


@pytest.mark.parametrize("w,h,ov", [(4096, 4096, 128), (8192, 8192, 128), (5000, 3000, 256)])
def test_plan_with_overlap_matches_ceil_formula(w, h, ov):
    stride = 1024 - ov
    nx = math.ceil((w - 1024) / stride) + 1
    ny = math.ceil((h - 1024) / stride) + 1
    jobs = plan_tiles(w, h, overlap=ov)
    assert len(jobs) == nx * ny


@pytest.mark.parametrize("w,h,ov", [(4096, 4096, 0), (4097, 3000, 0), (5000, 3000, 128)])
def test_plan_covers_every_pixel_in_bounds(w, h, ov):
    cover = np.zeros((h, w), bool)
    jobs = plan_tiles(w, h, overlap=ov)
    assert [j.index for j in jobs] == list(range(len(jobs)))
    for j in jobs:
        assert 0 <= j.x <= w - 1024 and 0 <= j.y <= h - 1024
        cover[j.y:j.y + 1024, j.x:j.x + 1024] = True
    assert cover.all()


def test_slide_smaller_than_tile_is_domain_error():
    with pytest.raises(DomainError):
        plan_tiles(1000, 4096)


@pytest.fixture(scope="module")
def slide(tmp_path_factory):
    rng = np.random.default_rng(0)
    pixels = rng.integers(80, 200, (2048, 2048)).astype(np.uint8)
    return write_slide(tmp_path_factory.mktemp("slide") / "s1", pixels)


@pytest.fixture(scope="module")
def model():
    return DetectorModel(DetectorConfig(width=16), seed=2)


def test_read_region_crosses_stored_tiles(slide):
    whole = slide.read_region(0, 0, 2048, 2048)
    np.testing.assert_array_equal(slide.read_region(1000, 900, 100, 300), whole[900:1200, 1000:1100])


def test_worker_count_does_not_change_output(slide, model):
    one = run_slide(model, slide, n=20, workers=1, overlap=128)
    many = run_slide(model, slide, n=20, workers=8, overlap=128)
    assert one.dump_lines() == many.dump_lines()
    assert json.dumps(one.top_json()) == json.dumps(many.top_json())
    assert one.n_tiles == 9 and not one.partial


def test_top_list_is_ranked_and_fusion_consistent(slide, model):
    res = run_slide(model, slide, n=20)
    assert len(res.top) == 20
    fused = [b.fused for _, b in res.top]
    assert fused == sorted(fused, reverse=True)
    a = model.config.alpha
    for _, b in res.top:
        assert b.fused == pytest.approx((1 - a) * b.p_obj + a * b.p_polar, abs=1e-12)


def test_zero_n_gives_empty_top_list(slide, model):
    res = run_slide(model, slide, n=0)
    assert res.top == [] and res.detections


def test_unreadable_tile_marks_result_partial(tmp_path, slide, model):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(slide.root, broken)
    (broken / "tile_1024_0.png").write_bytes(b"garbage")
    res = run_slide(model, TiledSlide(broken), n=5)
    assert res.partial
    assert [j.x for j in res.failed] == [1024] and [j.y for j in res.failed] == [0]
    assert len(res.top) == 5


def test_write_outputs(tmp_path, slide, model):
    res = run_slide(model, slide, n=3)
    write_outputs(res, tmp_path)
    top = json.loads((tmp_path / "s1.top.json").read_text())
    assert [t["rank"] for t in top] == [1, 2, 3]
    lines = (tmp_path / "s1.det.txt").read_text().splitlines()
    assert len(lines) == len(res.detections) and lines[0].startswith("s1,")
    assert (tmp_path / "s1.timing.csv").read_text().startswith("stage,ms")


def test_recovered_counts_planted_hits(slide, model):
    res = run_slide(model, slide, n=20)
    truth = [b for _, b in res.top[:3]]
    assert recovered(res, truth) == 3


def test_bench_identical_variants(slide, model):
    rows = bench({"a": model, "b": model}, [slide], n=5)
    assert [r.name for r in rows] == ["a", "b"]
    assert abs(rows[1].delta_avg_s) < max(rows[0].avg_s, 1e-3)
    assert "Top-5" in format_cost_table(rows, 5)
    with pytest.raises(ValueError):
        bench({"a": model}, [slide])


def test_polar_overhead_reports_ratio():
    out = polar_overhead(width=16, grid=8, repeats=3)
    assert out["baseline_ms"] > 0 and out["polar_ms"] > 0
    assert out["ratio"] == pytest.approx(out["polar_ms"] / out["baseline_ms"])
