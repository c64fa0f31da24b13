import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from polarnet.oracles import finite_difference, naive_project, relative_error
from polarnet.tensor import (DimensionError, LinearProjection, load_feature_map, project,
                             project_backward, read_array, read_projection, save_feature_map,
                             softmax, softmax_backward, write_array, write_projection)


def test_identity_projection_returns_input(rng):
    x = rng.normal(size=(5, 4, 3))
    np.testing.assert_array_equal(project(LinearProjection.identity(5), x), x)


def test_zero_weight_gives_constant_bias_map(rng):
    b = np.array([1.5, -2.0, 0.25])
    p = LinearProjection(np.zeros((3, 4)), b)
    out = project(p, rng.normal(size=(4, 2, 6)))
    assert out.shape == (3, 2, 6)
    for c in range(3):
        assert np.all(out[c] == b[c])


def test_projection_bitwise_equals_loop_oracle_float64():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = LinearProjection(rng.normal(size=(4, 4)), rng.normal(size=4))
        x = rng.normal(size=(4, 3, 3))
        np.testing.assert_array_equal(project(p, x), naive_project(p.weight, p.bias, x))


def test_float32_path_close_to_oracle(rng):
    p = LinearProjection(rng.normal(size=(6, 5)).astype(np.float32),
                         rng.normal(size=6).astype(np.float32))
    x = rng.normal(size=(5, 7, 7)).astype(np.float32)
    out = project(p, x)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_project(p.weight, p.bias, x), rtol=1e-5, atol=1e-5)


def test_projection_preserves_spatial_shape(rng):
    p = LinearProjection.init(3, 8, rng)
    assert project(p, rng.normal(size=(3, 11, 2))).shape == (8, 11, 2)


def test_channel_mismatch_raises(rng):
    p = LinearProjection.init(3, 2, rng)
    with pytest.raises(DimensionError):
        project(p, rng.normal(size=(4, 2, 2)))


def test_non_three_dimensional_input_raises(rng):
    with pytest.raises(DimensionError):
        project(LinearProjection.identity(2), rng.normal(size=(2, 3)))


def test_inconsistent_bias_raises():
    with pytest.raises(DimensionError):
        LinearProjection(np.zeros((3, 2)), np.zeros(2))


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_projection_is_affine_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 4))
    lin = LinearProjection(w, np.zeros(3))
    x, z = rng.normal(size=(2, 4, 3, 3))
    lhs = project(lin, a * x + b * z)
    rhs = a * project(lin, x) + b * project(lin, z)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_projection_backward_matches_finite_differences(rng):
    p = LinearProjection(rng.normal(size=(3, 4)), rng.normal(size=3))
    x = rng.normal(size=(4, 3, 2))
    probe = rng.normal(size=(3, 3, 2))

    def loss():
        return float((probe * project(p, x)).sum())

    dx = project_backward(p, x, probe)
    assert relative_error(dx, finite_difference(loss, x)) < 1e-8
    assert relative_error(p.weight_grad, finite_difference(loss, p.weight)) < 1e-8
    assert relative_error(p.bias_grad, finite_difference(loss, p.bias)) < 1e-8


def test_projection_backward_accumulates(rng):
    p = LinearProjection(rng.normal(size=(2, 2)), np.zeros(2))
    x = rng.normal(size=(2, 2, 2))
    g = rng.normal(size=(2, 2, 2))
    project_backward(p, x, g)
    once = p.weight_grad.copy()
    project_backward(p, x, g)
    np.testing.assert_allclose(p.weight_grad, 2 * once)
    p.zero_grad()
    assert not p.weight_grad.any() and not p.bias_grad.any()


def test_softmax_uniform_for_equal_inputs():
    np.testing.assert_allclose(softmax(np.full(9, 3.7)), np.full(9, 1 / 9), rtol=0, atol=1e-15)


def test_softmax_saturates():
    v = np.zeros(9)
    v[2] = 1000.0
    out = softmax(v)
    assert out[2] == pytest.approx(1.0)
    assert np.all(np.delete(out, 2) < 1e-300)
    assert np.all(np.isfinite(out))


def test_softmax_of_range_matches_direct_formula():
    v = np.arange(9.0)
    e = np.array([np.exp(t) for t in v])
    np.testing.assert_allclose(softmax(v), e / e.sum(), rtol=1e-14)
    assert softmax(v).sum() == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=9, max_size=9), st.floats(-100, 100),
       st.permutations(range(9)))
def test_softmax_shift_invariant_and_permutation_equivariant(v, c, perm):
    v = np.array(v)
    out = softmax(v)
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) < 1e-12
    np.testing.assert_allclose(softmax(v + c), out, atol=1e-12)
    np.testing.assert_allclose(softmax(v[list(perm)]), out[list(perm)], atol=1e-15)


def test_softmax_backward_matches_finite_differences(rng):
    v = rng.normal(size=(9, 2, 2))
    probe = rng.normal(size=(9, 2, 2))
    g = softmax_backward(softmax(v), probe)
    num = finite_difference(lambda: float((probe * softmax(v)).sum()), v)
    assert relative_error(g, num) < 1e-8


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_feature_map_round_trip(tmp_path, rng, dtype):
    x = rng.normal(size=(3, 5, 4)).astype(dtype)
    save_feature_map(tmp_path / "x.pfm", x)
    raw = (tmp_path / "x.pfm").read_bytes()
    assert raw[:4] == b"PFM1"
    assert raw[4] == (1 if dtype == np.float32 else 2)
    assert int.from_bytes(raw[5:9], "little") == 3
    assert int.from_bytes(raw[9:13], "little") == 5
    assert int.from_bytes(raw[13:17], "little") == 4
    y = load_feature_map(tmp_path / "x.pfm")
    assert y.dtype == dtype
    np.testing.assert_array_equal(x, y)


def test_projection_round_trip(rng):
    p = LinearProjection(rng.normal(size=(3, 4)), rng.normal(size=3))
    buf = io.BytesIO()
    write_projection(buf, p)
    buf.seek(0)
    q = read_projection(buf)
    np.testing.assert_array_equal(p.weight, q.weight)
    np.testing.assert_array_equal(p.bias, q.bias)


def test_bad_magic_and_truncation_are_rejected(rng):
    buf = io.BytesIO()
    write_array(buf, rng.normal(size=(2, 2, 2)), magic=b"XXXX")
    buf.seek(0)
    with pytest.raises(ValueError):
        read_array(buf)
    with pytest.raises(EOFError):
        read_array(io.BytesIO(buf.getvalue()[:20]), magic=b"XXXX")
