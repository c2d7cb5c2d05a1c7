import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mirrordiff as md
from mirrordiff.rng import stream


def gauss_inside(b: float) -> float:
    return math.erf(b / math.sqrt(2.0))


def test_keygen_shapes_and_determinism():
    key = md.keygen(3, 7, 12288, 1.05)
    assert key.tokens.shape == (7, 12288)
    assert np.max(np.abs(key.tokens @ key.tokens.T - np.eye(7))) < 1e-10
    again = md.keygen(3, 7, 12288, 1.05)
    assert np.array_equal(key.tokens, again.tokens)

    small = md.keygen(1, 1, 2, 1.0)
    assert np.linalg.norm(small.tokens[0]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        md.keygen(1, 5, 3, 1.0)
    with pytest.raises(ValueError):
        md.keygen(1, 1, 3, 0.0)


def test_project_examples():
    tokens = np.zeros((1, 2))
    tokens[0, 0] = 1.0
    key = md.WatermarkKey(tokens=tokens, bound=1.0, seed=0, d=2, m=1)
    out = md.project(key, np.array([3.0, 5.0]))
    np.testing.assert_allclose(out, [0.99, 5.0], atol=1e-14)

    inside = np.array([0.5, -7.0])
    np.testing.assert_array_equal(md.project(key, inside), inside)

    x = np.array([42.0, -3.0])
    once = md.project(key, x)
    np.testing.assert_array_equal(md.project(key, once), once)


def test_project_preserves_orthogonal_complement():
    key = md.keygen(5, 4, 24, 0.9)
    rng = stream(6, "proj")
    x = 30.0 * rng.standard_normal((300, 24))
    moved = md.project(key, x) - x
    off_span = moved - (moved @ key.tokens.T) @ key.tokens
    assert np.max(np.abs(off_span)) < 1e-10


def test_detect_examples_and_result_invariant():
    key = md.keygen(7, 3, 8, 0.9)
    res0 = md.detect(key, np.zeros(8))
    assert res0.detected and res0.violated.size == 0
    np.testing.assert_allclose(res0.coefficients, 0.0, atol=0)

    x = 2.0 * key.bound * key.tokens[1]
    res = md.detect(key, x)
    assert not res.detected
    assert list(res.violated) == [1]
    assert res.detected == (res.violated.size == 0)

    with pytest.raises(md.NonFiniteInput):
        md.detect(key, np.full(8, np.nan))


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=100, deadline=None)
def test_recall_detect_after_project(scale, seed):
    key = md.keygen(11, 3, 6, 0.9)
    x = scale * stream(seed, "recall").standard_normal(6)
    assert md.detect(key, md.project(key, x)).detected


def test_recall_bulk():
    key = md.keygen(12, 20, 64, 1.05)
    rng = stream(13, "bulk")
    x = rng.standard_normal((10_000, 64)) * rng.choice([1.0, 10.0, 1e4], (10_000, 1))
    assert np.all(md.detect_mask(key, md.project(key, x)))


def test_fp_rate_examples():
    key = md.keygen(1, 4, 64, 0.9)
    fp = md.fp_rate_gaussian(key, n_mc=100_000, seed=0)
    assert fp.analytic == pytest.approx(gauss_inside(0.9) ** 4, rel=1e-12)
    assert fp.analytic == pytest.approx(0.1594, abs=2e-4)
    assert abs(fp.monte_carlo - fp.analytic) < 3 * fp.stderr

    key100 = md.keygen(2, 100, 128, 1.2)
    fp100 = md.fp_rate_gaussian(key100, n_mc=1000, seed=0)
    assert fp100.analytic == pytest.approx(gauss_inside(1.2) ** 100, rel=1e-12)
    assert fp100.analytic == pytest.approx(4.4e-12, rel=0.02)
    assert fp100.monte_carlo == 0.0


def test_fp_rate_empty_key_edge():
    key = md.WatermarkKey(tokens=np.zeros((0, 5)), bound=1.0, seed=0, d=5, m=0)
    fp = md.fp_rate_gaussian(key, n_mc=100, seed=1)
    assert fp.analytic == 1.0 and fp.monte_carlo == 1.0


def test_precision_estimate():
    key = md.keygen(21, 4, 16, 0.9)
    rng = stream(22, "prec")
    x = rng.standard_normal((20_000, 16))
    projected = md.project(key, x)
    assert md.precision_estimate(key, projected) == 100.0
    p = md.precision_estimate(key, x) / 100.0
    expect = gauss_inside(0.9) ** 4
    assert abs(p - expect) < 4 * math.sqrt(expect * (1 - expect) / 20_000)
    with pytest.raises(md.EmptyBatch):
        md.precision_estimate(key, np.zeros((0, 16)))


def test_key_serialization_round_trip(tmp_path):
    key = md.keygen(5, 6, 40, 1.05)
    stem = str(tmp_path / "key")
    md.save_key(key, stem)
    back = md.load_key(stem)
    assert np.array_equal(back.tokens, key.tokens)
    assert back.bound == key.bound and back.seed == key.seed
    assert back.m == key.m and back.d == key.d


def test_key_as_polytope_consistency():
    key = md.keygen(9, 3, 10, 0.9)
    poly = key.as_polytope()
    rng = stream(10, "poly")
    x = rng.standard_normal((500, 10))
    projected = md.project(key, x)
    assert np.all(md.contains_mask(poly, projected))
    assert np.array_equal(md.contains_mask(poly, x), md.detect_mask(key, x))
