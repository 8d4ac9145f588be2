import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvfp4qat.rht import RhtTransform, apply_rht, build_hadamard, rht_pair_apply


@pytest.mark.parametrize("h", [1, 2, 4, 16, 64])
def test_hadamard_is_orthogonal_after_scaling(h):
    H = build_hadamard(h)
    assert np.array_equal(H @ H.T, h * np.eye(h, dtype=np.int64))


@pytest.mark.parametrize("h", [0, 3, 12, 2048])
def test_hadamard_rejects_bad_sizes(h):
    with pytest.raises(ValueError, match="power of two"):
        build_hadamard(h)


@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8, 16, 32]))
def test_random_transform_orthogonal(seed, h):
    t = RhtTransform.random(h, np.random.default_rng(seed))
    m = t.matrix
    assert np.abs(m @ m.T - np.eye(h)).max() < 1e-12
    assert set(np.unique(t.signs)) <= {-1.0, 1.0}


def test_size_one_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    t = RhtTransform.random(1, 0)
    assert np.array_equal(apply_rht(x, t, axis=1), x)


def test_apply_along_axis_matches_dense_product():
    rng = np.random.default_rng(0)
    t = RhtTransform.random(16, rng)
    x = rng.normal(size=(5, 32))
    dense = np.kron(np.eye(2), t.matrix)
    assert np.allclose(apply_rht(x, t, axis=1), x @ dense)
    assert np.allclose(apply_rht(x.T, t, axis=0), (x @ dense).T)


@settings(deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 6), st.integers(0, 1000))
def test_pair_application_cancels(m, kb, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, 16 * kb))
    b = rng.normal(size=(16 * kb, n))
    ar, br = rht_pair_apply(a, b, seed=seed)
    assert np.allclose(ar @ br, a @ b, rtol=1e-10, atol=1e-10)


def test_pair_application_spreads_outlier():
    a = np.zeros((1, 16))
    a[0, 3] = 100.0
    ar, _ = rht_pair_apply(a, np.eye(16), seed=1)
    assert np.allclose(np.abs(ar), 25.0)


def test_mismatched_or_indivisible_axes():
    with pytest.raises(ValueError):
        rht_pair_apply(np.ones((2, 16)), np.ones((32, 2)))
    with pytest.raises(ValueError):
        apply_rht(np.ones((2, 10)), RhtTransform.random(16, 0), axis=1)


def test_seeded_signs_replay():
    a = RhtTransform.random(16, 7).signs
    b = RhtTransform.random(16, 7).signs
    assert np.array_equal(a, b)
