import numpy as np
import pytest
import scipy.linalg

from zipfa.linalg import absorb_scale, truncated_svd


def test_identity():
    t = truncated_svd(np.eye(3), 1)
    np.testing.assert_allclose(t.singular, [1.0])
    assert np.sum((np.eye(3) - t.reconstruct()) ** 2) == pytest.approx(2.0)


def test_rank_one_exact():
    u = np.array([1.0, -2.0, 0.5, 3.0])
    v = np.array([0.3, 1.2, -0.7])
    M = np.outer(u, v)
    assert np.linalg.norm(M - truncated_svd(M, 1).reconstruct()) <= 1e-10


def test_eckart_young_against_full_decomposition():
    M = np.random.default_rng(0).normal(size=(6, 5))
    s_full = scipy.linalg.svd(M, compute_uv=False)
    err = np.sum((M - truncated_svd(M, 2).reconstruct()) ** 2)
    assert err == pytest.approx(np.sum(s_full[2:] ** 2), rel=1e-10)


def test_orthonormal_and_sign_convention():
    M = np.random.default_rng(1).normal(size=(20, 7))
    t = truncated_svd(M, 4)
    assert np.linalg.norm(t.left.T @ t.left - np.eye(4)) < 1e-10
    assert np.linalg.norm(t.right.T @ t.right - np.eye(4)) < 1e-10
    assert np.all(np.diff(t.singular) <= 0) and np.all(t.singular >= 0)
    pivots = t.right[np.argmax(np.abs(t.right), axis=0), np.arange(4)]
    assert np.all(pivots > 0)
    # flipping the input's sign must not flip the right vectors
    np.testing.assert_allclose(truncated_svd(-M, 4).right, t.right, atol=1e-12)


def test_deterministic():
    M = np.random.default_rng(2).normal(size=(9, 9))
    a, b = truncated_svd(M, 3), truncated_svd(M.copy(), 3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_errors():
    with pytest.raises(ValueError):
        truncated_svd(np.ones((3, 2)), 3)
    with pytest.raises(ValueError):
        truncated_svd(np.ones((3, 2)), 0)
    with pytest.raises(FloatingPointError):
        truncated_svd(np.array([[1.0, np.nan], [0, 1]]), 1)


class TestAbsorbScale:
    def test_unit_singular_values(self):
        t = truncated_svd(np.eye(4), 2)
        scores, loadings = absorb_scale(t)
        np.testing.assert_array_equal(scores, t.left)

    def test_column_scaling(self):
        from zipfa.linalg import SvdTriplet

        U = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        t = SvdTriplet(U, np.array([2.0, 3.0]), np.eye(2))
        scores, _ = absorb_scale(t)
        np.testing.assert_array_equal(scores, [[2, 0], [0, 3], [0, 0]])

    def test_product_preserved(self):
        M = np.random.default_rng(4).normal(size=(12, 8))
        t = truncated_svd(M, 3)
        scores, loadings = absorb_scale(t)
        ref = t.reconstruct()
        assert np.linalg.norm(scores @ loadings.T - ref) <= 1e-12 * np.linalg.norm(ref)
