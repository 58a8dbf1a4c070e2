import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opntk import numkit
from opntk.numkit import NotSymmetricError, SeededRng


def random_sym(n, seed, psd=False):
    a = np.random.default_rng(seed).normal(size=(n, n))
    return a @ a.T if psd else a + a.T


# ---------------------------------------------------------------- kron

def test_kron_identity_and_scalar():
    np.testing.assert_array_equal(numkit.kron(np.eye(2), np.eye(3)), np.eye(6))
    np.testing.assert_array_equal(numkit.kron([[2.0]], [[3.0]]), [[6.0]])


def test_kron_block_layout():
    a = np.arange(6.0).reshape(2, 3)
    b = np.array([[1.0, -1.0], [0.5, 2.0]])
    k = numkit.kron(a, b)
    assert k.shape == (4, 6)
    for i in range(2):
        for j in range(3):
            np.testing.assert_array_equal(k[2 * i:2 * i + 2, 2 * j:2 * j + 2], a[i, j] * b)
    np.testing.assert_array_equal(k, np.kron(a, b))


def test_kron_spectrum_is_pairwise_products():
    a, b = random_sym(3, 1, psd=True), random_sym(3, 2, psd=True)
    ea, eb = np.linalg.eigvalsh(a), np.linalg.eigvalsh(b)
    expected = np.sort(np.outer(ea, eb).ravel())
    np.testing.assert_allclose(numkit.eigenvalues(numkit.kron(a, b)), expected, atol=1e-9)


@given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 4), elements=st.floats(-5, 5)),
       st.floats(-10, 10))
def test_kron_bilinear(a, b, alpha):
    np.testing.assert_allclose(numkit.kron(alpha * a, b), alpha * numkit.kron(a, b),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_kron_min_eigenvalue_product(seed):
    a, b = random_sym(4, seed, psd=True), random_sym(3, seed + 100, psd=True)
    got = numkit.min_eigenvalue(numkit.kron(a, b))
    want = numkit.min_eigenvalue(a) * numkit.min_eigenvalue(b)
    assert abs(got - want) <= 1e-8 * abs(want)


# ---------------------------------------------------------------- eigen

def test_min_eigenvalue_examples():
    assert numkit.min_eigenvalue(np.eye(4)) == pytest.approx(1.0, abs=1e-14)
    assert numkit.min_eigenvalue(np.diag([2.0, 5.0])) == pytest.approx(2.0, abs=1e-14)
    assert numkit.min_eigenvalue([[2.0, 1.0], [1.0, 2.0]]) == pytest.approx(1.0, abs=1e-12)


def test_non_symmetric_rejected_with_location():
    a = np.eye(3)
    a[0, 2] = 1e-3
    with pytest.raises(NotSymmetricError) as info:
        numkit.min_eigenvalue(a)
    assert info.value.index in ((0, 2), (2, 0))
    assert info.value.worst == pytest.approx(1e-3)


def test_symmetry_tolerance_is_relative():
    a = np.array([[1.0, 1e6], [1e6 + 1e-7, 3.0]])
    numkit.check_symmetric(a)
    b = np.array([[1.0, 2.0], [2.0 + 1e-9, 1.0]])
    with pytest.raises(NotSymmetricError):
        numkit.check_symmetric(b)


@pytest.mark.parametrize("n", [1, 2, 3, 7, 16, 33, 64])
def test_jacobi_matches_lapack(n):
    a = random_sym(n, n)
    vals, vecs = numkit.jacobi_eigh(a)
    norm = np.max(np.abs(np.linalg.eigvalsh(a)))
    np.testing.assert_allclose(vals, np.linalg.eigvalsh(a), atol=1e-10 * norm)
    resid = np.linalg.norm(a @ vecs - vecs * vals, axis=0)
    assert np.all(resid <= 1e-9 * norm)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-10)


@given(arrays(np.float64, (6, 6), elements=st.floats(-100, 100)))
def test_jacobi_residual_property(raw):
    a = raw + raw.T
    vals, vecs = numkit.jacobi_eigh(a)
    norm = max(np.max(np.abs(vals)), 1e-300)
    assert np.all(np.diff(vals) >= 0)
    assert np.all(np.linalg.norm(a @ vecs - vecs * vals, axis=0) <= 1e-9 * max(norm, 1.0))


def test_jacobi_degenerate_cases():
    vals, vecs = numkit.jacobi_eigh(np.zeros((3, 3)))
    np.testing.assert_array_equal(vals, 0.0)
    vals, _ = numkit.jacobi_eigh(np.diag([3.0, -1.0, 2.0]))
    np.testing.assert_allclose(vals, [-1.0, 2.0, 3.0])
    vals, _ = numkit.jacobi_eigh(np.ones((5, 5)))   # rank one, repeated zeros
    np.testing.assert_allclose(vals, [0, 0, 0, 0, 5], atol=1e-12)


def test_spectral_norm_uses_largest_magnitude():
    assert numkit.spectral_norm_sym(np.diag([-7.0, 2.0])) == pytest.approx(7.0)


# ---------------------------------------------------------------- rng

def test_rng_determinism():
    a = numkit.sample_gaussian_vector(SeededRng(3, 1), 3)
    b = numkit.sample_gaussian_vector(SeededRng(3, 1), 3)
    np.testing.assert_array_equal(a, b)
    c = numkit.sample_rademacher(SeededRng(3, 1), 10)
    np.testing.assert_array_equal(c, numkit.sample_rademacher(SeededRng(3, 1), 10))


def test_rng_streams_differ():
    a = SeededRng(3, 1).gaussian(5)
    assert not np.array_equal(a, SeededRng(3, 2).gaussian(5))
    assert not np.array_equal(a, SeededRng(4, 1).gaussian(5))


def test_gaussian_moments():
    x = SeededRng(0, 0).gaussian(1_000_000)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.01


def test_streams_uncorrelated():
    a = SeededRng(7, 0).gaussian(100_000)
    b = SeededRng(7, 1).gaussian(100_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_rademacher_range_and_mean():
    s = numkit.sample_rademacher(SeededRng(0, 0), 1_000_000)
    assert set(np.unique(s)) == {-1.0, 1.0}
    assert abs(s.mean()) < 0.01


def test_rng_bad_arguments():
    with pytest.raises(ValueError):
        SeededRng(-1)
    with pytest.raises(ValueError):
        numkit.sample_gaussian_vector(SeededRng(0), 0)
    with pytest.raises(ValueError):
        numkit.sample_rademacher(SeededRng(0), 0)


def test_rng_identical_across_processes():
    code = ("from opntk.numkit import SeededRng;"
            "import sys; sys.stdout.write(SeededRng(11, 5).gaussian(64).tobytes().hex())")
    out = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                          check=True).stdout for _ in range(2)]
    assert out[0] == out[1]
    assert bytes.fromhex(out[0]) == SeededRng(11, 5).gaussian(64).tobytes()
