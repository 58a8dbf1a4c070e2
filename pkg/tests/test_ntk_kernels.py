import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opntk import ntk_kernels as nk
from opntk import numkit
from opntk import operator_net as on
from opntk.numkit import SeededRng
from opntk.operator_net import OperatorDataset, OperatorWeights

from conftest import small_dataset

vec3 = arrays(np.float64, 3, elements=st.floats(-2, 2)).filter(
    lambda v: np.linalg.norm(v) > 0.1)


# ------------------------------------------------------- empirical Grams

def test_empirical_grams_equal_jacobian_products(data, weights):
    jt = on.trunk_jacobian(weights, data.inputs, data.queries)
    jb = on.branch_jacobian(weights, data.inputs, data.queries)
    H = nk.empirical_H(weights, data)
    Ht = nk.empirical_Htilde(weights, data)
    np.testing.assert_allclose(H.matrix, jt @ jt.T, atol=1e-10)
    np.testing.assert_allclose(Ht.matrix, jb @ jb.T, atol=1e-10)
    assert H.matrix.shape == (data.n1 * data.n2,) * 2


def test_single_neuron_hand_values():
    u, y = np.array([[2.0, 0.0]]), np.array([[3.0, 0.0]])
    w = OperatorWeights(np.array([[1.0, 0.0]]), np.array([[[1.0, 0.0]]]), np.array([[1.0]]))
    data = OperatorDataset(u, y)
    # grad_w = beta * 1 * y = 2 * (3, 0); squared norm 36
    assert nk.empirical_H(w, data).matrix[0, 0] == pytest.approx(36.0)
    # grad_wt = sign * 1 * relu(w.y) * u = 3 * (2, 0); squared norm 36
    assert nk.empirical_Htilde(w, data).matrix[0, 0] == pytest.approx(36.0)


def test_grams_psd_and_block_symmetric(data, weights):
    for G in (nk.empirical_H(weights, data), nk.empirical_Htilde(weights, data)):
        assert G.is_psd()
        np.testing.assert_allclose(G.matrix, G.matrix.T, atol=1e-14)
        np.testing.assert_allclose(G.blk(0, 2), G.blk(2, 0).T, atol=1e-14)


def test_relu3_weights_rejected(data):
    w = on.init_weights(4, 2, data.q, data.d, SeededRng(0), "relu3")
    with pytest.raises(ValueError):
        nk.empirical_H(w, data)


def test_block_gram_shape_check():
    with pytest.raises(ValueError):
        nk.BlockGram(np.eye(5), 2, 2)


# ------------------------------------------------------- closed forms

def test_arccos_special_values():
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 2.0])
    assert nk.arccos_kernel_order1(a, a) == pytest.approx(0.5)
    assert nk.arccos_kernel_order0(a, a) == pytest.approx(0.5)
    assert nk.arccos_kernel_order1(a, b) == pytest.approx(2.0 / (2 * np.pi))
    assert nk.arccos_kernel_order0(a, b) == pytest.approx(0.0)
    assert nk.arccos_kernel_order1(a, -a) == pytest.approx(0.0, abs=1e-15)
    assert nk.arccos_kernel_order0(a, -a) == pytest.approx(0.0, abs=1e-15)
    c = np.array([0.5, math.sqrt(3) / 2])                     # angle pi/3 with a
    assert nk.arccos_kernel_order1(a, c) == pytest.approx(
        (math.sqrt(3) / 2 + math.pi / 3) / (2 * math.pi), rel=1e-14)
    assert nk.arccos_kernel_order0(a, c) == pytest.approx(1.0 / 6.0, rel=1e-14)
    with pytest.raises(ValueError):
        nk.arccos_kernel_order1(a, np.zeros(2))


@given(vec3, vec3)
def test_arccos_symmetric_and_bounded(a, b):
    k1 = nk.arccos_kernel_order1(a, b)
    assert k1 == pytest.approx(nk.arccos_kernel_order1(b, a), rel=1e-12, abs=1e-15)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    assert 0.0 <= k1 <= na * nb / 2 + 1e-12
    assert abs(nk.arccos_kernel_order0(a, b)) <= na * nb / 2 + 1e-12


@pytest.mark.parametrize("kind", ["order1", "order0"])
def test_closed_forms_agree_with_monte_carlo(kind):
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=4), rng.normal(size=4)
    f = nk.Expectation(kind, tuple(a), tuple(b))
    mean, se = nk.mc_kernel(f, 400_000, SeededRng(0, 3))
    exact = (nk.arccos_kernel_order1 if kind == "order1" else nk.arccos_kernel_order0)(a, b)
    assert abs(mean - exact) < 4.5 * se


def test_mc_kernel_rejects_few_samples():
    f = nk.Expectation("order1", (1.0, 0.0), (0.0, 1.0))
    with pytest.raises(ValueError):
        nk.mc_kernel(f, 9_999, SeededRng(0))


def test_mc_stderr_scales_as_inverse_sqrt():
    f = nk.Expectation("order1", (1.0, 0.3), (0.2, 1.0))
    _, se1 = nk.mc_kernel(f, 20_000, SeededRng(0, 3))
    _, se2 = nk.mc_kernel(f, 320_000, SeededRng(0, 3))
    assert se1 / se2 == pytest.approx(4.0, rel=0.1)


def test_mc_chunking_consistent_with_plain_mean():
    f = nk.Expectation("order0", (1.0, 0.0, 0.5), (0.3, 1.0, 0.0))
    n = nk.MC_CHUNK * 2 + 1234
    mean, se = nk.mc_kernel(f, n, SeededRng(9, 3))
    vals = f.integrand(SeededRng(9, 3).gaussian((n, 3)))
    # draws are taken chunk by chunk from the same stream, so the sample is identical
    assert mean == pytest.approx(vals.mean(), rel=1e-12)
    assert se == pytest.approx(vals.std(ddof=1) / math.sqrt(n), rel=1e-9)


def test_mc_pairs_matches_single_expectations():
    a = np.array([[1.0, 0.0], [0.6, 0.8]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    mean, se = nk.mc_pairs("order1", a, b, 200_000, SeededRng(1, 3))
    for i in range(2):
        assert abs(mean[i] - nk.arccos_kernel_order1(a[i], b[i])) < 4.5 * se[i]


# ------------------------------------------------------- infinite width

def test_hinf_single_unit_pair_is_quarter():
    data = OperatorDataset(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    g = nk.analytic_Hinf(data)
    np.testing.assert_allclose(g.H.matrix, [[0.25]])
    np.testing.assert_allclose(g.Ht.matrix, [[0.25]])


def test_hinf_is_kron_of_factors(data):
    g = nk.analytic_Hinf(data)
    h1, h2 = g.H.factors
    np.testing.assert_allclose(g.H.matrix, np.kron(h1, h2), atol=1e-15)
    expected = numkit.min_eigenvalue(h1) * numkit.min_eigenvalue(h2)
    assert g.lambda0 == pytest.approx(expected, rel=1e-8)
    assert g.lambda0 > 0 and g.lambda0_tilde > 0


def test_empirical_grams_converge_to_hinf(data):
    g = nk.analytic_Hinf(data)
    errs = []
    for m in (256, 16384):
        w = on.init_weights(m, 8, data.q, data.d, SeededRng(3, 2))
        errs.append(np.linalg.norm(nk.empirical_H(w, data).matrix - g.H.matrix, 2))
    assert errs[1] < errs[0] / 3


def test_parallel_samples_warn_or_raise():
    u = np.array([[1.0, 0.0], [2.0, 0.0]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    data = OperatorDataset(u, y)
    with pytest.warns(nk.ParallelSamplesWarning):
        g = nk.analytic_Hinf(data)
    assert g.violations
    with pytest.raises(ValueError):
        nk.analytic_Hinf(data, strict=True)
    h2 = nk.kernel_matrix(nk.arccos_kernel_order0, np.array([[1.0, 0.0], [2.0, 0.0]]))
    assert numkit.min_eigenvalue(h2) < 1e-10


def test_no_warning_for_separated_data(data):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        nk.analytic_Hinf(data, strict=True)


# ------------------------------------------------------- PINN factors

def test_pinn_factor_consistent_across_seeds():
    pts = np.array([[0.5, 0.3, 0.1], [0.2, -0.4, 0.5], [0.0, 1.0, 0.0]])
    interior = np.array([True, True, False])
    wts = np.array([0.5, 0.5, 1.0])
    for kind in ("pinn_grad", "pinn_value"):
        m1, s1 = nk.mc_pinn_factor(pts, interior, wts, kind, 100_000, SeededRng(0, 3))
        m2, s2 = nk.mc_pinn_factor(pts, interior, wts, kind, 100_000, SeededRng(1, 3))
        assert np.all(np.abs(m1 - m2) <= 5 * np.hypot(s1, s2) + 1e-12)
        np.testing.assert_allclose(m1, m1.T, atol=1e-12)


def test_pinn_factor_matches_expectation_class():
    pts = np.array([[0.5, 0.3, 0.1], [0.2, -0.4, 0.5]])
    m, _ = nk.mc_pinn_factor(pts, np.array([True, False]), np.ones(2), "pinn_grad",
                             50_000, SeededRng(4, 3))
    f = nk.Expectation("pinn_grad", tuple(pts[0]), tuple(pts[1]), True, False)
    single, _ = nk.mc_kernel(f, 50_000, SeededRng(4, 3))
    assert m[0, 1] == pytest.approx(single, rel=1e-12)


# ------------------------------------------------------- diagnostics

def test_flip_fraction_matches_gaussian_probability():
    data = small_dataset(0)
    w = on.init_weights(20_000, 2, data.q, data.d, SeededRng(0, 2))
    for radius in (0.05, 0.2):
        frac = nk.indicator_flip_fraction(w, data, radius)
        exact = math.erf(radius / math.sqrt(2))
        np.testing.assert_allclose(frac, exact, atol=0.01)
        bfrac = nk.branch_flip_fraction(w, data, radius)
        np.testing.assert_allclose(bfrac, exact, atol=0.01)
    np.testing.assert_array_equal(nk.indicator_flip_fraction(w, data, 0.0), 0.0)
    with pytest.raises(ValueError):
        nk.indicator_flip_fraction(w, data, 1.5)


def test_matrix_io_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(4, 3)) * 1e-7
    nk.write_matrix(tmp_path / "a.txt", a)
    np.testing.assert_array_equal(nk.read_matrix(tmp_path / "a.txt"), a)
    (tmp_path / "b.txt").write_text("2 2\n1 2 3\n")
    with pytest.raises(ValueError):
        nk.read_matrix(tmp_path / "b.txt")
