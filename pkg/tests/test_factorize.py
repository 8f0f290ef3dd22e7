import numpy as np
import pytest
from scipy.stats import ortho_group

from zipfa.data import CountMatrix
from zipfa.factorize import (
    FactorModel,
    FitOptions,
    build_loading_problem,
    build_score_problem,
    cell_loglik,
    predict_zero_probability,
    reorthogonalize,
    total_loglik,
    zipfa_fit,
)
from zipfa.sim import SimulationSpec, clustering_accuracy, generate_counts
from zipfa.zipreg import ZipRegProblem, fit_zip_regression


@pytest.fixture(scope="module")
def small_data():
    return generate_counts(SimulationSpec("S1", 0.2, seed=3, n=60, m=40))


@pytest.fixture(scope="module")
def small_fit(small_data):
    return zipfa_fit(small_data.A, 3)


class TestStacking:
    def test_loading_problem_layout(self):
        A = np.array([[1, 2, 3], [4, 5, 6]])
        U = np.array([[0.5], [2.0]])
        N = np.array([0.8, 1.25])
        prob = build_loading_problem(A, U, N)
        np.testing.assert_array_equal(prob.response, [1, 4, 2, 5, 3, 6])
        np.testing.assert_array_equal(prob.offset, [0.8, 1.25] * 3)
        D = prob.design.toarray()
        assert D.shape == (6, 3)
        expected = np.kron(np.eye(3), U)
        np.testing.assert_array_equal(D, expected)

    def test_score_problem_layout(self):
        A = np.array([[1, 2, 3], [4, 5, 6]])
        V = np.array([[1.0], [-1.0], [0.5]])
        N = np.array([0.8, 1.25])
        prob = build_score_problem(A, V, N)
        np.testing.assert_array_equal(prob.offset, [0.8, 0.8, 0.8, 1.25, 1.25, 1.25])
        # cell (i, j) sits at position i*m + j
        for i in range(2):
            for j in range(3):
                assert prob.response[i * 3 + j] == A[i, j]
        np.testing.assert_array_equal(prob.design.toarray(), np.kron(np.eye(2), V))

    def test_single_column_is_plain_regression(self):
        rng = np.random.default_rng(0)
        U = rng.normal(size=(80, 2))
        A = rng.poisson(np.exp(U @ [0.3, 0.5]))[:, None]
        A[rng.random(80) < 0.2] = 0
        N = np.ones(80)
        stacked = fit_zip_regression(build_loading_problem(A, U, N))
        direct = fit_zip_regression(ZipRegProblem(A[:, 0], U, N))
        np.testing.assert_allclose(stacked.beta, direct.beta, rtol=1e-8)
        assert stacked.tau == pytest.approx(direct.tau, rel=1e-8)

    def test_mask_drops_cells(self):
        A = np.arange(6).reshape(2, 3) + 1
        obs = np.ones((2, 3), bool)
        obs[1, 2] = False
        prob = build_loading_problem(A, np.ones((2, 1)), np.ones(2), obs)
        assert prob.n_obs == 5 and 6 not in prob.response
        prob = build_score_problem(A, np.ones((3, 1)), np.ones(2), obs)
        assert prob.n_obs == 5 and 6 not in prob.response


class TestLoglik:
    def test_single_cell(self):
        # lambda = ln 2, tau chosen so p = 0.5 (tau = 0)
        U = np.array([[np.log(np.log(2))]])
        V = np.ones((1, 1))
        assert total_loglik(np.array([[0]]), U, V, 0.0, np.ones(1)) == pytest.approx(
            np.log(0.75), abs=1e-12)
        assert np.log(0.75) == pytest.approx(-0.2877, abs=1e-4)

    def test_mask_additivity(self):
        rng = np.random.default_rng(1)
        A = rng.poisson(2.0, size=(6, 5))
        U, V = rng.normal(size=(6, 2)) * 0.3, rng.normal(size=(5, 2)) * 0.3
        N = rng.uniform(0.5, 2, 6)
        held = np.array([[0, 1], [4, 3]])
        full = total_loglik(A, U, V, 0.7, N)
        cells = cell_loglik(A, U, V, 0.7, N)
        part = total_loglik(A, U, V, 0.7, N, held_out=held)
        assert part == pytest.approx(full - cells[0, 1] - cells[4, 3], rel=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        A = rng.poisson(2.0, size=(7, 6))
        U, V = rng.normal(size=(7, 3)) * 0.3, rng.normal(size=(6, 3)) * 0.3
        R = ortho_group.rvs(3, random_state=4)
        a = total_loglik(A, U, V, 0.4, np.ones(7))
        b = total_loglik(A, U @ R, V @ R, 0.4, np.ones(7))
        assert a == pytest.approx(b, rel=1e-12)


def test_reorthogonalize_preserves_product():
    rng = np.random.default_rng(3)
    U, V = rng.normal(size=(20, 3)), rng.normal(size=(10, 3))
    U2, V2 = reorthogonalize(U, V)
    P = U2 @ V2.T
    assert np.linalg.norm(U @ V.T - P) <= 1e-10 * np.linalg.norm(P)
    np.testing.assert_allclose(V2.T @ V2, np.eye(3), atol=1e-10)


class TestFit:
    def test_outputs(self, small_fit):
        m = small_fit
        assert m.U.shape == (60, 3) and m.V.shape == (40, 3)
        assert np.all(np.isfinite(m.log_rate))
        np.testing.assert_allclose(m.V.T @ m.V, np.eye(3), atol=1e-8)
        assert m.converged and m.iterations == len(m.loglik_trace)

    def test_trace_monotone(self, small_fit):
        t = np.array(small_fit.loglik_trace)
        assert np.all(np.diff(t) >= -1e-6 * np.abs(t[:-1]))

    def test_recovers_groups(self, small_data, small_fit):
        # the 60 x 40 grid leaves only 4 taxa in one group; full scale is
        # checked in the acceptance suite
        assert clustering_accuracy(small_fit.V, small_data.taxon_groups) >= 0.9
        assert clustering_accuracy(small_fit.U, small_data.sample_groups) >= 0.9

    def test_deterministic(self, small_data, small_fit):
        again = zipfa_fit(small_data.A, 3)
        assert again.loglik_trace == small_fit.loglik_trace
        np.testing.assert_array_equal(again.U, small_fit.U)

    def test_constant_matrix(self):
        A = np.full((12, 8), 20)
        model = zipfa_fit(A, 1, offsets=1.0)
        np.testing.assert_allclose(model.log_rate, np.log(20), atol=1e-2)

    def test_nesting(self):
        rng = np.random.default_rng(6)
        U = np.column_stack([np.ones(40), rng.normal(scale=0.6, size=40)])
        V = np.column_stack([np.full(25, 1.2), rng.normal(scale=0.6, size=25)])
        A = rng.poisson(np.exp(U @ V.T))
        A[0] += 1
        ll1 = zipfa_fit(A, 1, offsets=1.0).loglik
        ll2 = zipfa_fit(A, 2, offsets=1.0).loglik
        assert ll2 >= ll1

    def test_held_out_cells_unseen(self, small_data):
        A = small_data.A.values.copy()
        held = np.array([[0, 0], [5, 7], [30, 12]])
        a = zipfa_fit(A, 2, held_out=held)
        A[5, 7] += 50
        A[0, 0] = 0
        b = zipfa_fit(A, 2, held_out=held)
        np.testing.assert_array_equal(a.U, b.U)
        assert a.tau == b.tau

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            zipfa_fit(np.ones((3, 2), dtype=int), 3)

    def test_iteration_cap(self, small_data):
        model = zipfa_fit(small_data.A, 2, FitOptions(max_outer_iterations=1))
        assert model.iterations == 1 and not model.converged


class TestPersistence:
    def test_roundtrip_exact(self, tmp_path, small_fit):
        small_fit.save(tmp_path / "m.json")
        back = FactorModel.load(tmp_path / "m.json")
        np.testing.assert_array_equal(back.U, small_fit.U)
        np.testing.assert_array_equal(back.V, small_fit.V)
        np.testing.assert_array_equal(back.N, small_fit.N)
        assert back.tau == small_fit.tau and back.converged == small_fit.converged
        assert back.loglik_trace == small_fit.loglik_trace

    def test_accepts_count_matrix(self, small_data):
        assert isinstance(small_data.A, CountMatrix)


class TestZeroProbability:
    def test_single_cell(self):
        m = FactorModel(np.zeros((1, 1)), np.ones((1, 1)), 1.0, np.ones(1))
        # log rate 0 -> lambda 1; p = 0.5
        assert predict_zero_probability(m)[0, 0] == pytest.approx(0.5 + 0.5 * np.exp(-1))
        assert predict_zero_probability(m)[0, 0] == pytest.approx(0.6839, abs=1e-4)

    def test_tau_zero(self):
        rng = np.random.default_rng(0)
        m = FactorModel(rng.normal(size=(4, 2)), rng.normal(size=(3, 2)), 0.0, np.full(4, 2.0))
        lam = np.exp(m.log_rate)
        np.testing.assert_allclose(predict_zero_probability(m), 0.5 + 0.5 * np.exp(-2 * lam))

    def test_huge_rate(self):
        m = FactorModel(np.array([[20.0]]), np.ones((1, 1)), 0.1, np.ones(1))
        from scipy.special import expit
        assert predict_zero_probability(m)[0, 0] == pytest.approx(expit(-2.0), rel=1e-12)
