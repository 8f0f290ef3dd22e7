import numpy as np
import pytest

from zipfa.factorize import FactorModel, FitOptions
from zipfa.rankcv import (
    CvConfig,
    SelectionError,
    cv_fold_loglik,
    heldout_loglik,
    select_rank,
)
from zipfa.sim import SimulationSpec, generate_counts


def rank_one_poisson(seed, n=40, m=30):
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.8, 1.2, n)
    v = rng.uniform(0.5, 2.0, m)
    A = rng.poisson(np.exp(np.outer(u, v)))
    A[:, A.sum(axis=0) == 0] = 1
    return A


def test_empty_fold():
    assert cv_fold_loglik(np.ones((3, 3), dtype=int), 1, np.zeros((0, 2))) == 0.0


def test_single_cell_heldout():
    # p = 0.5 (tau = 0) and N * lambda = ln 2
    model = FactorModel(np.array([[np.log(np.log(2))]]), np.ones((1, 1)), 0.0, np.ones(1))
    assert heldout_loglik(np.array([[0]]), model, [[0, 0]]) == pytest.approx(np.log(0.75))


def test_singleton_rank_skips_fitting():
    res = select_rank(np.ones((3, 3), dtype=int), CvConfig(ranks=[3]))
    assert res.selected_rank == 3 and res.table == {}


def test_config_validation():
    with pytest.raises(ValueError):
        CvConfig(ranks=[0, 1])
    with pytest.raises(ValueError):
        CvConfig(ranks=[1], folds=1)
    with pytest.raises(ValueError):
        select_rank(np.ones((3, 3), dtype=int), CvConfig(ranks=[1, 4]))


@pytest.fixture(scope="module")
def rank_one_runs():
    return [select_rank(rank_one_poisson(s), CvConfig(ranks=range(1, 5), seed=s))
            for s in range(10)]


class TestSelection:
    def test_rank_one_selected(self, rank_one_runs):
        picks = [r.selected_rank for r in rank_one_runs]
        assert sum(p == 1 for p in picks) >= 8, picks

    def test_overfitting_penalised(self, rank_one_runs):
        gap = np.mean([r.totals[1] - r.totals[3] for r in rank_one_runs])
        assert gap > 0

    def test_totals_are_fold_sums(self, rank_one_runs):
        res = rank_one_runs[0]
        for k, total in res.totals.items():
            assert total == sum(v for (_, kk, _), v in res.table.items() if kk == k)

    def test_deterministic(self, rank_one_runs):
        again = select_rank(rank_one_poisson(0), CvConfig(ranks=range(1, 5), seed=0))
        assert again.table == rank_one_runs[0].table

    def test_repeats(self):
        A = rank_one_poisson(3, 20, 12)
        res = select_rank(A, CvConfig(ranks=[1, 2], folds=3, repeats=3, seed=1))
        assert len(res.repeat_totals) == 6
        vals = [res.repeat_totals[(r, 1)] for r in range(3)]
        assert len(set(vals)) == 3
        assert res.totals[1] == pytest.approx(sum(vals))


class TestFailures:
    def test_all_ranks_fail(self, monkeypatch):
        import zipfa.rankcv as rc

        monkeypatch.setattr(rc, "_fold_value", lambda *a: -np.inf)
        with pytest.raises(SelectionError):
            select_rank(rank_one_poisson(0, 10, 8), CvConfig(ranks=[1, 2], folds=2))

    def test_failed_fold_dropped_for_all_ranks(self, monkeypatch):
        import zipfa.rankcv as rc

        def fake(A, kappa, fold, opts):
            if kappa == 2 and fold[0].tolist() == first[0].tolist():
                return -np.inf
            return -float(kappa)

        from zipfa.data import partition_indices
        first = partition_indices(10, 8, 2, np.random.SeedSequence(0, spawn_key=(0,)))[0]
        monkeypatch.setattr(rc, "_fold_value", fake)
        res = select_rank(rank_one_poisson(0, 10, 8), CvConfig(ranks=[1, 2, 3], folds=2))
        assert res.dropped == ((0, 0),)
        assert all(key[2] == 1 for key in res.table)
        assert res.selected_rank == 1 and res.invalid_ranks == ()

    def test_cold_retry(self, monkeypatch):
        import zipfa.rankcv as rc

        calls = []

        def flaky(A, kappa, fold, opts):
            calls.append(opts.warm_start)
            if opts.warm_start:
                raise FloatingPointError("boom")
            return -1.0

        monkeypatch.setattr(rc, "cv_fold_loglik", flaky)
        assert rc._fold_value(None, 1, None, FitOptions()) == -1.0
        assert calls == [True, False]


def test_rank_three_on_simulated_data():
    d = generate_counts(SimulationSpec("S1", 0.2, seed=2, n=80, m=50))
    res = select_rank(d.A, CvConfig(ranks=[2, 3, 4], folds=3, seed=0))
    assert res.selected_rank == 3
