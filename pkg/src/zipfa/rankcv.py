"""Rank selection by cross-validated held-out ZIP likelihood."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CountMatrix, partition_indices
from .factorize import FactorModel, FitOptions, zipfa_fit
from .zipreg import zip_logpmf

logger = logging.getLogger(__name__)


class SelectionError(RuntimeError):
    """Every candidate rank failed."""


@dataclass
class CvConfig:
    ranks: tuple
    folds: int = 5
    seed: int = 0
    options: FitOptions = field(default_factory=FitOptions)
    repeats: int = 1

    def __post_init__(self):
        self.ranks = tuple(sorted(set(int(k) for k in self.ranks)))
        if not self.ranks or min(self.ranks) < 1:
            raise ValueError("need at least one positive candidate rank")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.repeats < 1:
            raise ValueError("need at least 1 repeat")


@dataclass
class CvResult:
    """Held-out log-likelihoods keyed by (repeat, rank, fold).

    ``totals`` sums each rank over the folds of every repeat; folds that
    failed are absent from ``table`` and from every rank's total.
    """

    table: dict
    totals: dict
    repeat_totals: dict
    selected_rank: int
    invalid_ranks: tuple = ()
    dropped: tuple = ()


def heldout_loglik(A, model: FactorModel, fold) -> float:
    fold = np.asarray(fold, dtype=np.intp).reshape(-1, 2)
    if fold.size == 0:
        return 0.0
    X = A.values if isinstance(A, CountMatrix) else np.asarray(A)
    rows, cols = fold[:, 0], fold[:, 1]
    sub = X[rows, cols].astype(float)
    # evaluate only the held-out cells rather than the whole matrix
    eta = np.einsum("ik,ik->i", model.U[rows], model.V[cols])
    return float(np.sum(zip_logpmf(sub, eta, model.tau, model.N[rows])))


def cv_fold_loglik(A, kappa: int, fold, opts: FitOptions | None = None) -> float:
    """Fit rank ``kappa`` with the fold's cells masked and score those cells."""
    fold = np.asarray(fold, dtype=np.intp).reshape(-1, 2)
    if fold.size == 0:
        return 0.0
    model = zipfa_fit(A, kappa, opts, held_out=fold)
    if not model.loglik_trace:
        raise FloatingPointError("fit aborted before completing an iteration")
    return heldout_loglik(A, model, fold)


def _fold_value(A, kappa, fold, opts):
    for attempt, o in enumerate((opts, replace(opts, warm_start=False))):
        try:
            v = cv_fold_loglik(A, kappa, fold, o)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            logger.warning("rank %d fold failed (attempt %d): %s", kappa, attempt + 1, exc)
            continue
        if np.isfinite(v):
            return v
    return -np.inf


def _run_cell(args):
    A, kappa, fold, opts = args
    return _fold_value(A, kappa, fold, opts)


def select_rank(A, config: CvConfig, workers: int = 1) -> CvResult:
    X = A.values if isinstance(A, CountMatrix) else np.asarray(A)
    n, m = X.shape
    if max(config.ranks) > min(n, m):
        raise ValueError(f"candidate rank {max(config.ranks)} exceeds min(n, m) = {min(n, m)}")
    partitions = [
        partition_indices(n, m, config.folds, np.random.SeedSequence(config.seed, spawn_key=(rep,)))
        for rep in range(config.repeats)
    ]
    keys = [(rep, k, t) for rep in range(config.repeats) for k in config.ranks
            for t in range(config.folds)]
    if len(config.ranks) == 1:
        # nothing to compare; skip the fits
        k = config.ranks[0]
        return CvResult({}, {k: float("nan")}, {}, k)
    tasks = [(X, k, partitions[rep][t], config.options) for rep, k, t in keys]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            values = list(ex.map(_run_cell, tasks))
    else:
        values = [_run_cell(t) for t in tasks]
    raw = dict(zip(keys, values))

    invalid = tuple(k for k in config.ranks
                    if all(not np.isfinite(raw[(rep, k, t)])
                           for rep in range(config.repeats) for t in range(config.folds)))
    valid = [k for k in config.ranks if k not in invalid]
    if not valid:
        raise SelectionError("every candidate rank failed on every fold")
    dropped = tuple(sorted({(rep, t) for rep, k, t in keys
                            if k in valid and not np.isfinite(raw[(rep, k, t)])}))
    table = {key: v for key, v in raw.items() if key[1] in valid and key[::2] not in dropped}
    repeat_totals = {(rep, k): sum(v for (r, kk, _), v in table.items() if r == rep and kk == k)
                     for rep in range(config.repeats) for k in valid}
    totals = {k: sum(repeat_totals[(rep, k)] for rep in range(config.repeats)) for k in valid}
    best = max(totals.values())
    selected = min(k for k in valid if totals[k] == best)
    return CvResult(table, totals, repeat_totals, selected, invalid, dropped)


def write_cv_csv(result: CvResult, folds: int, out) -> None:
    """Fold rows ``rank,fold,heldout_loglik`` then, after a blank line, the
    summary ``rank,total_loglik,selected`` with one row per rank and repeat.

    With repeats the fold column keeps counting across repeats (repeat r,
    fold t is written as r * folds + t). Invalid ranks appear in the
    summary with a total of -inf.
    """
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["rank", "fold", "heldout_loglik"])
    for (rep, k, t), v in sorted(result.table.items(), key=lambda kv: (kv[0][1], kv[0][0], kv[0][2])):
        w.writerow([k, rep * folds + t, repr(float(v))])
    w.writerow([])
    w.writerow(["rank", "total_loglik", "selected"])
    repeats = sorted({rep for rep, _ in result.repeat_totals}) or [0]
    for k in sorted(set(result.totals) | set(result.invalid_ranks)):
        for rep in repeats:
            v = result.repeat_totals.get((rep, k), result.totals.get(k, -np.inf))
            if k in result.invalid_ranks:
                v = -np.inf
            w.writerow([k, repr(float(v)), str(k == result.selected_rank).lower()])


def read_cv_csv(path):
    """Return (fold_rows, summary_rows) as lists of tuples."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    split = rows.index([])
    folds = [(int(r[0]), int(r[1]), float(r[2])) for r in rows[1:split]]
    summary = [(int(r[0]), float(r[1]), r[2] == "true") for r in rows[split + 2:]]
    return folds, summary
