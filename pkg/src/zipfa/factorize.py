"""Zero-inflated Poisson factor analysis: alternating stacked ZIP regressions
for loadings and scores, with an SVD pass after each sweep."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import CountMatrix, impute_log, observed_mask, relative_library_size
from .linalg import absorb_scale, truncated_svd
from .zipreg import (
    EM_MAX_ITER,
    EM_TOL,
    LM_RHO,
    BlockDesign,
    NoConvergenceError,
    ZipRegProblem,
    fit_zip_regression,
    zip_logpmf,
)

logger = logging.getLogger(__name__)


@dataclass
class FitOptions:
    max_outer_iterations: int = 100
    rel_loglik_tol: float = 1e-3
    em_max_iter: int = EM_MAX_ITER
    em_tol: float = EM_TOL
    rho: float = LM_RHO
    warm_start: bool = True

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be positive")
        if not (self.rel_loglik_tol > 0 and self.em_tol > 0 and self.rho > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class FactorModel:
    U: np.ndarray
    V: np.ndarray
    tau: float
    N: np.ndarray
    loglik_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def log_rate(self) -> np.ndarray:
        return self.U @ self.V.T

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else float("nan")

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            # json has no nan; an undefined tau is stored as null
            "tau": float(self.tau) if np.isfinite(self.tau) else None,
            "N": [float(v) for v in self.N],
            "U": [[float(v) for v in row] for row in self.U],
            "V": [[float(v) for v in row] for row in self.V],
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FactorModel":
        K = int(doc["rank"])
        U = np.array(doc["U"], dtype=float).reshape(-1, K)
        V = np.array(doc["V"], dtype=float).reshape(-1, K)
        tau = float("nan") if doc["tau"] is None else float(doc["tau"])
        return cls(U, V, tau, np.array(doc["N"], dtype=float),
                   list(doc.get("loglik_trace", [])), int(doc.get("iterations", 0)),
                   bool(doc["converged"]))

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips doubles exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FactorModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _values(A) -> np.ndarray:
    return A.values if isinstance(A, CountMatrix) else np.asarray(A)


def build_loading_problem(A, U, N, observed=None) -> ZipRegProblem:
    """Stack the columns of A into one regression on block-diag(U, ..., U).

    Coefficients come out as the m loading rows concatenated.
    """
    X = _values(A)
    n, m = X.shape
    design = BlockDesign(np.tile(U, (m, 1)), np.repeat(np.arange(m), n), m)
    prob = ZipRegProblem(X.T.ravel(), design, np.tile(N, m))
    if observed is not None:
        prob = prob.subset(np.asarray(observed).T.ravel())
    return prob


def build_score_problem(A, V, N, observed=None) -> ZipRegProblem:
    """Stack the rows of A into one regression on block-diag(V, ..., V)."""
    X = _values(A)
    n, m = X.shape
    design = BlockDesign(np.tile(V, (n, 1)), np.repeat(np.arange(n), m), n)
    prob = ZipRegProblem(X.ravel(), design, np.repeat(N, m))
    if observed is not None:
        prob = prob.subset(np.asarray(observed).ravel())
    return prob


def cell_loglik(A, U, V, tau, N) -> np.ndarray:
    """Matrix of per-cell ZIP log-likelihoods."""
    X = _values(A).astype(float)
    N = np.asarray(N, dtype=float).reshape(-1, 1)
    return zip_logpmf(X, np.asarray(U) @ np.asarray(V).T, tau, N)


def total_loglik(A, U, V, tau, N, held_out=None) -> float:
    ll = cell_loglik(A, U, V, tau, N)
    if held_out is not None:
        ll = ll[observed_mask(ll.shape, held_out)]
    return float(np.sum(ll))


def reorthogonalize(U, V):
    """SVD of U V' with the singular values absorbed into the scores."""
    return absorb_scale(truncated_svd(U @ V.T, U.shape[1]))


def zipfa_fit(A, K: int, opts: FitOptions | None = None, held_out=None,
              offsets=None) -> FactorModel:
    """Fit a rank-K zero-inflated Poisson factor model to the count matrix A.

    Cells listed in ``held_out`` (row, col pairs) are ignored everywhere:
    in the offsets, the initial imputation, the regressions and the
    likelihood trace. ``offsets`` replaces the relative library sizes when
    the per-sample scaling is known.
    """
    opts = opts or FitOptions()
    X = _values(A)
    n, m = X.shape
    if not 1 <= K <= min(n, m):
        raise ValueError(f"rank {K} out of range for a {n}x{m} matrix")
    obs = observed_mask(X.shape, held_out) if held_out is not None and len(held_out) else None
    if offsets is None:
        N = relative_library_size(X, held_out)
    else:
        N = np.broadcast_to(np.asarray(offsets, dtype=float), (n,)).copy()
        if np.any(N <= 0):
            raise ValueError("offsets must be positive")
    U, V = absorb_scale(truncated_svd(impute_log(X, held_out), K))
    tau = None
    trace = []
    converged = False
    it = 0
    for it in range(1, opts.max_outer_iterations + 1):
        try:
            loading = build_loading_problem(X, U, N, obs)
            fit = fit_zip_regression(
                loading, None if tau is None or not opts.warm_start else (V.ravel(), tau),
                max_iter=opts.em_max_iter, tol=opts.em_tol, rho=opts.rho)
            V_new, tau = fit.beta.reshape(m, K), fit.tau
            score = build_score_problem(X, V_new, N, obs)
            fit = fit_zip_regression(
                score, (U.ravel(), tau) if opts.warm_start else None,
                max_iter=opts.em_max_iter, tol=opts.em_tol, rho=opts.rho)
            U_new, tau = fit.beta.reshape(n, K), fit.tau
        except (FloatingPointError, np.linalg.LinAlgError, NoConvergenceError, ValueError) as exc:
            logger.warning("outer iteration %d aborted: %s", it, exc)
            it -= 1
            break
        U, V = reorthogonalize(U_new, V_new)
        ll = total_loglik(X, U, V, tau, N, held_out)
        logger.debug("iteration %d: loglik %.6f tau %.4f", it, ll, tau)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < opts.rel_loglik_tol * abs(trace[-2]):
            converged = True
            break
    return FactorModel(U, V, float(tau) if tau is not None else float("nan"), N,
                       trace, it, converged)


def predict_zero_probability(model: FactorModel) -> np.ndarray:
    """Total probability of a zero count in each cell (structural plus Poisson)."""
    lam_log = model.log_rate
    p = expit(-model.tau * lam_log)
    return p + (1 - p) * np.exp(-model.N[:, None] * np.exp(lam_log))
