"""Zero-inflated Poisson regression with a logistic link tying the zero
probability to the Poisson rate: logit(p_i) = -tau * x_i'beta.

Fitted by EM. The E-step is closed form; the M-step minimises the expected
complete-data negative log-likelihood over (beta, tau) jointly with a
Levenberg-Marquardt iteration that uses the analytic Hessian.

Designs are either dense ``(n_obs, p)`` arrays or :class:`BlockDesign`
instances, the block-diagonal layout produced when several regressions share
a single tau. All linear algebra below dispatches on that type so the stacked
problems never materialise their (mostly zero) design matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit, gammaln, log_expit, logit

logger = logging.getLogger(__name__)

ETA_CLAMP = 30.0
EM_MAX_ITER = 500
EM_TOL = 1e-3
LM_MAX_ITER = 200
LM_GRAD_TOL = 1e-8
LM_RHO = 1e-5
LM_DELTA_MIN = 1e-3
GLM_MAX_ITER = 100


class NoConvergenceError(RuntimeError):
    pass


class BlockDesign:
    """Block-diagonal design matrix stored compactly.

    Observation ``i`` has covariate vector ``rows[i]`` (length K) acting on
    coefficient block ``group[i]``; the dense equivalent has shape
    ``(n_obs, n_groups * K)``.
    """

    def __init__(self, rows, group, n_groups: int):
        self.rows = np.asarray(rows, dtype=float)
        self.group = np.asarray(group, dtype=np.intp)
        self.n_groups = int(n_groups)
        if self.rows.ndim != 2 or self.group.shape != (self.rows.shape[0],):
            raise ValueError("rows must be (n_obs, K) and group (n_obs,)")

    @property
    def block_size(self) -> int:
        return self.rows.shape[1]

    @property
    def shape(self):
        return (self.rows.shape[0], self.n_groups * self.block_size)

    def dot(self, beta):
        b = np.asarray(beta).reshape(self.n_groups, self.block_size)
        return np.einsum("ik,ik->i", self.rows, b[self.group])

    def tdot(self, w):
        cols = [
            np.bincount(self.group, weights=w * self.rows[:, k], minlength=self.n_groups)
            for k in range(self.block_size)
        ]
        return np.column_stack(cols).ravel()

    def gram(self, r):
        """Per-block X_g' diag(r) X_g, shape (n_groups, K, K)."""
        K = self.block_size
        out = np.empty((self.n_groups, K, K))
        for a in range(K):
            wa = r * self.rows[:, a]
            for b in range(a, K):
                out[:, a, b] = np.bincount(
                    self.group, weights=wa * self.rows[:, b], minlength=self.n_groups
                )
                out[:, b, a] = out[:, a, b]
        return out

    def subset(self, keep) -> "BlockDesign":
        return BlockDesign(self.rows[keep], self.group[keep], self.n_groups)

    def toarray(self):
        n, p = self.shape
        K = self.block_size
        X = np.zeros((n, p))
        cols = self.group[:, None] * K + np.arange(K)[None, :]
        X[np.arange(n)[:, None], cols] = self.rows
        return X


def _dot(X, beta):
    return X.dot(beta) if isinstance(X, BlockDesign) else X @ beta


def _tdot(X, w):
    return X.tdot(w) if isinstance(X, BlockDesign) else X.T @ w


def _gram(X, r):
    return X.gram(r) if isinstance(X, BlockDesign) else (X.T * r) @ X


def _gram_matvec(B, v):
    if B.ndim == 3:
        G, K, _ = B.shape
        return np.einsum("gab,gb->ga", B, v.reshape(G, K)).ravel()
    return B @ v


def _gram_solver(B, shift=0.0):
    """Cholesky solver for B + shift*I, or None when that is not positive definite."""
    try:
        if B.ndim == 3:
            K = B.shape[1]
            L = np.linalg.cholesky(B + shift * np.eye(K))
            G = B.shape[0]

            def solve(rhs):
                rhs = np.asarray(rhs)
                r = rhs.reshape(G, K, -1)
                y = np.linalg.solve(L, r)
                x = np.linalg.solve(np.swapaxes(L, 1, 2), y)
                return x.reshape(rhs.shape)

            return solve
        c = scipy.linalg.cho_factor(B + shift * np.eye(B.shape[0]), lower=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        return None
    return lambda rhs: scipy.linalg.cho_solve(c, rhs)


@dataclass
class Hessian:
    """Symmetric bordered matrix [[bb, bt], [bt', tt]] over (beta, tau).

    ``bb`` is dense (p, p) or block-diagonal (G, K, K).
    """

    bb: np.ndarray
    bt: np.ndarray
    tt: float

    def toarray(self):
        if self.bb.ndim == 3:
            bb = scipy.linalg.block_diag(*self.bb)
        else:
            bb = self.bb
        p = bb.shape[0]
        H = np.empty((p + 1, p + 1))
        H[:p, :p] = bb
        H[:p, p] = H[p, :p] = self.bt
        H[p, p] = self.tt
        return H

    def matvec(self, v):
        hb, ht = v[:-1], v[-1]
        top = _gram_matvec(self.bb, hb) + self.bt * ht
        return np.append(top, self.bt @ hb + self.tt * ht)

    def solver(self, mu: float):
        """Solver for (H + mu*I) h = rhs via the Schur complement on tau,
        or None if H + mu*I is not positive definite."""
        solve_bb = _gram_solver(self.bb, mu)
        if solve_bb is None:
            return None
        w = solve_bb(self.bt)
        schur = self.tt + mu - self.bt @ w
        if not schur > 0:
            return None

        def solve(rhs):
            rb, rt = rhs[:-1], rhs[-1]
            ht = (rt - w @ rb) / schur
            hb = solve_bb(rb) - w * ht
            return np.append(hb, ht)

        return solve


@dataclass
class ZipRegProblem:
    response: np.ndarray
    design: object
    offset: np.ndarray

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        if not isinstance(self.design, BlockDesign):
            self.design = np.asarray(self.design, dtype=float)
            if self.design.ndim == 1:
                self.design = self.design[:, None]
        n = self.response.shape[0]
        if self.design.shape[0] != n or self.offset.shape != (n,):
            raise ValueError("response, design and offset lengths disagree")
        if np.any(self.offset <= 0):
            raise ValueError("offsets must be positive")
        if np.any(self.response < 0):
            raise ValueError("responses must be non-negative")

    @property
    def n_obs(self) -> int:
        return self.response.shape[0]

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]

    def subset(self, keep) -> "ZipRegProblem":
        X = self.design.subset(keep) if isinstance(self.design, BlockDesign) else self.design[keep]
        return ZipRegProblem(self.response[keep], X, self.offset[keep])

    def check_rank(self):
        X = self.design
        if isinstance(X, BlockDesign):
            B = X.gram(np.ones(self.n_obs))
            ranks = np.linalg.matrix_rank(B) if len(B) else np.array([])
            bad = np.flatnonzero(ranks < X.block_size)
            if bad.size:
                raise ValueError(f"design blocks {bad[:10].tolist()} are rank deficient")
        elif np.linalg.matrix_rank(X) < X.shape[1]:
            raise ValueError("design matrix does not have full column rank")


@dataclass
class ZipRegFit:
    beta: np.ndarray
    tau: float
    z: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    loglik_trace: list = field(default_factory=list)
    cold_start: bool = False


@dataclass
class LmState:
    mu: float
    rho: float = LM_RHO
    delta_threshold: float = LM_DELTA_MIN


def _linear_predictor(beta, X):
    eta = _dot(X, beta)
    inside = np.abs(eta) < ETA_CLAMP
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP), inside


# ---------------------------------------------------------------- likelihood


def zip_cell_likelihood(a, lam, p, N=1.0):
    """P(A = a) under the zero-inflated Poisson with zero mass p and rate N*lam."""
    a = np.asarray(a, dtype=float)
    rate = np.asarray(N, dtype=float) * lam
    pois = np.exp(a * np.log(rate) - rate - gammaln(a + 1))
    return p * (a == 0) + (1 - p) * pois


def zip_cell_loglik(a, lam, p, N=1.0):
    """Log of :func:`zip_cell_likelihood`, evaluated in log space."""
    a = np.asarray(a, dtype=float)
    rate = np.asarray(N, dtype=float) * np.asarray(lam, dtype=float)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        log_p, log_q = np.log(p), np.log1p(-p)
    pois = a * np.log(rate) - rate - gammaln(a + 1)
    return np.where(a == 0, np.logaddexp(log_p, log_q + pois), log_q + pois)


def zip_logpmf(y, eta, tau, offset):
    """Per-observation ZIP log-likelihood with ln(lambda) = eta and
    logit(p) = -tau * eta. ``eta`` is clamped to +-ETA_CLAMP."""
    y = np.asarray(y, dtype=float)
    eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    log_p = log_expit(-tau * eta)
    log_q = log_expit(tau * eta)
    rate = offset * np.exp(eta)
    pois = y * (eta + np.log(offset)) - rate - gammaln(y + 1)
    return np.where(y == 0, np.logaddexp(log_p, log_q + pois), log_q + pois)


def observed_loglik(beta, tau, problem: ZipRegProblem) -> float:
    eta = _dot(problem.design, beta)
    return float(np.sum(zip_logpmf(problem.response, eta, tau, problem.offset)))


def e_step(beta, tau, X, y, m):
    """Posterior probability that each observation is a structural zero."""
    eta, _ = _linear_predictor(beta, X)
    z = expit(-(tau * eta - m * np.exp(eta)))
    return np.where(np.asarray(y) == 0, z, 0.0)


def joint_neg_loglik(beta, tau, z, X, y, m, hessian=True):
    """Expected complete-data negative log-likelihood Q(beta, tau) with its
    gradient (beta first, tau last) and Hessian.

    The Hessian is a :class:`Hessian`; call ``.toarray()`` for a dense matrix.
    """
    y = np.asarray(y, dtype=float)
    eta, inside = _linear_predictor(beta, X)
    te = tau * eta
    log_p, log_q = log_expit(-te), log_expit(te)
    rate = m * np.exp(eta)
    loglik_terms = z * log_p + (1 - z) * (
        y * (eta + np.log(m)) - rate - gammaln(y + 1) + log_q
    )
    value = -float(np.sum(loglik_terms))

    W = expit(-te)
    ss = W * expit(te)
    deta = (-tau * z + tau * W + (1 - z) * (y - rate)) * inside
    grad = np.append(-_tdot(X, deta), -np.sum((W - z) * eta))
    if not np.all(np.isfinite(grad)) or not np.isfinite(value):
        bad = np.flatnonzero(~np.isfinite(deta) | ~np.isfinite(loglik_terms))
        raise FloatingPointError(
            f"non-finite objective at observation {int(bad[0]) if bad.size else -1}"
        )
    if not hessian:
        return value, grad, None
    curv = (tau**2 * ss + (1 - z) * rate) * inside
    cross = (W - te * ss - z) * inside
    H = Hessian(_gram(X, curv), -_tdot(X, cross), float(np.sum(eta**2 * ss)))
    return value, grad, H


# ------------------------------------------------------------ LM machinery


def initial_damping(grad, rho=LM_RHO) -> float:
    """rho times the largest entry of J J', floored so doubling can grow it."""
    return max(rho * float(np.max(grad**2)), 1e-12)


def damping_update(mu: float, delta: float, threshold=LM_DELTA_MIN):
    """Return (new_mu, accepted) for gain ratio ``delta``."""
    if delta > threshold:
        return mu * max(1 / 3, 1 - (2 * delta - 1) ** 3), True
    return 2 * mu, False


def gain_ratio(q_old, q_new, h, grad, damped_h):
    """Actual over predicted decrease of Q; ``damped_h`` is (H + mu I) h."""
    predicted = h @ grad + 0.5 * h @ damped_h
    if predicted == 0:
        return 0.0
    return -(q_old - q_new) / predicted


def _damped_direction(H: Hessian, grad, mu):
    solve = H.solver(mu)
    while solve is None:
        mu *= 2
        if not np.isfinite(mu) or mu > 1e300:
            raise FloatingPointError("damping diverged while seeking a positive definite system")
        solve = H.solver(mu)
    h = solve(-grad)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("linear solve failed on a positive definite system")
    return h, mu


def _lm_iterate(state: LmState, x, current, objective):
    """One LM trial step from ``x``; ``current`` is (Q, J, H) at ``x``."""
    q, grad, H = current
    h, mu = _damped_direction(H, grad, state.mu)
    x_new = x + h
    try:
        trial = objective(x_new)
    except FloatingPointError:
        trial = None
    if trial is None or not np.isfinite(trial[0]):
        return x, LmState(2 * mu, state.rho, state.delta_threshold), False, current, h
    damped_h = H.matvec(h) + mu * h
    delta = gain_ratio(q, trial[0], h, grad, damped_h)
    new_mu, accepted = damping_update(mu, delta, state.delta_threshold)
    new_state = LmState(new_mu, state.rho, state.delta_threshold)
    if accepted:
        return x_new, new_state, True, trial, h
    return x, new_state, False, current, h


def lm_step(state: LmState, beta, tau, z, problem: ZipRegProblem):
    """A single Levenberg-Marquardt trial step on Q for fixed ``z``.

    Returns (beta', tau', state', accepted).
    """
    objective = _objective(problem, z)
    x = np.append(beta, tau)
    x_new, new_state, accepted, _, _ = _lm_iterate(state, x, objective(x), objective)
    return x_new[:-1], float(x_new[-1]), new_state, accepted


def _objective(problem, z):
    X, y, m = problem.design, problem.response, problem.offset
    return lambda x: joint_neg_loglik(x[:-1], x[-1], z, X, y, m)


def m_step(beta, tau, z, problem: ZipRegProblem, rho=LM_RHO, max_iter=LM_MAX_ITER):
    """Minimise Q(beta, tau) for fixed responsibilities; returns (beta, tau, n_steps)."""
    objective = _objective(problem, z)
    x = np.append(beta, tau)
    current = objective(x)
    state = LmState(initial_damping(current[1], rho), rho)
    steps = 0
    for steps in range(1, max_iter + 1):
        if np.max(np.abs(current[1])) < LM_GRAD_TOL:
            break
        x, state, accepted, current, h = _lm_iterate(state, x, current, objective)
        if np.linalg.norm(h) <= 1e-12 * (np.linalg.norm(x) + 1e-12):
            break
    return x[:-1], float(x[-1]), steps


# ------------------------------------------------------------ initial values


def fit_poisson_glm(y, X, m, max_iter=GLM_MAX_ITER):
    """Poisson regression with log link and log(m) offset by damped Newton."""
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    n = y.shape[0]
    solve0 = _gram_solver(_gram(X, np.ones(n)), 1e-10)
    if solve0 is None:
        raise ValueError("design matrix does not have full column rank")
    beta = solve0(_tdot(X, np.log((y + 0.5) / m)))

    def loglik(b):
        eta, inside = _linear_predictor(b, X)
        rate = m * np.exp(eta)
        return float(np.sum(y * eta - rate)), eta, inside, rate

    ll, eta, inside, rate = loglik(beta)
    tol = 1e-8 * n
    for _ in range(max_iter):
        score = _tdot(X, (y - rate) * inside)
        if np.max(np.abs(score)) < tol:
            return beta
        solve = _gram_solver(_gram(X, rate * inside), 0.0)
        if solve is None:
            solve = _gram_solver(_gram(X, rate * inside), 1e-8)
        if solve is None:
            break
        step = solve(score)
        t = 1.0
        for _ in range(50):
            cand = loglik(beta + t * step)
            if cand[0] >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        else:
            break
        beta = beta + t * step
        ll, eta, inside, rate = cand
    score = _tdot(X, (y - rate) * inside)
    if np.max(np.abs(score)) < tol:
        return beta
    raise NoConvergenceError("Poisson regression did not converge")


def init_tau(beta, X, y):
    """Starting shape parameter from the naive zero fraction.

    Returns (tau0, degenerate); degenerate fits fall back to tau0 = 1.
    """
    y = np.asarray(y)
    pbar = float(np.mean(y == 0))
    denom = float(np.sum(_dot(X, beta)))
    if pbar <= 0 or pbar >= 1 or abs(denom) < 1e-12:
        return 1.0, True
    return -y.shape[0] * float(logit(pbar)) / denom, False


# ---------------------------------------------------------------- EM driver


def _em(problem: ZipRegProblem, beta, tau, max_iter, tol, rho):
    X, y, m = problem.design, problem.response, problem.offset
    trace = [observed_loglik(beta, tau, problem)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = e_step(beta, tau, X, y, m)
        beta_new, tau_new, _ = m_step(beta, tau, z, problem, rho=rho)
        ll = observed_loglik(beta_new, tau_new, problem)
        if not np.isfinite(ll) or not np.isfinite(tau_new):
            raise FloatingPointError("EM produced a non-finite likelihood")
        change = np.linalg.norm(beta_new - beta) / max(np.linalg.norm(beta), 1.0)
        beta, tau = beta_new, tau_new
        trace.append(ll)
        if change < tol:
            converged = True
            break
    z = e_step(beta, tau, X, y, m)
    return ZipRegFit(beta, float(tau), z, trace[-1], it, converged, trace)


def cold_start(problem: ZipRegProblem):
    beta0 = fit_poisson_glm(problem.response, problem.design, problem.offset)
    tau0, degenerate = init_tau(beta0, problem.design, problem.response)
    if degenerate:
        logger.debug("initial tau fell back to 1")
    return beta0, tau0


def fit_zip_regression(problem: ZipRegProblem, init=None, max_iter=EM_MAX_ITER,
                       tol=EM_TOL, rho=LM_RHO, check_rank=True) -> ZipRegFit:
    """Fit the linked ZIP regression by EM.

    ``init`` is an optional (beta, tau) warm start. It is used first; the
    Poisson-GLM cold start takes over only if the warm start breaks down
    numerically.
    """
    if check_rank:
        problem.check_rank()
    if init is not None:
        beta0 = np.asarray(init[0], dtype=float).ravel()
        if beta0.shape[0] != problem.n_coef:
            raise ValueError("initial beta has the wrong length")
        try:
            return _em(problem, beta0, float(init[1]), max_iter, tol, rho)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.info("warm start failed (%s); retrying from a cold start", exc)
    beta0, tau0 = cold_start(problem)
    fit = _em(problem, beta0, tau0, max_iter, tol, rho)
    fit.cold_start = True
    return fit
