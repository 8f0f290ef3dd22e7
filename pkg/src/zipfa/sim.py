"""Synthetic benchmark data, evaluation metrics and the log-SVD baseline."""

from __future__ import annotations

import csv
import itertools
import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.optimize import least_squares
from scipy.special import expit

from .data import CountMatrix
from .factorize import FitOptions, zipfa_fit
from .linalg import absorb_scale, truncated_svd

logger = logging.getLogger(__name__)

SETTINGS = ("S1", "S2", "S3", "S4", "S5", "S6_1", "S6_2")
DISPERSION = {"S6_1": (0.5, 1.0), "S6_2": (1.0, 3.0)}
S5_HALF_WIDTH = 0.10
CALIBRATION_TOL = 0.005
MEANLOG_THRESHOLD = 2.5

# 1-based inclusive row ranges on the 200 x 3 score and 100 x 3 loading
# templates, with the value each block takes before jitter
_U_BLOCKS = [((36, 80), 0, 2.0), ((81, 140), 0, 1.7), ((1, 35), 1, 1.8),
             ((36, 80), 1, 0.9), ((36, 200), 2, 1.7)]
_V_BLOCKS = [((61, 100), 0, 1.7), ((36, 60), 1, 1.7), ((61, 100), 1, 1.0),
             ((1, 25), 2, 1.7), ((26, 100), 2, 0.9)]
_SAMPLE_GROUP_ENDS = (35, 80, 140, 200)
_TAXON_GROUP_ENDS = (25, 35, 60, 100)


class CalibrationError(ValueError):
    pass


def parse_setting(s) -> str:
    """Accept "1", "6.1", "S6_1", ... and return the canonical name."""
    s = str(s).strip().upper().replace(".", "_")
    if not s.startswith("S"):
        s = "S" + s
    if s not in SETTINGS:
        raise ValueError(f"unknown setting {s!r}; choose from {', '.join(SETTINGS)}")
    return s


def setting_label(setting: str) -> str:
    return setting[1:].replace("_", ".")


def derive_rng(root, label: str, index: int = 0) -> np.random.Generator:
    """Independent stream keyed by (root seed, label, index)."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=(key, int(index))))


def _scaled_bounds(lo, hi, total, template):
    # map 1-based inclusive template ranges onto a matrix with `total` rows
    a = int(round((lo - 1) * total / template))
    b = int(round(hi * total / template))
    return a, b


def _template(blocks, ends, rows, template, rng, sd):
    M = np.zeros((rows, 3))
    for (lo, hi), col, val in blocks:
        a, b = _scaled_bounds(lo, hi, rows, template)
        M[a:b, col] = val
    M += rng.normal(0.0, sd, size=M.shape)
    groups = np.zeros(rows, dtype=int)
    start = 0
    for g, end in enumerate(ends, start=1):
        _, b = _scaled_bounds(1, end, rows, template)
        groups[start:b] = g
        start = b
    return M, groups


def generate_truth(seed, n=200, m=100):
    """Block-structured rank-3 scores and loadings with 4 sample and 4 taxon groups.

    Returns (U, V, sample_groups, taxon_groups).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U, sg = _template(_U_BLOCKS, _SAMPLE_GROUP_ENDS, n, 200, rng, 0.06)
    V, tg = _template(_V_BLOCKS, _TAXON_GROUP_ENDS, m, 100, rng, 0.05)
    return U, V, sg, tg


def zero_probability_matrix(Lambda, setting, tau, rng=None):
    """Structural-zero probabilities for log-rates ``Lambda`` under a setting."""
    setting = parse_setting(setting)
    L = np.asarray(Lambda, dtype=float)
    if setting == "S1":
        return expit(-tau * L)
    if setting == "S2":
        return np.exp(-np.exp(tau * L))
    if setting == "S3":
        return -np.expm1(-np.exp(-tau * L))
    if setting == "S4":
        if tau < 0:
            raise ValueError("setting 4 needs tau >= 0")
        return np.exp(-tau * np.exp(L))
    if setting == "S5":
        if not S5_HALF_WIDTH <= tau <= 1 - S5_HALF_WIDTH:
            raise ValueError(f"setting 5 needs tau in [0.10, 0.90], got {tau}")
        rng = rng if rng is not None else np.random.default_rng()
        pj = rng.uniform(tau - S5_HALF_WIDTH, tau + S5_HALF_WIDTH, size=L.shape[1])
        return np.broadcast_to(pj, L.shape).copy()
    if tau < 0:
        raise ValueError("settings 6.x need tau >= 0")
    return np.exp(-tau * np.exp(-L))


_BRACKETS = {"S1": (-50.0, 50.0), "S2": (-50.0, 50.0), "S3": (-50.0, 50.0),
             "S4": (0.0, 1e6), "S6_1": (0.0, 1e8), "S6_2": (0.0, 1e8)}


def calibrate_tau(setting, Lambda, target_zero_fraction, seed=None):
    """Find tau so that the mean structural-zero probability hits the target."""
    setting = parse_setting(setting)
    target = float(target_zero_fraction)
    if setting == "S5":
        if not S5_HALF_WIDTH <= target <= 1 - S5_HALF_WIDTH:
            raise CalibrationError(
                f"setting 5 can reach zero fractions in [0.10, 0.90], not {target}")
        if seed is None:
            return target
        # p_j = tau + u_j with u_j ~ U(-h, h); given the stream that will draw
        # the u_j, shift tau so the realized column mean hits the target
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        u = rng.uniform(-S5_HALF_WIDTH, S5_HALF_WIDTH, size=np.shape(Lambda)[1])
        tau = target - float(np.mean(u))
        if not S5_HALF_WIDTH <= tau <= 1 - S5_HALF_WIDTH:
            raise CalibrationError(f"setting 5 target {target} pushes tau outside [0.10, 0.90]")
        return tau

    def mean_p(t):
        return float(np.mean(zero_probability_matrix(Lambda, setting, t)))

    lo, hi = _BRACKETS[setting]
    f_lo, f_hi = mean_p(lo) - target, mean_p(hi) - target
    if f_lo * f_hi > 0:
        lo_p, hi_p = sorted((f_lo + target, f_hi + target))
        raise CalibrationError(
            f"target {target} unattainable for setting {setting_label(setting)}; "
            f"reachable range is about [{lo_p:.4f}, {hi_p:.4f}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = mean_p(mid) - target
        if abs(f_mid) < 1e-10 or hi - lo < 1e-14 * max(1.0, abs(mid)):
            break
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    if abs(mean_p(mid) - target) >= CALIBRATION_TOL:
        raise CalibrationError(f"calibration stalled at tau={mid}")
    return mid


@dataclass
class SimulationSpec:
    setting: str = "S1"
    target_zero_fraction: float | None = 0.2
    tau: float | None = None
    seed: int = 0
    n: int = 200
    m: int = 100

    def __post_init__(self):
        self.setting = parse_setting(self.setting)
        if (self.target_zero_fraction is None) == (self.tau is None):
            raise ValueError("give exactly one of target_zero_fraction or tau")
        if self.target_zero_fraction is not None and not 0 <= self.target_zero_fraction < 1:
            raise ValueError("target_zero_fraction must be in [0, 1)")


@dataclass
class SimulatedDataset:
    A: CountMatrix
    Lambda_true: np.ndarray
    U_true: np.ndarray
    V_true: np.ndarray
    sample_groups: np.ndarray
    taxon_groups: np.ndarray
    inflation_mask: np.ndarray
    tau: float | None
    spec: SimulationSpec = field(repr=False, default=None)

    def truth_dict(self) -> dict:
        return {
            "setting": setting_label(self.spec.setting) if self.spec else None,
            "tau": self.tau,
            "Lambda": self.Lambda_true.tolist(),
            "U": self.U_true.tolist(),
            "V": self.V_true.tolist(),
            "sample_groups": self.sample_groups.tolist(),
            "taxon_groups": self.taxon_groups.tolist(),
            "inflated_cells": np.argwhere(self.inflation_mask).tolist(),
        }


def generate_counts(spec: SimulationSpec) -> SimulatedDataset:
    U, V, sg, tg = generate_truth(derive_rng(spec.seed, "truth"), spec.n, spec.m)
    Lam = U @ V.T
    rate = np.exp(Lam)
    count_rng = derive_rng(spec.seed, "counts")
    if spec.setting in DISPERSION:
        lo, hi = DISPERSION[spec.setting]
        phi = derive_rng(spec.seed, "dispersion").uniform(lo, hi, size=spec.m)
        # gamma-Poisson mixture: mean rate, variance rate + rate^2 * phi
        rate = count_rng.gamma(1.0 / phi[None, :], phi[None, :] * rate)
    A0 = count_rng.poisson(rate)

    if spec.target_zero_fraction == 0:
        tau, mask = None, np.zeros(Lam.shape, dtype=bool)
    else:
        if spec.tau is not None:
            tau = float(spec.tau)
        else:
            tau = calibrate_tau(spec.setting, Lam, spec.target_zero_fraction,
                                seed=derive_rng(spec.seed, "p_j"))
        P = zero_probability_matrix(Lam, spec.setting, tau, derive_rng(spec.seed, "p_j"))
        mask = derive_rng(spec.seed, "inflation").random(Lam.shape) < P
    A = np.where(mask, 0, A0)
    return SimulatedDataset(CountMatrix(A), Lam, U, V, sg, tg, mask, tau, spec)


# ------------------------------------------------------------------ metrics


def l2_loss(U_hat, V_hat, Lambda_true, row_offset=None) -> float:
    """Squared Frobenius distance between U_hat V_hat' (+ row offsets) and the truth."""
    est = np.asarray(U_hat) @ np.asarray(V_hat).T
    if row_offset is not None:
        est = est + np.asarray(row_offset).reshape(-1, 1)
    return float(np.sum((est - Lambda_true) ** 2))


def clustering_accuracy(scores, true_groups, n_groups=4) -> float:
    """Best-permutation agreement between complete-linkage clusters and labels."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(true_groups)
    labels = np.unique(truth)
    if np.ptp(scores, axis=0).max(initial=0.0) == 0:
        clusters = np.ones(len(scores), dtype=int)
    else:
        clusters = fcluster(linkage(scores, method="complete"), n_groups, criterion="maxclust")
    cl_ids = np.unique(clusters)
    table = np.array([[np.sum((clusters == c) & (truth == g)) for g in labels] for c in cl_ids])
    size = max(len(cl_ids), len(labels))
    padded = np.zeros((size, size), dtype=int)
    padded[: table.shape[0], : table.shape[1]] = table
    best = max(padded[np.arange(size), list(perm)].sum()
               for perm in itertools.permutations(range(size)))
    return best / len(truth)


def log_transform(A) -> np.ndarray:
    """Zeros to 0.5, divide by row sums, log."""
    X = (A.values if isinstance(A, CountMatrix) else np.asarray(A)).astype(float)
    X = np.where(X == 0, 0.5, X)
    return np.log(X / X.sum(axis=1, keepdims=True))


def log_svd_baseline(A, K):
    """Rank-K PCA of the row-normalised log counts.

    Rows are centred before the SVD, so U V' approximates the row-centred
    log-composition. Returns (U_hat, V_hat).
    """
    T = log_transform(A)
    T = T - T.mean(axis=1, keepdims=True)
    return absorb_scale(truncated_svd(T, K))


def row_center(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return M - M.mean(axis=1, keepdims=True)


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchmarkRecord:
    method: str
    setting: str
    zero_fraction: float
    replicate: int
    l2_loss: float
    taxa_accuracy: float
    sample_accuracy: float
    converged: bool
    runtime: float

    def row(self, timings: bool = True) -> list:
        # wall-clock time is the one non-reproducible field; leave it out
        # when byte-identical reruns matter
        runtime = f"{self.runtime:.3f}" if timings else "nan"
        return [self.method, setting_label(self.setting), f"{self.zero_fraction:g}",
                self.replicate, f"{self.l2_loss:.10g}", f"{self.taxa_accuracy:.6g}",
                f"{self.sample_accuracy:.6g}", str(self.converged).lower(), runtime]


BENCHMARK_COLUMNS = ["method", "setting", "zero_pct", "replicate", "l2_loss",
                     "taxa_acc", "sample_acc", "converged", "runtime_s"]
L2_CONVENTION = {
    "ZIPFA": "||U V' + ln(N) 1' - Lambda||_F^2 (fitted log-mean of the Poisson part; "
             "ln N = 0 with known offsets)",
    "LOGSVD": "||U V' - rowcenter(Lambda)||_F^2 (row-centred log-composition)",
}


def write_benchmark_csv(records, out, timings: bool = True) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(BENCHMARK_COLUMNS)
    for rec in records:
        w.writerow(rec.row(timings))


def read_benchmark_csv(path) -> list[BenchmarkRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchmarkRecord(r["method"], parse_setting(r["setting"]), float(r["zero_pct"]),
                            int(r["replicate"]), float(r["l2_loss"]), float(r["taxa_acc"]),
                            float(r["sample_acc"]), r["converged"] == "true",
                            float(r["runtime_s"]))
            for r in rows]


def replicate_seed(root, setting, zero_fraction, replicate) -> int:
    rng = derive_rng(root, f"{setting}/{zero_fraction:g}", replicate)
    return int(rng.integers(2**63 - 1))


OFFSET_MODES = ("known", "empirical")


def evaluate_zipfa(data: SimulatedDataset, K=3, opts=None, offsets="known"):
    """Fit ZIPFA to simulated data and return (model, L2 loss).

    ``offsets="known"`` passes the generating scaling N = 1 to the fit;
    ``"empirical"`` recomputes relative library sizes from the row sums as
    would be done on real data.
    """
    if offsets not in OFFSET_MODES:
        raise ValueError(f"offsets must be one of {OFFSET_MODES}")
    known = np.ones(data.A.shape[0]) if offsets == "known" else None
    model = zipfa_fit(data.A, K, opts, offsets=known)
    loss = l2_loss(model.U, model.V, data.Lambda_true, np.log(model.N))
    return model, loss


def _bench_one(method, data, K, opts, offsets="known"):
    t0 = time.perf_counter()
    converged = True
    try:
        if method == "ZIPFA":
            model, loss = evaluate_zipfa(data, K, opts, offsets)
            U, V, converged = model.U, model.V, model.converged
        else:
            U, V = log_svd_baseline(data.A, K)
            loss = l2_loss(U, V, row_center(data.Lambda_true))
        ta = clustering_accuracy(V, data.taxon_groups)
        sa = clustering_accuracy(U, data.sample_groups)
    except Exception as exc:  # recorded, never aborts the grid
        logger.warning("%s failed: %s", method, exc)
        loss, ta, sa, converged = float("nan"), float("nan"), float("nan"), False
    return loss, ta, sa, converged, time.perf_counter() - t0


def run_benchmark(settings, zero_fractions, replicates, methods=("ZIPFA", "LOGSVD"),
                  seed=0, K=3, opts: FitOptions | None = None, n=200, m=100,
                  workers: int = 1, offsets: str = "known") -> list[BenchmarkRecord]:
    """Simulate and fit every (setting, zero fraction, replicate) cell."""
    methods = [mth.upper() for mth in methods]
    tasks = [(parse_setting(s), float(f), r) for s in settings for f in zero_fractions
             for r in range(replicates)]

    if offsets not in OFFSET_MODES:
        raise ValueError(f"offsets must be one of {OFFSET_MODES}")
    args = [(t, methods, seed, K, opts, n, m, offsets) for t in tasks]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            chunks = list(ex.map(_run_task, args))
    else:
        chunks = [_run_task(a) for a in args]
    return [rec for chunk in chunks for rec in chunk]


def _run_task(args):
    (s, f, r), methods, seed, K, opts, n, m, offsets = args
    spec = SimulationSpec(s, f, seed=replicate_seed(seed, s, f, r), n=n, m=m)
    data = generate_counts(spec)
    return [BenchmarkRecord(mth, s, f, r, *_bench_one(mth, data, K, opts, offsets))
            for mth in methods]


# --------------------------------------------------------------- diagnostic


@dataclass
class LogisticFit:
    intercept: float
    slope: float
    n_points: int


def _fit_logistic(x, y):
    if len(x) < 3:
        return None
    res = least_squares(lambda ab: expit(ab[0] + ab[1] * x) - y, x0=np.zeros(2))
    return LogisticFit(float(res.x[0]), float(res.x[1]), len(x))


def zero_pattern_diagnostic(A, threshold=MEANLOG_THRESHOLD):
    """Per-taxon zero fraction against the mean log of nonzero counts.

    Returns (table, fit_flagged, fit_all): ``table`` holds per-taxon columns
    ``zero_pct``, ``meanlog`` (nan when a taxon has no nonzero count) and
    ``flagged`` (meanlog above ``threshold``). The fits are least-squares
    logistic curves zero_pct ~ expit(a + b*meanlog), or None when fewer than
    three points are available.
    """
    X = (A.values if isinstance(A, CountMatrix) else np.asarray(A)).astype(float)
    zero_pct = np.mean(X == 0, axis=0)
    nz = X > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        meanlog = np.where(nz, np.log(np.where(nz, X, 1.0)), 0.0).sum(axis=0) / nz.sum(axis=0)
    meanlog[nz.sum(axis=0) == 0] = np.nan
    flagged = np.nan_to_num(meanlog, nan=-np.inf) > threshold
    ok = np.isfinite(meanlog)
    fit_flagged = _fit_logistic(meanlog[flagged], zero_pct[flagged])
    fit_all = _fit_logistic(meanlog[ok], zero_pct[ok])
    if fit_flagged is None or fit_all is None:
        logger.warning("fewer than 3 taxa available for a logistic fit; fit skipped")
    table = {"zero_pct": zero_pct, "meanlog": meanlog, "flagged": flagged}
    return table, fit_flagged, fit_all



DIAGNOSTIC_COLUMNS = ["taxon_id", "zero_pct", "meanlog", "flagged"]
FIT_COLUMNS = ["fit", "intercept", "slope", "n_points"]


def write_diagnostic_csv(table, fits, taxon_ids, out) -> None:
    """Per-taxon rows, a blank line, then one row per logistic fit.

    ``fits`` maps a fit name to a LogisticFit or None; a skipped fit is
    written with empty fields.
    """
    w = csv.writer(out, lineterminator="\n")
    w.writerow(DIAGNOSTIC_COLUMNS)
    for tid, zp, ml, fl in zip(taxon_ids, table["zero_pct"], table["meanlog"], table["flagged"]):
        w.writerow([tid, repr(float(zp)), "" if np.isnan(ml) else repr(float(ml)),
                    str(bool(fl)).lower()])
    w.writerow([])
    w.writerow(FIT_COLUMNS)
    for name, fit in fits.items():
        if fit is None:
            w.writerow([name, "", "", 0])
        else:
            w.writerow([name, repr(fit.intercept), repr(fit.slope), fit.n_points])


def read_diagnostic_csv(path):
    """Inverse of write_diagnostic_csv: (table, taxon_ids, fits)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    split = rows.index([])
    body, footer = rows[1:split], rows[split + 2:]
    taxon_ids = [r[0] for r in body]
    table = {
        "zero_pct": np.array([float(r[1]) for r in body]),
        "meanlog": np.array([float(r[2]) if r[2] else np.nan for r in body]),
        "flagged": np.array([r[3] == "true" for r in body]),
    }
    fits = {r[0]: (LogisticFit(float(r[1]), float(r[2]), int(r[3])) if r[1] else None)
            for r in footer}
    return table, taxon_ids, fits
