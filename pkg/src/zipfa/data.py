"""Count-matrix ingestion, library-size offsets, initial imputation and CV masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARTITION_RETRIES = 100


class InputError(ValueError):
    """Malformed or invalid count data."""


class DegenerateColumnError(InputError):
    """A column has no usable (nonzero, observed) entries."""


class PartitionError(RuntimeError):
    """No fold assignment keeps every row and column observed."""


@dataclass
class CountMatrix:
    values: np.ndarray
    sample_ids: list = field(default_factory=list)
    taxon_ids: list = field(default_factory=list)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise InputError("count matrix must be a non-empty 2-d array")
        if not np.all(np.isfinite(values)):
            raise InputError("count matrix contains non-finite values")
        if np.any(values < 0):
            raise InputError("count matrix contains negative values")
        if np.any(values != np.round(values)):
            raise InputError("count matrix contains non-integer values")
        n, m = values.shape
        if n < 2 or m < 2:
            raise InputError(f"need at least 2 samples and 2 taxa, got {n}x{m}")
        self.values = values.astype(np.int64)
        if not self.sample_ids:
            self.sample_ids = [f"s{i + 1}" for i in range(n)]
        if not self.taxon_ids:
            self.taxon_ids = [f"t{j + 1}" for j in range(m)]
        if len(self.sample_ids) != n or len(self.taxon_ids) != m:
            raise InputError("label count does not match matrix shape")

    @property
    def shape(self):
        return self.values.shape


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def load_counts(path, delimiter: str | None = None) -> CountMatrix:
    """Read a sample-by-taxon count table.

    The header row names the taxa (its first cell is the sample-id column
    name), and each following row starts with the sample id. Comma or tab
    delimiters are auto-detected from the header unless given.
    """
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InputError(f"{path}: empty file")
    delim = delimiter or _sniff_delimiter(lines[0])
    rows = list(csv.reader(lines, delimiter=delim))
    header, body = rows[0], rows[1:]
    taxa = [h.strip() for h in header[1:]]
    if not taxa or not body:
        raise InputError(f"{path}: empty matrix")
    samples, values = [], []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InputError(
                f"{path}: row {r} has {len(row)} cells, expected {len(header)}"
            )
        samples.append(row[0].strip())
        parsed = []
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            try:
                v = int(cell)
            except ValueError:
                raise InputError(
                    f"{path}: row {r}, column {taxa[c]!r}: {cell!r} is not an integer count"
                ) from None
            if v < 0:
                raise InputError(
                    f"{path}: row {r}, column {taxa[c]!r}: negative count {v}"
                )
            parsed.append(v)
        values.append(parsed)
    return CountMatrix(np.array(values, dtype=np.int64), samples, taxa)


def save_counts(A: CountMatrix, path, delimiter: str = ",") -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["sample_id", *A.taxon_ids])
        for sid, row in zip(A.sample_ids, A.values):
            w.writerow([sid, *(int(v) for v in row)])


def _as_array(A) -> np.ndarray:
    return A.values if isinstance(A, CountMatrix) else np.asarray(A)


def observed_mask(shape, held_out=None) -> np.ndarray:
    """Boolean matrix, True where a cell is observed (not held out)."""
    obs = np.ones(shape, dtype=bool)
    if held_out is not None and len(held_out):
        idx = np.asarray(list(held_out) if not isinstance(held_out, np.ndarray) else held_out)
        idx = idx.reshape(-1, 2)
        obs[idx[:, 0], idx[:, 1]] = False
    return obs


def relative_library_size(A, held_out=None) -> np.ndarray:
    """Row sums divided by their median (held-out cells excluded from the sums)."""
    X = _as_array(A).astype(float)
    if held_out is not None:
        X = np.where(observed_mask(X.shape, held_out), X, 0.0)
    sums = X.sum(axis=1)
    if np.any(sums <= 0):
        bad = np.flatnonzero(sums <= 0).tolist()
        raise InputError(f"samples with no reads at rows {bad}")
    return sums / np.median(sums)


def impute_log(A, held_out=None) -> np.ndarray:
    """Replace zeros (and held-out cells) by the column mean of the remaining
    nonzero observed entries, then take the natural log."""
    X = _as_array(A).astype(float)
    usable = (X > 0) & observed_mask(X.shape, held_out)
    counts = usable.sum(axis=0)
    if np.any(counts == 0):
        bad = np.flatnonzero(counts == 0).tolist()
        raise DegenerateColumnError(f"columns {bad} have no nonzero observed entries")
    col_mean = np.where(usable, X, 0.0).sum(axis=0) / counts
    return np.log(np.where(usable, X, col_mean[None, :]))


def _orphans(fold_ids: np.ndarray, n: int, m: int, r: int):
    """Return (axis, index) of the first row/column fully covered by one fold."""
    grid = fold_ids.reshape(n, m)
    for t in range(r):
        hit = grid == t
        rows = np.flatnonzero(hit.all(axis=1))
        if rows.size:
            return "row", int(rows[0])
        cols = np.flatnonzero(hit.all(axis=0))
        if cols.size:
            return "column", int(cols[0])
    return None


def partition_indices(n: int, m: int, r: int, seed=None) -> list[np.ndarray]:
    """Randomly split the n*m cells into r near-equal folds.

    Each fold is an (size, 2) integer array of (row, col) pairs. Partitions
    that would hold out a whole row or column are redrawn.
    """
    if r < 2 or r > n * m:
        raise ValueError(f"fold count must be in [2, {n * m}], got {r}")
    rng = np.random.default_rng(seed)
    base = np.arange(n * m) % r
    blocker = None
    for _ in range(PARTITION_RETRIES):
        fold_ids = rng.permutation(base)
        blocker = _orphans(fold_ids, n, m, r)
        if blocker is None:
            folds = []
            for t in range(r):
                flat = np.flatnonzero(fold_ids == t)
                folds.append(np.column_stack(np.divmod(flat, m)))
            return folds
    raise PartitionError(
        f"could not find a {r}-fold partition of a {n}x{m} matrix; "
        f"{blocker[0]} {blocker[1]} keeps getting held out entirely"
    )


def save_mask(indices, path) -> None:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("row_index,col_index\n")
        for i, j in idx:
            fh.write(f"{i},{j}\n")


def load_mask(path) -> np.ndarray:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[int(a), int(b)] for a, b in rows[1:] if a.strip()], dtype=np.int64).reshape(-1, 2)
