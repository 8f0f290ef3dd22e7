"""Truncated SVD with a deterministic sign convention."""

from typing import NamedTuple

import numpy as np


class SvdTriplet(NamedTuple):
    left: np.ndarray
    singular: np.ndarray
    right: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular) @ self.right.T


def truncated_svd(M, K: int) -> SvdTriplet:
    """Top-K singular triplet of ``M``.

    Each right singular vector is flipped so that its largest-magnitude entry
    is positive (first such entry on ties); the left vector flips with it.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if not np.all(np.isfinite(M)):
        raise FloatingPointError("matrix contains non-finite values")
    if not 1 <= K <= min(M.shape):
        raise ValueError(f"rank {K} out of range for a {M.shape[0]}x{M.shape[1]} matrix")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    U, s, V = U[:, :K], s[:K], Vt[:K].T
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pivot, np.arange(K)])
    signs[signs == 0] = 1.0
    return SvdTriplet(U * signs, s, V * signs)


def absorb_scale(t: SvdTriplet):
    """Move the singular values into the score matrix: (U' S', V')."""
    return t.left * t.singular, t.right.copy()
