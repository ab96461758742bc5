"""SVD kernel: rank selection, hard singular value thresholding and PCR."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

# singular values below ZERO_TOL * tau_1 count as exact zeros
ZERO_TOL = 1e-12
UNIVERSAL_CONSTANT = 2.02


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD ``M = U diag(s) V^T`` with descending ``s``.

    ``left`` is p x s, ``right`` is q x s. Each left vector is oriented so its
    largest-magnitude entry is nonnegative (first index wins ties).
    """

    singular_values: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @property
    def positive_rank(self) -> int:
        s = self.singular_values
        if s.size == 0 or s[0] <= 0:
            return 0
        return int(np.count_nonzero(s > ZERO_TOL * s[0]))

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        k = self.singular_values.size if rank is None else rank
        return (self.left[:, :k] * self.singular_values[:k]) @ self.right[:, :k].T


def svd(M) -> SvdFactorization:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise SpectralError("svd expects a 2-d matrix")
    if not np.all(np.isfinite(M)):
        raise SpectralError("non-finite entries in matrix")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    V = Vt.T
    if U.shape[1]:
        pivots = np.argmax(np.abs(U), axis=0)
        signs = np.where(U[pivots, np.arange(U.shape[1])] < 0, -1.0, 1.0)
        U = U * signs
        V = V * signs
    return SvdFactorization(singular_values=s, left=U, right=V)


@dataclass(frozen=True)
class Fixed:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise SpectralError("Fixed rank must be >= 1")


@dataclass(frozen=True)
class EnergyThreshold:
    fraction: float = 0.999

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise SpectralError("energy fraction must lie in (0, 1]")


@dataclass(frozen=True)
class UniversalThreshold:
    """Keep singular values >= ``constant * sigma * sqrt(max(p, q))``."""

    constant: float = UNIVERSAL_CONSTANT


RankPolicy = Union[Fixed, EnergyThreshold, UniversalThreshold]


def select_rank(
    fact: SvdFactorization,
    policy: RankPolicy,
    shape: tuple[int, int] | None = None,
    noise_scale: float | None = None,
) -> int:
    """Pick the number of singular components to keep.

    The result is always between 1 and the number of numerically positive
    singular values (``Fixed`` is additionally capped at that count).
    """
    s = np.asarray(fact.singular_values, dtype=float)
    positive = fact.positive_rank
    if positive == 0:
        raise SpectralError("all-zero spectrum")
    if isinstance(policy, Fixed):
        return min(policy.k, s.size, positive)
    if isinstance(policy, EnergyThreshold):
        energy = np.where(s > ZERO_TOL * s[0], s, 0.0) ** 2
        cum = np.cumsum(energy)
        lam = int(np.searchsorted(cum, policy.fraction * cum[-1], side="left")) + 1
        return max(1, min(lam, positive))
    if isinstance(policy, UniversalThreshold):
        if shape is None:
            shape = (fact.left.shape[0], fact.right.shape[0])
        root = np.sqrt(max(shape))
        sigma = noise_scale if noise_scale is not None else float(np.median(s)) / root
        cutoff = policy.constant * sigma * root
        lam = int(np.count_nonzero(s[:positive] >= cutoff))
        return max(1, lam)
    raise SpectralError(f"unknown rank policy {policy!r}")


def hsvt(M, rank: int, fact: SvdFactorization | None = None) -> np.ndarray:
    """Best rank-``rank`` approximation in Frobenius norm (truncated SVD)."""
    M = np.asarray(M, dtype=float)
    if not 1 <= rank <= min(M.shape):
        raise SpectralError(f"rank {rank} out of range for shape {M.shape}")
    fact = fact or svd(M)
    return fact.reconstruct(rank)


def truncated_pinv(fact: SvdFactorization, rank: int) -> np.ndarray:
    """``sum_{l <= rank} (1 / tau_l) u_l v_l^T`` (p x q)."""
    if not 1 <= rank <= fact.positive_rank:
        raise SpectralError(
            f"rank {rank} exceeds the {fact.positive_rank} positive singular values"
        )
    return (fact.left[:, :rank] / fact.singular_values[:rank]) @ fact.right[:, :rank].T


def pcr(S, q, rank: int, fact: SvdFactorization | None = None) -> np.ndarray:
    """Principal component regression of ``q`` on the rows of ``S``.

    Returns beta (length p) with ``S^T beta ~= q``, restricted to the top-``rank``
    left singular subspace of ``S``.
    """
    S = np.asarray(S, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.shape != (S.shape[1],):
        raise SpectralError(f"response length {q.shape} does not match {S.shape[1]} columns")
    fact = fact or svd(S)
    return truncated_pinv(fact, rank) @ q
