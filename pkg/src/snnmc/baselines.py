"""Reference estimators: row KNN, USVT and SoftImpute.

Each returns a :class:`~snnmc.matrix.Completion` with observed cells copied
through. KNN can fail on a cell (no usable neighbour); such cells hold NaN
with status ``"no_neighbor"``. USVT and SoftImpute always fill every cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matrix import Completion, MaskedMatrix, MatrixError
from .spectral import svd

NO_NEIGHBOR = "no_neighbor"
# default SoftImpute shrinkage is tau_1 of the zero-filled data over this
SOFTIMPUTE_LAMBDA_DIVISOR = 50.0


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    knn_k: int = 5
    usvt_eta: float = 1.0
    softimpute_lambda: float | None = None  # None: tau_1 / 50 of the zero-filled data
    softimpute_max_iter: int = 200
    softimpute_tol: float = 1e-5

    def __post_init__(self):
        if not isinstance(self.knn_k, (int, np.integer)) or self.knn_k < 1:
            raise BaselineError("knn_k must be an integer >= 1")
        if not 0.0 < self.usvt_eta <= 1.0:
            raise BaselineError("usvt_eta must lie in (0, 1]")
        if self.softimpute_lambda is not None and self.softimpute_lambda < 0:
            raise BaselineError("softimpute_lambda must be >= 0")
        if self.softimpute_max_iter < 1:
            raise BaselineError("softimpute_max_iter must be >= 1")
        if not self.softimpute_tol > 0:
            raise BaselineError("softimpute_tol must be > 0")


def _base_status(data: MaskedMatrix) -> np.ndarray:
    return np.where(data.mask, "observed", "estimated").astype("<U20")


def row_distances(data: MaskedMatrix, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean squared difference between row ``i`` and every row over common columns.

    Returns ``(dist, common)``; rows with no common column get ``inf``.
    """
    D = data.mask
    Y = data.values
    common = D & D[i]
    counts = common.sum(axis=1)
    diff = np.where(common, Y - Y[i], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = (diff**2).sum(axis=1) / counts
    dist[counts == 0] = np.inf
    dist[i] = np.inf
    return dist, counts


def knn_impute(data: MaskedMatrix, k: int = 5) -> Completion:
    """Average column ``j`` over the ``k`` closest rows that observe it.

    Candidate rows must observe column ``j`` and share at least one observed
    column with row ``i``. Ties in distance go to the lower row index.
    """
    if k < 1:
        raise BaselineError("k must be >= 1")
    values = data.filled(np.nan)
    status = _base_status(data)
    m, n = data.shape
    for i in range(m):
        missing = np.flatnonzero(~data.mask[i])
        if missing.size == 0:
            continue
        dist, _ = row_distances(data, i)
        # stable sort keeps row order among equal distances
        order = np.argsort(dist, kind="stable")
        order = order[np.isfinite(dist[order])]
        for j in missing:
            cands = order[data.mask[order, j]][:k]
            if cands.size == 0:
                status[i, j] = NO_NEIGHBOR
                continue
            values[i, j] = data.values[cands, j].mean()
    return Completion(values=values, status=status)


def usvt(data: MaskedMatrix, eta: float = 1.0, keep_observed: bool = True) -> Completion:
    """Universal singular value thresholding on the rescaled zero-filled matrix.

    Singular values below ``eta * sqrt(max(m, n) * p_hat) * max|observed|`` are
    dropped and the reconstruction is clipped to the observed value range.
    """
    if not 0.0 < eta <= 1.0:
        raise BaselineError("eta must lie in (0, 1]")
    mask = data.mask
    if not mask.any():
        raise MatrixError("usvt needs at least one observed cell")
    m, n = data.shape
    p_hat = float(mask.mean())
    obs = data.values[mask]
    scale = float(np.abs(obs).max())
    fact = svd(data.values / p_hat)
    cutoff = eta * np.sqrt(max(m, n) * p_hat) * scale
    keep = int(np.count_nonzero(fact.singular_values >= cutoff))
    est = fact.reconstruct(keep) if keep else np.zeros((m, n))
    est = np.clip(est, obs.min(), obs.max())
    if keep_observed:
        est[mask] = data.values[mask]
    return Completion(values=est, status=_base_status(data))


def _soft_threshold(M: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    fact = svd(M)
    s = np.maximum(fact.singular_values - lam, 0.0)
    k = int(np.count_nonzero(s))
    Z = (fact.left[:, :k] * s[:k]) @ fact.right[:, :k].T
    return Z, float(s.sum())


def softimpute_objective(data: MaskedMatrix, Z: np.ndarray, lam: float) -> float:
    """``0.5 * |P_obs(Y - Z)|_F^2 + lam * |Z|_*``."""
    resid = np.where(data.mask, data.values - Z, 0.0)
    nuclear = float(np.linalg.svd(Z, compute_uv=False).sum())
    return 0.5 * float((resid**2).sum()) + lam * nuclear


def default_softimpute_lambda(data: MaskedMatrix) -> float:
    s = svd(data.values).singular_values
    return float(s[0]) / SOFTIMPUTE_LAMBDA_DIVISOR if s.size else 0.0


@dataclass
class SoftImputeResult(Completion):
    Z: np.ndarray = field(default=None, repr=False)
    lam: float = 0.0
    iterations: int = 0
    converged: bool = False
    objective: list = field(default_factory=list)


def soft_impute(
    data: MaskedMatrix,
    lam: float | None = None,
    max_iter: int = 200,
    tol: float = 1e-5,
    track_objective: bool = False,
) -> SoftImputeResult:
    """Iterate ``Z <- SVT_lam(P_obs(Y) + P_miss(Z))`` from ``Z = 0``.

    Stops once ``|Z_new - Z|_F^2 / |Z|_F^2 < tol`` or after ``max_iter``
    sweeps. ``lam=None`` uses ``tau_1 / 50`` of the zero-filled matrix.
    """
    if lam is None:
        lam = default_softimpute_lambda(data)
    if lam < 0:
        raise BaselineError("lambda must be >= 0")
    if max_iter < 1 or not tol > 0:
        raise BaselineError("need max_iter >= 1 and tol > 0")
    mask = data.mask
    Y = data.values
    Z = np.zeros(data.shape)
    trace = [softimpute_objective(data, Z, lam)] if track_objective else []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Z_new, nuclear = _soft_threshold(np.where(mask, Y, Z), lam)
        change = float(((Z_new - Z) ** 2).sum())
        norm = float((Z**2).sum())
        Z = Z_new
        if track_objective:
            resid = np.where(mask, Y - Z, 0.0)
            trace.append(0.5 * float((resid**2).sum()) + lam * nuclear)
        if change == 0.0 or (norm > 0 and change / norm < tol):
            converged = True
            break
    values = np.where(mask, Y, Z)
    return SoftImputeResult(
        values=values,
        status=_base_status(data),
        Z=Z,
        lam=float(lam),
        iterations=it,
        converged=converged,
        objective=trace,
    )
