"""Synthetic nearest neighbours: per-entry estimates, intervals and completion.

For a target ``(i, j)`` each anchor-row fold ``AR_k`` gives a design matrix
``S_k = Y[AR_k, AC]``. PCR of the target row ``q = Y[i, AC]`` on ``S_k`` yields
weights ``beta_k`` and the fold estimate ``<Y[AR_k, j], beta_k>``. The entry
estimate is the mean over folds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable

import numpy as np

from .anchors import (
    AnchorError,
    AnchorPlan,
    anchor_submatrix,
    default_fold_count,
    partition_rows,
    restricted_support,
)
from .matrix import Completion, MaskedMatrix
from .spectral import EnergyThreshold, RankPolicy, SpectralError, select_rank, svd, truncated_pinv

ALL_MISSING = "all_missing"


class SnnError(ValueError):
    pass


class DegenerateFoldError(SnnError):
    pass


class NoiseModel(str, enum.Enum):
    HOMOSKEDASTIC = "homoskedastic"
    PER_ROW_PLUGIN = "per_row_plugin"


@dataclass(frozen=True)
class SnnConfig:
    """Estimator settings.

    ``k_folds`` and ``min_anchor_rows`` accept ``"auto"``. Auto folds use
    ``floor(min_side / max(2 * rank, 4))`` clipped to [1, 10]; auto minimum
    anchor rows is twice the fold's selected rank.
    """

    rank_policy: RankPolicy = field(default_factory=lambda: EnergyThreshold(0.999))
    k_folds: int | str = "auto"
    min_anchor_rows: int | str = 1
    ci_level: float = 0.95
    noise_model: NoiseModel = NoiseModel.HOMOSKEDASTIC
    noise_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ci_level < 1.0:
            raise SnnError("ci_level must lie in (0, 1)")
        if self.min_anchor_rows != "auto" and (
            not isinstance(self.min_anchor_rows, int) or self.min_anchor_rows < 1
        ):
            raise SnnError("min_anchor_rows must be a positive int or 'auto'")
        if self.k_folds != "auto" and (not isinstance(self.k_folds, int) or self.k_folds < 1):
            raise SnnError("k_folds must be a positive int or 'auto'")
        object.__setattr__(self, "noise_model", NoiseModel(self.noise_model))


@dataclass
class FoldFit:
    rows: tuple[int, ...]
    rank: int
    beta: np.ndarray
    value: float
    residual_ss: float
    dof: int
    basis: np.ndarray  # top-rank left singular vectors of S_k


@dataclass
class SnnEstimate:
    value: float
    fold_values: np.ndarray
    fold_betas: list[np.ndarray]
    fold_ranks: list[int]
    plan: AnchorPlan
    folds: list[FoldFit] = field(repr=False, default_factory=list)
    variance: float = math.nan
    noise_var: float = math.nan
    ci: tuple[float, float] = (math.nan, math.nan)
    observed: float | None = None
    flags: tuple[str, ...] = ()


def _fit_folds(data: MaskedMatrix, plan: AnchorPlan, cfg: SnnConfig, transposed: bool) -> list[FoldFit]:
    plan.validate(data.mask)
    i, j = plan.target
    cols = np.asarray(plan.anchor_cols)
    q = data.values[i, cols]
    fits = []
    for k, fold in enumerate(plan.anchor_row_folds):
        rows = np.asarray(fold)
        S = data.values[np.ix_(rows, cols)]
        x = data.values[rows, j]
        fact = svd(S)
        if fact.positive_rank == 0:
            raise DegenerateFoldError(f"fold {k} of target {plan.target} has an all-zero spectrum")
        lam = select_rank(fact, cfg.rank_policy, S.shape, cfg.noise_scale)
        floor = 2 * lam if cfg.min_anchor_rows == "auto" else cfg.min_anchor_rows
        if len(fold) < floor:
            raise SnnError(f"fold {k} has {len(fold)} anchor rows, fewer than the minimum {floor}")
        pinv = truncated_pinv(fact, lam)
        beta = pinv @ q
        if transposed:
            alpha = pinv.T @ x
            value = float(q @ alpha)
        else:
            value = float(x @ beta)
        resid = q - S.T @ beta
        fits.append(
            FoldFit(
                rows=tuple(fold),
                rank=lam,
                beta=beta,
                value=value,
                residual_ss=float(resid @ resid),
                dof=cols.size - lam,
                basis=fact.left[:, :lam],
            )
        )
    return fits


def _assemble(data, plan, cfg, fits) -> SnnEstimate:
    i, j = plan.target
    fold_values = np.array([f.value for f in fits])
    est = SnnEstimate(
        value=float(fold_values.mean()),
        fold_values=fold_values,
        fold_betas=[f.beta for f in fits],
        fold_ranks=[f.rank for f in fits],
        plan=plan,
        folds=fits,
        observed=float(data.values[i, j]) if data.mask[i, j] else None,
    )
    lo_hi, variance, noise_var, flags = _interval(est, cfg)
    est.ci, est.variance, est.noise_var, est.flags = lo_hi, variance, noise_var, flags
    return est


def snn_entry(data: MaskedMatrix, i: int, j: int, plan: AnchorPlan, cfg: SnnConfig) -> SnnEstimate:
    """Estimate ``A[i, j]`` from the given anchor plan."""
    if plan.target != (i, j):
        raise AnchorError(f"plan targets {plan.target}, not {(i, j)}")
    return _assemble(data, plan, cfg, _fit_folds(data, plan, cfg, transposed=False))


def snn_entry_transposed(data: MaskedMatrix, i: int, j: int, plan: AnchorPlan, cfg: SnnConfig) -> SnnEstimate:
    """Same estimate built from synthetic neighbours of column ``j`` instead of row ``i``."""
    if plan.target != (i, j):
        raise AnchorError(f"plan targets {plan.target}, not {(i, j)}")
    return _assemble(data, plan, cfg, _fit_folds(data, plan, cfg, transposed=True))


def normal_quantile(level: float) -> float:
    """Two-sided standard normal critical value for coverage ``level``."""
    return NormalDist().inv_cdf(0.5 * (1.0 + level))


def _interval(est: SnnEstimate, cfg: SnnConfig):
    if cfg.noise_model is NoiseModel.PER_ROW_PLUGIN:
        raise NotImplementedError("per-row noise plug-in is unimplemented")
    flags = []
    usable = [f for f in est.folds if f.dof > 0]
    if not usable:
        return (math.nan, math.nan), math.nan, math.nan, ("no_residual_dof",)
    noise_var = float(np.mean([f.residual_ss / f.dof for f in usable]))
    K = len(est.folds)
    total = 0.0
    for f in est.folds:
        beta_proj = f.basis @ (f.basis.T @ f.beta)
        total += noise_var * float(beta_proj @ beta_proj)
    variance = total / K**2
    if variance == 0.0 and noise_var > 0.0:
        flags.append("zero_variance_with_noise")
    half = normal_quantile(cfg.ci_level) * math.sqrt(variance)
    return (est.value - half, est.value + half), variance, noise_var, tuple(flags)


def confidence_interval(est: SnnEstimate, data: MaskedMatrix, cfg: SnnConfig) -> tuple[tuple[float, float], float]:
    """Normal-approximation interval around ``est.value`` and its variance.

    The noise variance is the pooled residual mean square of the fold
    regressions, ``|q - S_k^T beta_k|^2 / (|AC| - rank_k)``.
    """
    if not est.folds:
        est = _assemble(data, est.plan, cfg, _fit_folds(data, est.plan, cfg, transposed=False))
    ci, variance, _, _ = _interval(est, cfg)
    return ci, variance


@dataclass
class SnnCompletion(Completion):
    estimates: dict = field(default_factory=dict)


def _resolve_folds(cfg: SnnConfig, data: MaskedMatrix, rows, cols) -> int:
    if cfg.k_folds != "auto":
        return min(cfg.k_folds, len(rows))
    S = data.values[np.ix_(rows, cols)]
    fact = svd(S)
    if fact.positive_rank == 0:
        return 1
    rank = select_rank(fact, cfg.rank_policy, S.shape, cfg.noise_scale)
    return default_fold_count(min(len(rows), len(cols)), rank)


def snn_complete(data: MaskedMatrix, targets=ALL_MISSING, cfg: SnnConfig | None = None) -> SnnCompletion:
    """Run anchor search and SNN for each target cell.

    Non-target observed cells are copied through. Cells that cannot be
    estimated keep NaN and carry a failure status: ``no_anchor`` (no anchor
    block), ``insufficient_anchors`` or ``degenerate``.
    """
    cfg = cfg or SnnConfig()
    m, n = data.shape
    values = data.filled(np.nan)
    status = np.where(data.mask, "observed", "missing").astype("<U20")
    if isinstance(targets, str):
        if targets != ALL_MISSING:
            raise SnnError(f"unknown target selector {targets!r}")
        cells: Iterable[tuple[int, int]] = zip(*np.nonzero(~data.mask))
    else:
        cells = targets
    cells = sorted((int(a), int(b)) for a, b in cells)
    estimates = {}
    cache: dict[tuple[bytes, bytes], tuple | None] = {}
    for i, j in cells:
        if not (0 <= i < m and 0 <= j < n):
            raise IndexError(f"target ({i}, {j}) out of bounds")
        rows, cols = restricted_support(data.mask, i, j)
        key = (rows.tobytes(), cols.tobytes())
        if key not in cache:
            try:
                cache[key] = anchor_submatrix(data.mask, i, j)
            except AnchorError:
                cache[key] = None
        found = cache[key]
        if found is None:
            status[i, j] = "no_anchor"
            values[i, j] = np.nan
            continue
        ar, ac = found
        rng = np.random.default_rng(cfg.seed ^ (i * n + j))
        try:
            k = _resolve_folds(cfg, data, ar, ac)
            plan = AnchorPlan((i, j), ac, partition_rows(ar, k, rng))
            est = snn_entry(data, i, j, plan, cfg)
        except DegenerateFoldError:
            status[i, j] = "degenerate"
            values[i, j] = np.nan
            continue
        except (SnnError, SpectralError):
            status[i, j] = "insufficient_anchors"
            values[i, j] = np.nan
            continue
        values[i, j] = est.value
        status[i, j] = "estimated"
        estimates[(i, j)] = est
    return SnnCompletion(values=values, status=status, estimates=estimates)
