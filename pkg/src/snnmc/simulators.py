"""Ground-truth signals and missingness mechanisms.

Every generator takes an explicit ``numpy.random.Generator`` so that a fixed
seed reproduces its output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COHORTS = ("core", "user", "item", "standard")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class FactorPair:
    U: np.ndarray
    V: np.ndarray
    A: np.ndarray

    @property
    def r(self) -> int:
        return self.U.shape[1]


def gen_core_factors(m: int, m_core: int, r: int, rng: np.random.Generator, return_weights: bool = False):
    """Latent factors whose first ``m_core`` rows are iid N(0, 1).

    The other rows are convex combinations of the core rows with
    Dirichlet(1, ..., 1) weights.
    """
    if r < 1:
        raise SimulationError("rank must be >= 1")
    if not 1 <= m_core <= m:
        raise SimulationError(f"need 1 <= m_core <= m, got m_core={m_core}, m={m}")
    core = rng.standard_normal((m_core, r))
    weights = rng.dirichlet(np.ones(m_core), size=m - m_core) if m > m_core else np.zeros((0, m_core))
    U = np.vstack([core, weights @ core])
    return (U, weights) if return_weights else U


def scale_to_range(A, lo: float, hi: float) -> np.ndarray:
    """Affine map sending ``min(A)`` to ``lo`` and ``max(A)`` to ``hi``.

    A constant matrix maps to the midpoint.
    """
    if not hi > lo:
        raise SimulationError("need hi > lo")
    A = np.asarray(A, dtype=float)
    a_min, a_max = A.min(), A.max()
    if a_max == a_min:
        return np.full_like(A, 0.5 * (lo + hi))
    out = lo + (A - a_min) * ((hi - lo) / (a_max - a_min))
    return np.clip(out, lo, hi)


def factor_pair(U, V, lo: float | None = None, hi: float | None = None) -> FactorPair:
    A = U @ V.T
    if lo is not None:
        A = scale_to_range(A, lo, hi)
    return FactorPair(U=U, V=V, A=A)


def mcar_mask(m: int, n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < p <= 1.0:
        raise SimulationError("observation probability must lie in (0, 1]")
    return rng.random((m, n)) < p


def sample_mask(P, rng: np.random.Generator) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if np.any((P < 0) | (P > 1)):
        raise SimulationError("propensities must lie in [0, 1]")
    return rng.random(P.shape) < P


@dataclass(frozen=True)
class CohortPropensitySpec:
    """Cohort layout and MNAR strength for the self-selection propensity model.

    Defaults follow the recommender experiment: strong MNAR among standard
    users and items, mild MNAR in the core block.
    """

    m_core: int = 20
    n_core: int = 20
    threshold: float = 2.3
    alpha: dict = field(default_factory=lambda: {"core": 0.7, "user": 0.35, "item": 0.35, "standard": 0.1})
    fraction: dict = field(default_factory=lambda: {"core": 0.9, "user": 0.7, "item": 0.7, "standard": 0.05})
    lo: float = 1.0
    hi: float = 5.0

    def __post_init__(self):
        for name in COHORTS:
            a, f = self.alpha.get(name), self.fraction.get(name)
            if a is None or f is None:
                raise SimulationError(f"missing alpha/fraction for cohort {name!r}")
            if not 0.0 < a <= 1.0:
                raise SimulationError(f"alpha[{name}] must lie in (0, 1]")
            if not 0.0 < f <= 1.0:
                raise SimulationError(f"fraction[{name}] must lie in (0, 1]")
        if not self.lo < self.threshold < self.hi:
            raise SimulationError("threshold must lie strictly inside the rating range")
        if self.m_core < 0 or self.n_core < 0:
            raise SimulationError("core counts must be nonnegative")


def cohort_labels(m: int, n: int, m_core: int, n_core: int) -> np.ndarray:
    core_row = np.arange(m)[:, None] < m_core
    core_col = np.arange(n)[None, :] < n_core
    labels = np.empty((m, n), dtype="<U8")
    labels[core_row & core_col] = "core"
    labels[core_row & ~core_col] = "user"
    labels[~core_row & core_col] = "item"
    labels[~core_row & ~core_col] = "standard"
    return labels


def mnar_base(A, alpha, threshold: float, lo: float = 1.0, hi: float = 5.0) -> np.ndarray:
    """Unnormalised propensity: ``alpha**(A - lo)`` up to the threshold, ``alpha**(hi - A)`` above."""
    A = np.asarray(A, dtype=float)
    return np.where(A <= threshold, np.power(alpha, A - lo), np.power(alpha, hi - A))


def calibrate_kappa(base: np.ndarray, target: float, iters: int = 60) -> float:
    """Solve ``mean(min(kappa * base, 1)) = target`` by bisection."""
    hi = 1.0 / base.min()
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.minimum(mid * base, 1.0).mean() < target:
            lo = mid
        else:
            hi = mid
    return hi


def limited_mnar_propensity(A, spec: CohortPropensitySpec, max_clip_fraction: float = 0.5) -> np.ndarray:
    """Cohort-calibrated MNAR propensities.

    Within each cohort one ``kappa`` scales the base propensities so the
    cohort mean equals its target observed fraction (cells clipped at 1).
    A cohort is infeasible when more than ``max_clip_fraction`` of its cells
    would need clipping.
    """
    A = np.asarray(A, dtype=float)
    if A.min() < spec.lo - 1e-12 or A.max() > spec.hi + 1e-12:
        raise SimulationError(f"ratings must lie in [{spec.lo}, {spec.hi}]")
    m, n = A.shape
    labels = cohort_labels(m, n, spec.m_core, spec.n_core)
    P = np.zeros_like(A)
    for name in COHORTS:
        cells = labels == name
        if not cells.any():
            continue
        base = mnar_base(A[cells], spec.alpha[name], spec.threshold, spec.lo, spec.hi)
        kappa = calibrate_kappa(base, spec.fraction[name])
        clipped = np.mean(kappa * base > 1.0)
        if clipped > max_clip_fraction:
            raise SimulationError(
                f"cohort {name!r}: target fraction {spec.fraction[name]} needs {clipped:.0%} of cells clipped"
            )
        P[cells] = np.minimum(kappa * base, 1.0)
    return P


def favourite(F) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already breaks ties toward the lowest index."""
    return np.argmax(np.asarray(F), axis=1)


def general_mnar_mask(U, V, n_core: int) -> np.ndarray:
    """Core columns fully observed; elsewhere a row sees a column iff they share a favourite factor."""
    U = np.asarray(U)
    V = np.asarray(V)
    if U.shape[1] != V.shape[1] or U.shape[1] < 1:
        raise SimulationError("U and V need the same positive number of columns")
    n = V.shape[0]
    if not 0 <= n_core <= n:
        raise SimulationError("n_core must lie in [0, n]")
    D = favourite(U)[:, None] == favourite(V)[None, :]
    D[:, :n_core] = True
    return D


@dataclass(frozen=True)
class PanelAdoptionSpec:
    pre_periods: int = 19
    probabilities: tuple[float, float, float] = (0.1, 0.3, 0.5)  # mild, moderate, severe

    def __post_init__(self):
        if self.pre_periods < 1:
            raise SimulationError("pre_periods must be >= 1")
        if len(self.probabilities) != 3 or any(not 0.0 <= p <= 1.0 for p in self.probabilities):
            raise SimulationError("need three adoption probabilities in [0, 1]")


SEVERITY = ("mild", "moderate", "severe")


def severity_classes(Y, pre_periods: int) -> np.ndarray:
    """0 = mild, 1 = moderate, 2 = severe, from each unit's post-minus-pre mean change."""
    Y = np.asarray(Y, dtype=float)
    change = Y[:, pre_periods:].mean(axis=1) - Y[:, :pre_periods].mean(axis=1)
    mu, sd = change.mean(), change.std()
    classes = np.ones(Y.shape[0], dtype=int)
    classes[change >= mu + sd] = 0
    classes[change <= mu - sd] = 2
    return classes


def panel_adoption_mask(Y, spec: PanelAdoptionSpec, rng: np.random.Generator, return_classes: bool = False):
    """Adopting units lose every post-period cell; everything else is observed."""
    Y = np.asarray(Y, dtype=float)
    T = Y.shape[1]
    if T <= spec.pre_periods:
        raise SimulationError(f"need more than {spec.pre_periods} periods, got {T}")
    classes = severity_classes(Y, spec.pre_periods)
    probs = np.asarray(spec.probabilities)[classes]
    adopt = rng.random(Y.shape[0]) < probs
    D = np.ones(Y.shape, dtype=bool)
    D[adopt, spec.pre_periods:] = False
    return (D, classes) if return_classes else D


def add_noise(A, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise SimulationError("sigma must be >= 0")
    A = np.asarray(A, dtype=float)
    return A + sigma * rng.standard_normal(A.shape)
