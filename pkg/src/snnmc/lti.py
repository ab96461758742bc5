"""Spatio-temporal factor model written as a linear dynamical system.

Innovations follow a low-rank tensor model

    Delta[n, i](t) = sum_r theta[n, r] * omega[i, r] * rho_r(t)

where each temporal factor ``rho_r`` obeys a linear recurrence of order G.
Stacking ``(rho_r(t), ..., rho_r(t - G + 1))`` for every factor gives a state
``X(t)`` with ``X(t + 1) = A X(t)`` and ``Y(t) = B X(t)`` (the full innovation
vector, indexed by ``(n, i)`` as ``n * I + i``). A unit's cumulative outcome
adds the innovation of the intervention it receives at each step.

Interventions are 0-indexed in memory and 1-indexed in files.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .matrix import FLOAT_FMT, MaskedMatrix

STABILITY_WARN_RADIUS = 1.05


class LtiError(ValueError):
    pass


class UnstableSystemWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class LrfSpec:
    """Linear recurrence for R temporal factors of lag order G.

    ``beta[r]`` holds the coefficients of ``rho_r(t - 1), ..., rho_r(t - G)``.
    ``rho_init[r]`` holds ``rho_r(G - 1), ..., rho_r(0)``, newest first.
    """

    beta: np.ndarray
    rho_init: np.ndarray

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        rho = np.atleast_2d(np.asarray(self.rho_init, dtype=float))
        if beta.ndim != 2 or beta.shape[0] < 1 or beta.shape[1] < 1:
            raise LtiError("beta must be a nonempty R x G array")
        if rho.shape != beta.shape:
            raise LtiError(f"rho_init shape {rho.shape} does not match beta shape {beta.shape}")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(rho))):
            raise LtiError("beta and rho_init must be finite")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "rho_init", rho)

    @property
    def R(self) -> int:
        return self.beta.shape[0]

    @property
    def G(self) -> int:
        return self.beta.shape[1]


def companion_block(beta_r) -> np.ndarray:
    """G x G companion matrix: ``beta_r`` on the first row, ones below the diagonal."""
    beta_r = np.asarray(beta_r, dtype=float).ravel()
    G = beta_r.size
    if G == 0:
        raise LtiError("companion block needs at least one coefficient")
    block = np.zeros((G, G))
    block[0] = beta_r
    block[np.arange(1, G), np.arange(G - 1)] = 1.0
    return block


@dataclass
class LtiFactorSystem:
    """State-space form of the factor model.

    ``A`` is RG x RG block diagonal, ``B`` is NI x RG, ``X`` the current state
    and ``M`` the current cumulative outcome per unit.
    """

    A: np.ndarray
    B: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    X: np.ndarray
    M: np.ndarray
    G: int

    @property
    def N(self) -> int:
        return self.theta.shape[0]

    @property
    def I(self) -> int:  # noqa: E743
        return self.omega.shape[0]

    @property
    def R(self) -> int:
        return self.theta.shape[1]

    def rho(self) -> np.ndarray:
        """Current factor values ``rho_r(t)`` (the newest entry of each block)."""
        return self.X[:: self.G].copy()

    def innovations(self) -> np.ndarray:
        """Full innovation vector ``B X`` reshaped to N x I."""
        return (self.B @ self.X).reshape(self.N, self.I)


def loading_matrix(theta, omega, G: int) -> np.ndarray:
    """Row ``n * I + i`` is ``[theta[n,0]*omega[i,0], 0.., theta[n,1]*omega[i,1], 0.., ...]``."""
    theta = np.asarray(theta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    N, R = theta.shape
    I = omega.shape[0]
    B = np.zeros((N * I, R * G))
    B[:, ::G] = (theta[:, None, :] * omega[None, :, :]).reshape(N * I, R)
    return B


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def build_system(spec: LrfSpec, theta, omega) -> LtiFactorSystem:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if theta.shape[1] != spec.R or omega.shape[1] != spec.R:
        raise LtiError(
            f"theta {theta.shape} and omega {omega.shape} need {spec.R} columns to match the LRF spec"
        )
    if theta.shape[0] < 1 or omega.shape[0] < 1:
        raise LtiError("need at least one unit and one intervention")
    G = spec.G
    blocks = [companion_block(b) for b in spec.beta]
    A = np.zeros((spec.R * G, spec.R * G))
    for r, blk in enumerate(blocks):
        A[r * G : (r + 1) * G, r * G : (r + 1) * G] = blk
    return LtiFactorSystem(
        A=A,
        B=loading_matrix(theta, omega, G),
        theta=theta,
        omega=omega,
        X=spec.rho_init.ravel().copy(),
        M=np.zeros(theta.shape[0]),
        G=G,
    )


def check_stability(sys: LtiFactorSystem, limit: float = STABILITY_WARN_RADIUS) -> float:
    """Largest companion-block spectral radius; warns above ``limit``."""
    G = sys.G
    radius = max(
        spectral_radius(sys.A[r * G : (r + 1) * G, r * G : (r + 1) * G]) for r in range(sys.R)
    )
    if radius > limit:
        warnings.warn(
            f"companion block spectral radius {radius:.4g} exceeds {limit}; trajectories may overflow",
            UnstableSystemWarning,
            stacklevel=2,
        )
    return radius


def step(sys: LtiFactorSystem) -> np.ndarray:
    """Advance the state one period in place and return it."""
    sys.X = sys.A @ sys.X
    return sys.X


def selection_matrix(assignment_row, I: int) -> np.ndarray:  # noqa: E741
    """N x NI matrix with row n selecting column ``n * I + assignment_row[n]``."""
    a = np.asarray(assignment_row, dtype=int).ravel()
    if I < 1:
        raise LtiError("need at least one intervention")
    bad = np.flatnonzero((a < 0) | (a >= I))
    if bad.size:
        raise LtiError(f"unit {bad[0]} has intervention {a[bad[0]]} outside [0, {I})")
    N = a.size
    C = np.zeros((N, N * I))
    C[np.arange(N), np.arange(N) * I + a] = 1.0
    return C


@dataclass(frozen=True)
class InterventionSchedule:
    """``assignments[t, n]`` is the intervention unit n receives at step t."""

    assignments: np.ndarray
    n_interventions: int

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.assignments))
        if a.ndim != 2 or a.size == 0:
            raise LtiError("schedule must be a nonempty T x N array")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(a == np.round(a)):
                raise LtiError("schedule entries must be integers")
            a = a.astype(int)
        bad = np.argwhere((a < 0) | (a >= self.n_interventions))
        if bad.size:
            t, n = bad[0]
            raise LtiError(
                f"schedule cell (t={t}, n={n}) has intervention {a[t, n]} outside [0, {self.n_interventions})"
            )
        object.__setattr__(self, "assignments", a)

    @property
    def T(self) -> int:
        return self.assignments.shape[0]

    @property
    def N(self) -> int:
        return self.assignments.shape[1]


def read_schedule(path, n_interventions: int) -> InterventionSchedule:
    """CSV of T rows by N columns, interventions numbered from 1."""
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    try:
        a = np.array([[int(c) for c in r] for r in rows])
    except ValueError as exc:
        raise LtiError(f"bad schedule file {path}: {exc}") from None
    return InterventionSchedule(a - 1, n_interventions)


def write_schedule(schedule: InterventionSchedule, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in schedule.assignments + 1:
            w.writerow(int(v) for v in row)


@dataclass
class LtiSimulation:
    delta_tensor: np.ndarray  # N x T x I
    M_path: np.ndarray  # N x T
    observed: MaskedMatrix  # N x (T * I), column t * I + i
    X_path: np.ndarray  # T x RG, state after each step


def observed_column(t: int, i: int, I: int) -> int:  # noqa: E741
    return t * I + i


def simulate(
    sys: LtiFactorSystem,
    schedule: InterventionSchedule,
    T: int,
    sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LtiSimulation:
    """Run ``T`` steps from the system's current state; ``sys`` is not modified.

    Step ``t`` (0-indexed) applies ``X <- A X``, records the full innovations
    ``B X`` and adds each unit's scheduled innovation to its outcome. The
    observed matrix holds that innovation plus N(0, sigma^2) noise.
    """
    if T < 1:
        raise LtiError("horizon T must be >= 1")
    if schedule.T < T:
        raise LtiError(f"schedule covers {schedule.T} steps, need {T}")
    if schedule.N != sys.N:
        raise LtiError(f"schedule has {schedule.N} units, system has {sys.N}")
    if schedule.n_interventions != sys.I:
        raise LtiError(f"schedule has {schedule.n_interventions} interventions, system has {sys.I}")
    if sigma < 0:
        raise LtiError("sigma must be >= 0")
    if sigma > 0 and rng is None:
        raise LtiError("a random generator is required when sigma > 0")
    check_stability(sys)
    work = replace(sys, X=sys.X.copy(), M=sys.M.copy())
    N, I = sys.N, sys.I
    delta = np.zeros((N, T, I))
    M_path = np.zeros((N, T))
    X_path = np.zeros((T, sys.X.size))
    values = np.zeros((N, T * I))
    mask = np.zeros((N, T * I), dtype=bool)
    units = np.arange(N)
    for t in range(T):
        step(work)
        full = work.innovations()
        delta[:, t, :] = full
        a = schedule.assignments[t]
        obs = full[units, a]
        work.M = work.M + obs
        M_path[:, t] = work.M
        X_path[t] = work.X
        cols = observed_column(t, a, I)
        noise = sigma * rng.standard_normal(N) if sigma > 0 else 0.0
        values[units, cols] = obs + noise
        mask[units, cols] = True
    return LtiSimulation(delta, M_path, MaskedMatrix(values, mask), X_path)


def augmented_matrix(sys: LtiFactorSystem, C) -> np.ndarray:
    """``[[I, C B A], [0, A]]`` acting on the stacked vector ``(M, X)``."""
    C = np.asarray(C, dtype=float)
    N, RG = sys.N, sys.A.shape[0]
    top = np.hstack([np.eye(N), C @ sys.B @ sys.A])
    bottom = np.hstack([np.zeros((RG, N)), sys.A])
    return np.vstack([top, bottom])


def augmented_step(sys: LtiFactorSystem, M, X, C) -> tuple[np.ndarray, np.ndarray]:
    """One step of the joint (outcome, state) recursion."""
    M = np.asarray(M, dtype=float)
    X = np.asarray(X, dtype=float)
    C = np.asarray(C, dtype=float)
    if M.shape != (sys.N,) or X.shape != (sys.A.shape[0],):
        raise LtiError("M or X has the wrong length for this system")
    if C.shape != (sys.N, sys.B.shape[0]):
        raise LtiError(f"selection matrix must be {sys.N} x {sys.B.shape[0]}")
    out = augmented_matrix(sys, C) @ np.concatenate([M, X])
    return out[: sys.N], out[sys.N :]


def control_period_schedule(
    T: int, N: int, I: int, T0: int, rng: np.random.Generator  # noqa: E741
) -> InterventionSchedule:
    """Everyone receives intervention 0 for ``T0`` steps, then uniform random arms."""
    if not 0 <= T0 <= T:
        raise LtiError("control period must satisfy 0 <= T0 <= T")
    a = np.zeros((T, N), dtype=int)
    a[T0:] = rng.integers(0, I, size=(T - T0, N))
    return InterventionSchedule(a, I)


def random_system(N: int, I: int, R: int, G: int, rng: np.random.Generator) -> LtiFactorSystem:  # noqa: E741
    """Random stable system: companion roots drawn inside the disc of radius 0.95."""
    beta = np.zeros((R, G))
    for r in range(R):
        roots = rng.uniform(0.3, 0.95, size=G) * rng.choice([-1.0, 1.0], size=G)
        # prod (1 - z_k L) = 1 - beta_1 L - ... - beta_G L^G
        poly = np.poly(roots)
        beta[r] = -poly[1:]
    spec = LrfSpec(beta, rng.standard_normal((R, G)))
    return build_system(spec, rng.standard_normal((N, R)), rng.uniform(0.5, 1.5, size=(I, R)))


def write_delta_tensor(delta, path) -> None:
    """One N x T block per intervention, each introduced by a comment line."""
    delta = np.asarray(delta, dtype=float)
    N, T, I = delta.shape
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i in range(I):
            fh.write(f"# intervention {i + 1}: {N} units x {T} periods\n")
            for row in delta[:, :, i]:
                w.writerow(FLOAT_FMT.format(v) for v in row)
