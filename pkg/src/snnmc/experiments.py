"""Seeded experiment recipes, estimator dispatch and result tables.

Each recipe splits its randomness into a fixed part, drawn once from the
master seed, and a per-replication part drawn from ``master_seed ^ rep``:

* limited MNAR (recsys and teaser): A and P fixed, D redrawn;
* general MNAR: V fixed, U (hence A and D) redrawn;
* MCAR teaser: A fixed, D redrawn;
* panel: signal and noise fixed, adoption redrawn;
* LTI: the whole system redrawn.

Estimators are scored on the cells with ``D == 0`` that they estimated;
cells they could not estimate are counted, never filled in.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import knn_impute, soft_impute, usvt
from .config import ExperimentConfig, parse_matrix, parse_rank_policy
from .lti import (
    LrfSpec,
    build_system,
    control_period_schedule,
    random_system,
    read_schedule,
    simulate,
)
from .matrix import FLOAT_FMT, Completion, MaskedMatrix, evaluate, histogram, total_variation
from .simulators import (
    CohortPropensitySpec,
    PanelAdoptionSpec,
    add_noise,
    gen_core_factors,
    general_mnar_mask,
    limited_mnar_propensity,
    mcar_mask,
    panel_adoption_mask,
    sample_mask,
    scale_to_range,
)
from .snn import SnnConfig, snn_complete

FIXED_STREAM = 0xF1CED
REP_STREAM = 0x5EED


def fixed_rng(cfg: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.master_seed, FIXED_STREAM])


def rep_seed(cfg: ExperimentConfig, rep: int) -> int:
    return cfg.master_seed ^ rep


def rep_rng(cfg: ExperimentConfig, rep: int) -> np.random.Generator:
    return np.random.default_rng([rep_seed(cfg, rep), REP_STREAM])


@dataclass
class Instance:
    """One replication: ground truth, what the estimators see, where to score."""

    truth: np.ndarray
    data: MaskedMatrix
    eval_mask: np.ndarray
    P: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def cohort_spec(cfg: ExperimentConfig) -> CohortPropensitySpec:
    return CohortPropensitySpec(
        m_core=cfg.m_core,
        n_core=cfg.n_core,
        threshold=cfg.threshold,
        alpha={"core": cfg.alpha_core, "user": cfg.alpha_user, "item": cfg.alpha_item, "standard": cfg.alpha_standard},
        fraction={
            "core": cfg.fraction_core,
            "user": cfg.fraction_user,
            "item": cfg.fraction_item,
            "standard": cfg.fraction_standard,
        },
        lo=cfg.lo,
        hi=cfg.hi,
    )


def _limited_signal(cfg: ExperimentConfig) -> np.ndarray:
    rng = fixed_rng(cfg)
    U = gen_core_factors(cfg.m, max(cfg.m_core, 1), cfg.r, rng)
    V = gen_core_factors(cfg.n, max(cfg.n_core, 1), cfg.r, rng)
    return scale_to_range(U @ V.T, cfg.lo, cfg.hi)


def _observe(A, D, cfg, rng) -> MaskedMatrix:
    Y = add_noise(A, cfg.sigma, rng) if cfg.sigma > 0 else A
    return MaskedMatrix(Y, D)


def limited_instance(cfg: ExperimentConfig, rep: int) -> Instance:
    A = _limited_signal(cfg)
    P = limited_mnar_propensity(A, cohort_spec(cfg))
    rng = rep_rng(cfg, rep)
    D = sample_mask(P, rng)
    return Instance(A, _observe(A, D, cfg, rng), ~D, P=P)


def mcar_instance(cfg: ExperimentConfig, rep: int) -> Instance:
    A = _limited_signal(cfg)
    rng = rep_rng(cfg, rep)
    D = mcar_mask(cfg.m, cfg.n, cfg.mcar_p, rng)
    return Instance(A, _observe(A, D, cfg, rng), ~D, P=np.full(A.shape, cfg.mcar_p))


def general_instance(cfg: ExperimentConfig, rep: int) -> Instance:
    V = gen_core_factors(cfg.n, max(cfg.n_core, 1), cfg.r, fixed_rng(cfg))
    rng = rep_rng(cfg, rep)
    U = rng.standard_normal((cfg.m, cfg.r))
    A = scale_to_range(U @ V.T, cfg.lo, cfg.hi)
    D = general_mnar_mask(U, V, cfg.n_core)
    return Instance(A, _observe(A, D, cfg, rng), ~D, P=D.astype(float))


def panel_signal(cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit loadings times time factors (a level plus random walks), scaled to [lo, hi].

    The level factor absorbs the affine rescaling, so the scaled panel keeps rank r.
    """
    theta = rng.standard_normal((cfg.m, cfg.r))
    steps = rng.standard_normal((cfg.n, cfg.r - 1))
    time_factors = np.hstack([np.ones((cfg.n, 1)), np.cumsum(steps, axis=0) / np.sqrt(cfg.n)])
    return scale_to_range(theta @ time_factors.T, cfg.lo, cfg.hi)


def panel_instance(cfg: ExperimentConfig, rep: int) -> Instance:
    base = fixed_rng(cfg)
    A = panel_signal(cfg, base)
    Y = add_noise(A, cfg.sigma, base)
    spec = PanelAdoptionSpec(cfg.pre_periods, (cfg.prob_mild, cfg.prob_moderate, cfg.prob_severe))
    D, classes = panel_adoption_mask(Y, spec, rep_rng(cfg, rep), return_classes=True)
    return Instance(A, MaskedMatrix(Y, D), ~D, extras={"classes": classes})


def lti_system(cfg: ExperimentConfig, rng: np.random.Generator):
    if cfg.lti_beta:
        beta = np.array(parse_matrix(cfg.lti_beta, "lti_beta"))
        R, G = beta.shape
        rho = np.array(parse_matrix(cfg.lti_rho_init, "lti_rho_init")) if cfg.lti_rho_init else rng.standard_normal((R, G))
        theta = (
            np.array(parse_matrix(cfg.lti_theta, "lti_theta"))
            if cfg.lti_theta
            else rng.standard_normal((cfg.lti_units, R))
        )
        omega = (
            np.array(parse_matrix(cfg.lti_omega, "lti_omega"))
            if cfg.lti_omega
            else rng.uniform(0.5, 1.5, size=(cfg.lti_interventions, R))
        )
        return build_system(LrfSpec(beta, rho), theta, omega)
    return random_system(cfg.lti_units, cfg.lti_interventions, cfg.lti_factors, cfg.lti_lags, rng)


def lti_instance(cfg: ExperimentConfig, rep: int) -> Instance:
    rng = rep_rng(cfg, rep)
    sys = lti_system(cfg, rng)
    T = cfg.lti_periods
    if cfg.lti_schedule:
        schedule = read_schedule(cfg.lti_schedule, sys.I)
    else:
        schedule = control_period_schedule(T, sys.N, sys.I, cfg.lti_control_periods, rng)
    sim = simulate(sys, schedule, T, cfg.sigma, rng)
    truth = sim.delta_tensor.reshape(sys.N, T * sys.I)
    # counterfactual cells after the control period
    post = np.zeros(truth.shape, dtype=bool)
    post[:, cfg.lti_control_periods * sys.I :] = True
    return Instance(truth, sim.observed, post & ~sim.observed.mask, extras={"sim": sim, "schedule": schedule})


RECIPES = {
    "teaser_mcar": mcar_instance,
    "teaser_limited_mnar": limited_instance,
    "teaser_general_mnar": general_instance,
    "recsys_limited": limited_instance,
    "recsys_general": general_instance,
    "panel_synthetic": panel_instance,
    "lti_sequential": lti_instance,
}


def make_instance(cfg: ExperimentConfig, rep: int) -> Instance:
    return RECIPES[cfg.experiment](cfg, rep)


def snn_config(cfg: ExperimentConfig, seed: int = 0) -> SnnConfig:
    k = cfg.k_folds if cfg.k_folds == "auto" else int(cfg.k_folds)
    mar = cfg.min_anchor_rows if cfg.min_anchor_rows == "auto" else int(cfg.min_anchor_rows)
    return SnnConfig(
        rank_policy=parse_rank_policy(cfg.rank_policy),
        k_folds=k,
        min_anchor_rows=mar,
        ci_level=cfg.ci_level,
        seed=seed,
    )


def run_estimator(name: str, data: MaskedMatrix, cfg: ExperimentConfig, targets="all_missing", seed: int = 0) -> Completion:
    if name == "snn":
        return snn_complete(data, targets, snn_config(cfg, seed))
    if name == "knn":
        return knn_impute(data, cfg.knn_k)
    if name == "usvt":
        return usvt(data, cfg.usvt_eta)
    if name == "softimpute":
        return soft_impute(data, cfg.softimpute_lambda, cfg.softimpute_max_iter, cfg.softimpute_tol)
    raise ValueError(f"unknown estimator {name!r}")


@dataclass
class RepResult:
    estimator: str
    rep: int
    rmse: float
    mae: float
    scored: int
    unestimated: int
    error: str = ""
    hist_recovered: np.ndarray | None = None


def bin_edges(cfg: ExperimentConfig) -> np.ndarray:
    return np.linspace(cfg.lo, cfg.hi, cfg.bins + 1)


def score(est: str, rep: int, completion: Completion, inst: Instance, cfg: ExperimentConfig) -> RepResult:
    ok = inst.eval_mask & np.isfinite(completion.values)
    unestimated = int((inst.eval_mask & ~ok).sum())
    if not ok.any():
        return RepResult(est, rep, math.nan, math.nan, 0, unestimated, error="no cell estimated")
    ev = evaluate(np.nan_to_num(completion.values), inst.truth, ok)
    # estimates a hair outside the rating range land in the end bins
    vals = np.clip(completion.values[np.isfinite(completion.values)], cfg.lo, cfg.hi)
    return RepResult(est, rep, ev.rmse, ev.mae, ev.count, unestimated, hist_recovered=histogram(vals, bin_edges(cfg)))


def run_replication(cfg: ExperimentConfig, rep: int) -> list[RepResult]:
    inst = make_instance(cfg, rep)
    out = []
    for est in cfg.estimators:
        try:
            completion = run_estimator(est, inst.data, cfg, seed=rep_seed(cfg, rep))
        except Exception as exc:  # recorded, the run continues
            out.append(RepResult(est, rep, math.nan, math.nan, 0, int(inst.eval_mask.sum()), error=repr(exc)))
            continue
        out.append(score(est, rep, completion, inst, cfg))
    return out


@dataclass
class TableRow:
    estimator: str
    experiment: str
    mean_rmse: float
    std_rmse: float
    mean_mae: float
    std_mae: float
    repeats: int
    failed_repeats: int
    mean_unestimated: float


def _sample_std(x: np.ndarray) -> float:
    # a single run has no spread to estimate; report 0 rather than NaN
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


@dataclass
class ResultTable:
    rows: list[TableRow]
    results: list[RepResult]

    HEADER = (
        "estimator",
        "experiment",
        "mean_rmse",
        "std_rmse",
        "mean_mae",
        "std_mae",
        "repeats",
        "failed_repeats",
        "mean_unestimated",
    )

    @classmethod
    def from_results(cls, experiment: str, estimators, results: list[RepResult]) -> "ResultTable":
        rows = []
        for est in estimators:
            mine = [r for r in results if r.estimator == est]
            good = [r for r in mine if not r.error]
            rmse = np.array([r.rmse for r in good])
            mae = np.array([r.mae for r in good])
            rows.append(
                TableRow(
                    estimator=est,
                    experiment=experiment,
                    mean_rmse=float(rmse.mean()) if good else math.nan,
                    std_rmse=_sample_std(rmse),
                    mean_mae=float(mae.mean()) if good else math.nan,
                    std_mae=_sample_std(mae),
                    repeats=len(mine),
                    failed_repeats=len(mine) - len(good),
                    mean_unestimated=float(np.mean([r.unestimated for r in mine])) if mine else 0.0,
                )
            )
        return cls(rows, results)

    def row(self, estimator: str) -> TableRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def per_rep(self, estimator: str, metric: str = "rmse") -> np.ndarray:
        rs = sorted((r for r in self.results if r.estimator == estimator), key=lambda r: r.rep)
        return np.array([getattr(r, metric) for r in rs])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            fh.write("# std columns use the sample (n-1) denominator over successful repeats\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow(
                    [
                        r.estimator,
                        r.experiment,
                        FLOAT_FMT.format(r.mean_rmse),
                        FLOAT_FMT.format(r.std_rmse),
                        FLOAT_FMT.format(r.mean_mae),
                        FLOAT_FMT.format(r.std_mae),
                        r.repeats,
                        r.failed_repeats,
                        FLOAT_FMT.format(r.mean_unestimated),
                    ]
                )


def write_rep_csv(results: list[RepResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "rep", "rmse", "mae", "scored", "unestimated", "error"])
        for r in results:
            w.writerow([r.estimator, r.rep, FLOAT_FMT.format(r.rmse), FLOAT_FMT.format(r.mae), r.scored, r.unestimated, r.error])


@dataclass
class Histograms:
    """Counts summed over replications; ``recovered`` is keyed by estimator."""

    edges: np.ndarray
    true: np.ndarray
    revealed: np.ndarray
    recovered: dict

    def tv(self, estimator: str) -> float:
        return total_variation(self.true, self.recovered[estimator])

    def tv_revealed(self) -> float:
        return total_variation(self.true, self.revealed)

    def write_csv(self, path) -> None:
        names = list(self.recovered)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "true", "revealed", *names])
            for b in range(self.true.size):
                w.writerow(
                    [FLOAT_FMT.format(self.edges[b]), FLOAT_FMT.format(self.edges[b + 1]), int(self.true[b]), int(self.revealed[b])]
                    + [int(self.recovered[n][b]) for n in names]
                )

    def write_tv_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "tv_from_true"])
            w.writerow(["revealed", FLOAT_FMT.format(self.tv_revealed())])
            for n in self.recovered:
                w.writerow([n, FLOAT_FMT.format(self.tv(n))])


def teaser_histograms(cfg: ExperimentConfig, results: list[RepResult]) -> Histograms:
    edges = bin_edges(cfg)
    true = np.zeros(cfg.bins, dtype=int)
    revealed = np.zeros(cfg.bins, dtype=int)
    for rep in range(cfg.repeats):
        inst = make_instance(cfg, rep)
        true += histogram(inst.truth, edges)
        revealed += histogram(inst.data.values[inst.data.mask], edges)
    recovered = {}
    for est in cfg.estimators:
        counts = [r.hist_recovered for r in results if r.estimator == est and r.hist_recovered is not None]
        recovered[est] = np.sum(counts, axis=0) if counts else np.zeros(cfg.bins, dtype=int)
    return Histograms(edges, true, revealed, recovered)


@dataclass
class ExperimentOutput:
    table: ResultTable
    histograms: Histograms | None = None


def _replication_job(args):
    cfg, rep = args
    return run_replication(cfg, rep)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, output_dir=None) -> ExperimentOutput:
    """Run every replication, optionally in worker processes, and tabulate.

    Replication outputs are written to ``rep_XXX`` subdirectories and merged
    in replication order, so the tables do not depend on ``jobs``.
    """
    reps = list(range(cfg.repeats))
    if jobs > 1 and len(reps) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_rep = list(pool.map(_replication_job, [(cfg, r) for r in reps]))
    else:
        per_rep = [run_replication(cfg, r) for r in reps]
    results = [r for batch in per_rep for r in batch]
    table = ResultTable.from_results(cfg.experiment, cfg.estimators, results)
    hists = teaser_histograms(cfg, results) if cfg.experiment.startswith("teaser_") else None
    out_dir = output_dir if output_dir is not None else cfg.output_dir
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rep, batch in zip(reps, per_rep):
            sub = out / f"rep_{rep:03d}"
            sub.mkdir(exist_ok=True)
            write_rep_csv(batch, sub / "metrics.csv")
        table.write_csv(out / "results.csv")
        write_rep_csv(results, out / "replications.csv")
        if hists is not None:
            hists.write_csv(out / "histograms.csv")
            hists.write_tv_csv(out / "tv_distance.csv")
        (out / "config.ini").write_text(cfg.to_ini())
    return ExperimentOutput(table, hists)
