"""Command-line front end: ``snnmc {simulate,complete,experiment,lti}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from pathlib import Path

import numpy as np

from .anchors import AnchorError
from .baselines import BaselineError
from .config import ESTIMATORS, ConfigError, ExperimentConfig, from_mapping, load_config
from .experiments import make_instance, run_estimator, run_experiment
from .lti import LtiError, UnstableSystemWarning, write_delta_tensor, write_schedule
from .matrix import FLOAT_FMT, MaskedMatrix, MatrixError, evaluate, read_masked_csv, write_dense_csv, write_masked_csv
from .simulators import SimulationError
from .snn import SnnCompletion, SnnError
from .spectral import SpectralError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, MatrixError, LtiError, SimulationError, BaselineError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="INI configuration file")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--output", help="output directory (overrides output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for replications")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snnmc", description="Synthetic nearest neighbours matrix completion")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw A, P, D and the observed matrix for each replication")
    _common(p)

    p = sub.add_parser("complete", help="complete a CSV matrix with NA for missing cells")
    _common(p, config_required=False)
    p.add_argument("--input", required=True, help="CSV matrix; missing cells hold the missing token")
    p.add_argument("--estimator", default="snn", choices=ESTIMATORS)
    p.add_argument("--missing-token", default="NA")

    p = sub.add_parser("experiment", help="run a seeded experiment and write the result table")
    _common(p)

    p = sub.add_parser("lti", help="simulate the sequential-decision factor model")
    _common(p)
    p.add_argument("--evaluate", action="store_true", help="score SNN on held-out counterfactual innovations")
    return parser


def _resolve(args, require_config: bool = True, defaults: dict | None = None) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.output is not None:
        overrides["output_dir"] = args.output
    if args.config:
        cfg = load_config(args.config, overrides, defaults)
    elif require_config:
        raise ConfigError("config", "a configuration file is required")
    else:
        cfg = from_mapping(overrides)
    if args.jobs < 1:
        raise ConfigError("jobs", "must be >= 1")
    if cfg.output_dir is None:
        raise ConfigError("output_dir", "no output directory given (set output_dir or pass --output)")
    return cfg


def _write_sidecar(path: Path, cfg: ExperimentConfig, rep: int) -> None:
    path.write_text(f"# replication {rep}, seed {cfg.master_seed ^ rep}\n" + cfg.to_ini())


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep in range(cfg.repeats):
        inst = make_instance(cfg, rep)
        sub = out / f"rep_{rep:03d}"
        sub.mkdir(exist_ok=True)
        write_dense_csv(inst.truth, sub / "A.csv")
        if inst.P is not None:
            write_dense_csv(inst.P, sub / "P.csv")
        write_dense_csv(inst.data.mask.astype(float), sub / "D.csv")
        write_masked_csv(inst.data, sub / "Y.csv")
        _write_sidecar(sub / "spec.txt", cfg, rep)
    print(f"wrote {cfg.repeats} replication(s) of {cfg.experiment} to {out}")
    return EXIT_OK


def write_status_csv(status: np.ndarray, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in status:
            w.writerow(row.tolist())


def write_ci_csv(completion: SnnCompletion, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "estimate", "lo", "hi", "variance", "K", "n_anchor_cols", "fold_sizes"])
        for (i, j), est in sorted(completion.estimates.items()):
            w.writerow(
                [
                    i,
                    j,
                    FLOAT_FMT.format(est.value),
                    FLOAT_FMT.format(est.ci[0]),
                    FLOAT_FMT.format(est.ci[1]),
                    FLOAT_FMT.format(est.variance),
                    est.plan.k,
                    len(est.plan.anchor_cols),
                    ";".join(str(len(f)) for f in est.plan.anchor_row_folds),
                ]
            )


def complete_to_dir(data: MaskedMatrix, estimator: str, cfg: ExperimentConfig, out: Path):
    """Run one estimator and write completed.csv, status.csv (and ci.csv for snn)."""
    completion = run_estimator(estimator, data, cfg, seed=cfg.master_seed)
    out.mkdir(parents=True, exist_ok=True)
    done = np.isfinite(completion.values)
    write_masked_csv(MaskedMatrix(np.nan_to_num(completion.values), done), out / "completed.csv")
    write_status_csv(completion.status, out / "status.csv")
    if isinstance(completion, SnnCompletion):
        write_ci_csv(completion, out / "ci.csv")
    return completion


def cmd_complete(args) -> int:
    cfg = _resolve(args, require_config=False)
    data = read_masked_csv(args.input, args.missing_token)
    completion = complete_to_dir(data, args.estimator, cfg, Path(cfg.output_dir))
    failed = int(completion.failed.sum())
    print(f"{args.estimator}: estimated {int(completion.estimated.sum())} cell(s), {failed} unestimable")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _resolve(args)
    result = run_experiment(cfg, jobs=args.jobs)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["estimator", "mean_rmse", "std_rmse", "mean_mae", "std_mae", "repeats", "failed_repeats"])
    for r in result.table.rows:
        w.writerow([r.estimator, f"{r.mean_rmse:.4g}", f"{r.std_rmse:.4g}", f"{r.mean_mae:.4g}", f"{r.std_mae:.4g}", r.repeats, r.failed_repeats])
    if result.histograms is not None:
        h = result.histograms
        print(f"tv(true, revealed) = {h.tv_revealed():.4f}")
        for name in h.recovered:
            print(f"tv(true, {name}) = {h.tv(name):.4f}")
    return EXIT_OK


def cmd_lti(args) -> int:
    cfg = _resolve(args, defaults={"experiment": "lti_sequential"})
    if cfg.experiment != "lti_sequential":
        raise ConfigError("experiment", "the lti command needs experiment = lti_sequential")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rep in range(cfg.repeats):
        inst = make_instance(cfg, rep)
        sim = inst.extras["sim"]
        sub = out / f"rep_{rep:03d}"
        sub.mkdir(exist_ok=True)
        write_delta_tensor(sim.delta_tensor, sub / "delta_tensor.csv")
        write_dense_csv(sim.M_path, sub / "M_path.csv")
        write_masked_csv(sim.observed, sub / "observed.csv")
        write_schedule(inst.extras["schedule"], sub / "schedule.csv")
        _write_sidecar(sub / "spec.txt", cfg, rep)
        if args.evaluate:
            if not inst.eval_mask.any():
                raise ConfigError("lti_control_periods", "no counterfactual cells to evaluate")
            targets = list(zip(*np.nonzero(inst.eval_mask)))
            comp = run_estimator("snn", inst.data, cfg, targets=targets, seed=cfg.master_seed ^ rep)
            ok = inst.eval_mask & np.isfinite(comp.values)
            n_fail = int(inst.eval_mask.sum() - ok.sum())
            if ok.any():
                ev = evaluate(np.nan_to_num(comp.values), inst.truth, ok)
                max_err = float(np.abs(comp.values[ok] - inst.truth[ok]).max())
            else:
                ev, max_err = None, float("nan")
            rows.append((rep, ev, max_err, n_fail))
    if args.evaluate:
        with (out / "lti_eval.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "rmse", "mae", "max_abs_error", "scored", "unestimated"])
            for rep, ev, max_err, n_fail in rows:
                rmse, mae, cnt = (ev.rmse, ev.mae, ev.count) if ev else (float("nan"), float("nan"), 0)
                w.writerow([rep, FLOAT_FMT.format(rmse), FLOAT_FMT.format(mae), FLOAT_FMT.format(max_err), cnt, n_fail])
        for rep, ev, max_err, n_fail in rows:
            print(f"rep {rep}: snn counterfactual max |error| = {max_err:.3g} ({n_fail} unestimable)")
    print(f"wrote {cfg.repeats} simulation(s) to {out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "complete": cmd_complete, "experiment": cmd_experiment, "lti": cmd_lti}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    warnings.simplefilter("always", UnstableSystemWarning)
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"snnmc {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SnnError, AnchorError, SpectralError, OSError, RuntimeError, ValueError) as exc:
        print(f"snnmc {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
