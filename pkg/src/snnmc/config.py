"""Experiment configuration: a flat ``key = value`` INI file with sections.

Every key maps to one :class:`ExperimentConfig` field. Section names only
group keys for readability; a key may appear under any section. Unknown keys
and bad values raise :class:`ConfigError` naming the offending field.

Example::

    [experiment]
    experiment = recsys_general
    estimators = snn, knn, softimpute
    repeats = 10
    master_seed = 7
    output_dir = out/general

    [snn]
    rank_policy = energy:0.999
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .spectral import EnergyThreshold, Fixed, RankPolicy, SpectralError, UniversalThreshold

EXPERIMENTS = (
    "teaser_mcar",
    "teaser_limited_mnar",
    "teaser_general_mnar",
    "recsys_limited",
    "recsys_general",
    "panel_synthetic",
    "lti_sequential",
)
ESTIMATORS = ("snn", "knn", "usvt", "softimpute")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "recsys_general"
    estimators: tuple = ("snn",)
    repeats: int = 10
    master_seed: int = 0
    output_dir: str | None = None

    # factor model
    m: int = 80
    n: int = 80
    r: int = 5
    m_core: int = 20
    n_core: int = 20
    lo: float = 1.0
    hi: float = 5.0
    sigma: float = 0.0

    # MCAR teaser
    mcar_p: float = 0.65

    # limited MNAR propensities
    threshold: float = 2.3
    alpha_core: float = 0.7
    alpha_user: float = 0.35
    alpha_item: float = 0.35
    alpha_standard: float = 0.1
    fraction_core: float = 0.9
    fraction_user: float = 0.7
    fraction_item: float = 0.7
    fraction_standard: float = 0.05

    # panel adoption
    pre_periods: int = 19
    prob_mild: float = 0.1
    prob_moderate: float = 0.3
    prob_severe: float = 0.5

    # sequential-decision (LTI) simulation
    lti_units: int = 30
    lti_interventions: int = 2
    lti_factors: int = 2
    lti_lags: int = 2
    lti_periods: int = 20
    lti_control_periods: int = 10
    lti_beta: str = ""  # "b11 b12; b21 b22", empty for a random stable system
    lti_rho_init: str = ""
    lti_theta: str = ""
    lti_omega: str = ""
    lti_schedule: str = ""  # CSV path, interventions numbered from 1

    # SNN
    rank_policy: str = "energy:0.999"
    k_folds: str = "auto"
    min_anchor_rows: str = "1"
    ci_level: float = 0.95

    # baselines
    knn_k: int = 5
    usvt_eta: float = 1.0
    softimpute_lambda: float | None = None
    softimpute_max_iter: int = 200
    softimpute_tol: float = 1e-5

    # histograms
    bins: int = 8

    def __post_init__(self):
        validate(self)

    def to_ini(self) -> str:
        lines = ["[experiment]"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(v)
            elif v is None:
                v = ""
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


# experiment-specific defaults applied before the file's own values
RECIPE_DEFAULTS = {
    "teaser_mcar": {"repeats": 1, "estimators": ("snn", "usvt", "softimpute")},
    "teaser_limited_mnar": {"repeats": 1, "estimators": ("snn", "usvt", "softimpute")},
    "teaser_general_mnar": {"repeats": 1, "n_core": 30, "estimators": ("snn", "usvt", "softimpute")},
    "recsys_limited": {},
    "recsys_general": {"n_core": 30},
    # sigma = 2% of the value range
    "panel_synthetic": {"m": 38, "n": 31, "r": 3, "lo": 30.0, "hi": 130.0, "sigma": 2.0},
    "lti_sequential": {"repeats": 1, "rank_policy": "fixed:2"},
}


def parse_rank_policy(text: str) -> RankPolicy:
    name, _, arg = text.strip().lower().partition(":")
    try:
        if name == "fixed":
            return Fixed(int(arg))
        if name == "energy":
            return EnergyThreshold(float(arg) if arg else 0.999)
        if name == "universal":
            return UniversalThreshold(float(arg)) if arg else UniversalThreshold()
    except (ValueError, SpectralError) as exc:
        raise ConfigError("rank_policy", str(exc)) from None
    raise ConfigError("rank_policy", f"unknown policy {text!r} (use fixed:K, energy:F or universal[:C])")


def parse_matrix(text: str, field_name: str):
    """``"1 2; 3 4"`` -> [[1.0, 2.0], [3.0, 4.0]]."""
    try:
        rows = [[float(x) for x in row.replace(",", " ").split()] for row in text.split(";")]
    except ValueError as exc:
        raise ConfigError(field_name, f"bad matrix literal: {exc}") from None
    if not rows or any(len(r) != len(rows[0]) or not r for r in rows):
        raise ConfigError(field_name, "matrix rows must be nonempty and equally long")
    return rows


def _auto_or_int(value: str, field_name: str):
    if value == "auto":
        return "auto"
    try:
        v = int(value)
    except ValueError:
        raise ConfigError(field_name, f"expected an integer or 'auto', got {value!r}") from None
    if v < 1:
        raise ConfigError(field_name, "must be >= 1")
    return v


def validate(cfg: ExperimentConfig) -> None:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {cfg.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    if not cfg.estimators:
        raise ConfigError("estimators", "need at least one estimator")
    for est in cfg.estimators:
        if est not in ESTIMATORS:
            raise ConfigError("estimators", f"unknown estimator {est!r}; choose from {', '.join(ESTIMATORS)}")
    if len(set(cfg.estimators)) != len(cfg.estimators):
        raise ConfigError("estimators", "estimators must not repeat")
    if cfg.repeats < 1:
        raise ConfigError("repeats", "must be >= 1")
    if cfg.master_seed < 0:
        raise ConfigError("master_seed", "must be >= 0")
    for name in ("m", "n", "r", "bins", "knn_k", "softimpute_max_iter"):
        if getattr(cfg, name) < 1:
            raise ConfigError(name, "must be >= 1")
    for name in ("m_core", "n_core"):
        if getattr(cfg, name) < 0:
            raise ConfigError(name, "must be >= 0")
    if cfg.m_core > cfg.m:
        raise ConfigError("m_core", "cannot exceed m")
    if cfg.n_core > cfg.n:
        raise ConfigError("n_core", "cannot exceed n")
    if not cfg.hi > cfg.lo:
        raise ConfigError("hi", "must exceed lo")
    if cfg.sigma < 0:
        raise ConfigError("sigma", "must be >= 0")
    if not 0.0 < cfg.mcar_p <= 1.0:
        raise ConfigError("mcar_p", "must lie in (0, 1]")
    for name in ("prob_mild", "prob_moderate", "prob_severe"):
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(name, "must lie in [0, 1]")
    if cfg.pre_periods < 1:
        raise ConfigError("pre_periods", "must be >= 1")
    if not 0.0 < cfg.ci_level < 1.0:
        raise ConfigError("ci_level", "must lie in (0, 1)")
    if not 0.0 < cfg.usvt_eta <= 1.0:
        raise ConfigError("usvt_eta", "must lie in (0, 1]")
    if cfg.softimpute_lambda is not None and cfg.softimpute_lambda < 0:
        raise ConfigError("softimpute_lambda", "must be >= 0")
    if not cfg.softimpute_tol > 0:
        raise ConfigError("softimpute_tol", "must be > 0")
    for name in ("lti_units", "lti_interventions", "lti_factors", "lti_lags", "lti_periods"):
        if getattr(cfg, name) < 1:
            raise ConfigError(name, "must be >= 1")
    if not 0 <= cfg.lti_control_periods <= cfg.lti_periods:
        raise ConfigError("lti_control_periods", "must lie in [0, lti_periods]")
    parse_rank_policy(cfg.rank_policy)
    _auto_or_int(cfg.k_folds, "k_folds")
    _auto_or_int(cfg.min_anchor_rows, "min_anchor_rows")
    for name in ("lti_beta", "lti_rho_init", "lti_theta", "lti_omega"):
        if getattr(cfg, name):
            parse_matrix(getattr(cfg, name), name)


def _coerce(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    default = f.default
    if f.name == "estimators":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if f.name == "softimpute_lambda":
        return None if raw in ("", "auto") else float(raw)
    if f.name == "output_dir":
        return raw or None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def from_mapping(values: dict) -> ExperimentConfig:
    """Build a config from raw (string or typed) values over the recipe defaults."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    kwargs: dict = {}
    experiment = values.get("experiment", ExperimentConfig.experiment)
    kwargs.update(RECIPE_DEFAULTS.get(str(experiment).strip(), {}))
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
        if isinstance(raw, str):
            try:
                kwargs[key] = _coerce(known[key], raw)
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw!r}") from None
        else:
            kwargs[key] = raw
    return ExperimentConfig(**kwargs)


def load_config(path, overrides: dict | None = None, defaults: dict | None = None) -> ExperimentConfig:
    """Read an INI file; ``defaults`` sit under the file's values, ``overrides`` above."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    values: dict = dict(defaults or {})
    seen: set = set()
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key in seen:
                raise ConfigError(key, "key given in more than one section")
            seen.add(key)
            values[key] = raw
    values.update(overrides or {})
    return from_mapping(values)
