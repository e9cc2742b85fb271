"""Experiment configuration, deterministic grid execution and CSV emission."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("dp-noise", "error-decay", "variance-limit", "nchain-eval", "frozenlake-control")
ALGOS_BY_KIND = {
    "dp-noise": ("retrace", "retrace-lr", "grape"),
    "nchain-eval": ("grape", "retrace-lr"),
    "frozenlake-control": ("grape", "retrace-lr"),
}
DP_ENVS = ("frozenlake8x8", "nchain")
CSV_COLUMNS = ("experiment", "env", "alpha", "lambda", "eta", "beta", "sigma", "N",
               "trial", "step", "metric", "value")
GRID_FIELDS = ("alpha", "lam", "eta", "beta", "sigma", "N")

# section -> keys accepted in config files; the key names match CLI flags
CONFIG_SECTIONS = {
    "experiment": ("kind", "algo", "trials", "seed", "out", "workers"),
    "env": ("env", "gamma", "slip", "start_state"),
    "grid": ("alpha", "lambda", "eta", "beta", "sigma", "N"),
    "schedule": ("iters", "delta", "K", "k", "samples", "blocks", "block_size", "steps",
                 "policy_period", "buffer_capacity"),
}

KIND_DEFAULTS = {
    "dp-noise": dict(env="frozenlake8x8", algo="retrace", lam=[0.8], sigma=[0.0], iters=1000, trials=100),
    "error-decay": dict(alpha=[0.0, 0.99], delta=0.5, K=50),
    "variance-limit": dict(alpha=[0.99], k=2000, samples=100_000),
    "nchain-eval": dict(env="nchain", algo="grape", lam=[0.0], blocks=800, block_size=250, trials=24),
    "frozenlake-control": dict(env="frozenlake8x8", algo="grape", lam=[0.0], N=[250], steps=500_000,
                               trials=6),
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    kind: str
    env: str = ""
    algo: str = ""
    alpha: list[float] = field(default_factory=lambda: [0.0])
    lam: list[float] = field(default_factory=lambda: [0.0])
    eta: list[float] = field(default_factory=lambda: [1.0])
    beta: list[float] = field(default_factory=lambda: [1.0])
    sigma: list[float] = field(default_factory=lambda: [0.0])
    N: list[int] = field(default_factory=lambda: [250])
    gamma: float = 0.99
    slip: float = 0.2
    start_state: str = "center"
    iters: int = 1000
    delta: float = 0.5
    K: int = 50
    k: int = 2000
    samples: int = 100_000
    blocks: int = 800
    block_size: int = 250
    steps: int = 500_000
    policy_period: int = 100_000
    buffer_capacity: int = 500_000
    trials: int = 1
    seed: int = 0
    workers: int = 1
    out: str | None = None

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "ExperimentConfig":
        if kind not in KINDS:
            raise ConfigError("kind", f"unknown experiment {kind!r}; expected one of {KINDS}")
        values = {**KIND_DEFAULTS[kind], **{k: v for k, v in overrides.items() if v is not None}}
        cfg = cls(kind=kind, **values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError("kind", f"unknown experiment {self.kind!r}")
        allowed = ALGOS_BY_KIND.get(self.kind)
        if allowed is not None and self.algo not in allowed:
            raise ConfigError("algo", f"{self.algo!r} not valid for {self.kind}; expected one of {allowed}")
        if self.kind == "dp-noise" and self.env not in DP_ENVS:
            raise ConfigError("env", f"expected one of {DP_ENVS}, got {self.env!r}")
        for name in GRID_FIELDS:
            if not getattr(self, name):
                raise ConfigError(name, "grid must be nonempty")
        _check_all("alpha", self.alpha, lambda v: 0.0 <= v <= 1.0, "in [0, 1]")
        _check_all("lambda", self.lam, lambda v: 0.0 <= v <= 1.0, "in [0, 1]")
        _check_all("eta", self.eta, lambda v: 0.0 < v <= 1.0, "in (0, 1]")
        _check_all("beta", self.beta, lambda v: v > 0.0, "positive")
        _check_all("sigma", self.sigma, lambda v: v >= 0.0, "nonnegative")
        _check_all("N", self.N, lambda v: v >= 1, "positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if not 0.0 <= self.slip <= 0.5:
            raise ConfigError("slip", "must lie in [0, 0.5]")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError("delta", "must lie in [0, 1)")
        if self.start_state not in ("center", "uniform-random"):
            raise ConfigError("start_state", "expected 'center' or 'uniform-random'")
        for name in ("iters", "K", "k", "samples", "blocks", "block_size", "steps",
                     "policy_period", "buffer_capacity", "trials", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be at least 1")
        if self.kind == "variance-limit" and self.samples < 2:
            raise ConfigError("samples", "need at least 2 draws for a variance")
        if self.steps < self.policy_period:
            raise ConfigError("steps", "must be at least policy_period")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")


def _check_all(name, values, ok, what):
    for v in values:
        if not (isinstance(v, (int, float)) and math.isfinite(v) and ok(v)):
            raise ConfigError(name, f"value {v!r} must be {what}")


_LIST_KEYS = {"alpha": float, "lambda": float, "eta": float, "beta": float, "sigma": float, "N": int}
_SCALAR_KEYS = {
    "kind": str, "algo": str, "env": str, "start_state": str, "out": str,
    "gamma": float, "slip": float, "delta": float,
    "trials": int, "seed": int, "workers": int, "iters": int, "K": int, "k": int, "samples": int,
    "blocks": int, "block_size": int, "steps": int, "policy_period": int, "buffer_capacity": int,
}


def _attr(key: str) -> str:
    return "lam" if key == "lambda" else key


def parse_value(key: str, text: str):
    """Convert a config or flag string for ``key`` (lists are comma-separated)."""
    try:
        if key in _LIST_KEYS:
            conv = _LIST_KEYS[key]
            items = [s.strip() for s in str(text).split(",") if s.strip()]
            if not items:
                raise ConfigError(key, "grid must be nonempty")
            return [conv(s) for s in items]
        return _SCALAR_KEYS[key](text)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(key, f"cannot parse {text!r}") from None


def read_config_file(path: str | Path) -> dict:
    """Parse an INI file into keyword overrides; unknown sections or keys raise :class:`ConfigError`."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep N and K distinct from n and k
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError("config", str(exc)) from None
    values = {}
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise ConfigError(section, f"unknown section; expected one of {tuple(CONFIG_SECTIONS)}")
        for key, text in parser.items(section):
            if key not in CONFIG_SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[_attr(key)] = parse_value(key, text)
    return values


# -- rows and CSV ---------------------------------------------------------------------


class ResultRow(NamedTuple):
    experiment: str
    env: str
    alpha: float | None
    lam: float | None
    eta: float | None
    beta: float | None
    sigma: float | None
    N: int | None
    trial: int
    step: int
    metric: str
    value: float


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def write_csv(rows: Iterable[ResultRow], path_or_file) -> None:
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    finally:
        if own:
            fh.close()


def rows_to_csv_text(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def read_csv(path_or_file) -> list[ResultRow]:
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, newline="", encoding="utf-8") if own else path_or_file
    try:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        out = []
        for rec in reader:
            opt = [float(s) if s else None for s in rec[2:7]]
            out.append(ResultRow(rec[0], rec[1], *opt, int(rec[7]) if rec[7] else None,
                                 int(rec[8]), int(rec[9]), rec[10], float(rec[11])))
        return out
    finally:
        if own:
            fh.close()


# -- execution ---------------------------------------------------------------------------


class GridPoint(NamedTuple):
    alpha: float | None = None
    lam: float | None = None
    eta: float | None = None
    beta: float | None = None
    sigma: float | None = None
    N: int | None = None


def expand_grid(cfg: ExperimentConfig) -> list[GridPoint]:
    """Grid points in a fixed order; axes that do not apply to the experiment are left empty."""
    rate_axis = "alpha" if cfg.algo == "grape" else "eta"
    rates = cfg.alpha if rate_axis == "alpha" else cfg.eta
    if cfg.kind in ("error-decay", "variance-limit"):
        return [GridPoint(alpha=a) for a in cfg.alpha]
    if cfg.kind == "dp-noise":
        if cfg.algo == "retrace":
            return [GridPoint(lam=l, sigma=s) for s, l in itertools.product(cfg.sigma, cfg.lam)]
        return [GridPoint(lam=l, sigma=s, **{rate_axis: r})
                for s, l, r in itertools.product(cfg.sigma, cfg.lam, rates)]
    if cfg.kind == "nchain-eval":
        return [GridPoint(lam=l, **{rate_axis: r}) for l, r in itertools.product(cfg.lam, rates)]
    return [GridPoint(lam=l, N=n, beta=b, **{rate_axis: r})
            for l, n, r, b in itertools.product(cfg.lam, cfg.N, rates, cfg.beta)]


def _trials_for(cfg: ExperimentConfig) -> int:
    return 1 if cfg.kind == "error-decay" else cfg.trials


def _env_label(cfg: ExperimentConfig) -> str:
    if cfg.kind == "error-decay":
        return "delta=%.17g" % cfg.delta
    if cfg.kind == "variance-limit":
        return "iid-normal"
    return cfg.env or ("nchain" if cfg.kind == "nchain-eval" else "frozenlake8x8")


def _rows(cfg, point: GridPoint, trial: int, metric: str, values, steps=None) -> list[ResultRow]:
    steps = range(len(values)) if steps is None else steps
    return [ResultRow(cfg.kind, _env_label(cfg), *point[:6], trial, int(s), metric, float(v))
            for s, v in zip(steps, values)]


def _params(cfg: ExperimentConfig, point: GridPoint):
    from .mdp import AlgoParams

    return AlgoParams(alpha=point.alpha or 0.0, lam=point.lam or 0.0, gamma=cfg.gamma,
                      eta=point.eta, beta=point.beta, sigma=point.sigma)


def _nchain_env(cfg: ExperimentConfig, rng):
    from .envs import NChainEnv

    start = "uniform-random" if cfg.start_state == "uniform-random" else None
    return NChainEnv(cfg.slip, start_state=start, rng=rng)


def run_task(cfg: ExperimentConfig, point: GridPoint, trial: int) -> list[ResultRow]:
    """Rows of one (grid point, trial); the stream depends only on ``(seed, trial)``."""
    from . import dp_lab, model_free
    from .envs import FrozenLakeEnv, frozenlake_mdp, nchain_mdp
    from .mdp import dirichlet_policy

    rng = dp_lab.trial_rng(cfg.seed, trial)
    if cfg.kind == "error-decay":
        coeffs = [dp_lab.error_decay_coefficient(point.alpha, cfg.delta, cfg.K, k) for k in range(cfg.K)]
        return _rows(cfg, point, trial, "coefficient", coeffs)
    if cfg.kind == "variance-limit":
        ratios = [dp_lab.variance_ratio(point.alpha, k) for k in range(cfg.k + 1)]
        rows = _rows(cfg, point, trial, "variance_ratio", ratios)
        if point.alpha < 1.0:
            rows += _rows(cfg, point, trial, "limit", [dp_lab.variance_ratio_limit(point.alpha)], [cfg.k])
        emp = dp_lab.simulate_variance_ratio(point.alpha, cfg.k, cfg.samples, rng)
        return rows + _rows(cfg, point, trial, "empirical_variance", [emp], [cfg.k])
    params = _params(cfg, point)
    if cfg.kind == "dp-noise":
        mdp = frozenlake_mdp(cfg.gamma) if cfg.env == "frozenlake8x8" else nchain_mdp(cfg.slip, cfg.gamma)
        return _rows(cfg, point, trial, "nrmse", dp_lab.dp_noise_trial(mdp, params, cfg.iters, rng, cfg.algo))
    if cfg.kind == "nchain-eval":
        pi = dirichlet_policy(rng, 22, 2)
        mu = dirichlet_policy(rng, 22, 2)
        env = _nchain_env(cfg, np.random.default_rng(rng.integers(2**63)))
        series = model_free.nchain_eval_run(env, pi, mu, params, cfg.algo, cfg.blocks, cfg.block_size, rng)
        return _rows(cfg, point, trial, series.metric, series.values)
    env = FrozenLakeEnv(rng=np.random.default_rng(rng.integers(2**63)))
    series = model_free.frozenlake_control_run(env, params, cfg.algo, cfg.steps, point.N,
                                               cfg.policy_period, cfg.buffer_capacity, rng)
    return _rows(cfg, point, trial, series.metric, series.values, series.steps)


def _run_task_args(args):
    return run_task(*args)


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    """All rows for the grid x trials, ordered by (grid point, trial) whatever the worker count."""
    cfg.validate()
    tasks = [(cfg, p, t) for p in expand_grid(cfg) for t in range(_trials_for(cfg))]
    log.info("%s: %d tasks on %d worker(s)", cfg.kind, len(tasks), cfg.workers)
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_task_args, tasks))
    else:
        chunks = [run_task(*t) for t in tasks]
    return [row for chunk in chunks for row in chunk]


def output_path(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out) if cfg.out else Path(".")
    return out / f"{cfg.kind}.csv"


def config_summary(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
