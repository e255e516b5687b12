"""Seeded experiment runner: ILE-vs-noise sweeps, penetration success rates,
and the E-step convergence-threshold study.

Every result cell is computed from (config, method, sigma, seed, threshold)
alone, so cells can run in any order or in parallel and rerun bit-identically.
Rows are appended to CSV as they finish; a rerun skips cells already on disk.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .baselines import mlt_irl
from .em import EmOptions, GibbsOptions, robust_irl
from .errors import ConfigurationError, PreconditionError, RobustIrlError, ValidationError
from .mdp import Norm, learned_policy_ile, reward_table, value_iteration
from .observation import ObsKind
from .world import (Domain, World, build_world, expert_policy, generate_observations, load_world_config,
                    penetration_trial, random_attack_trial, simulate_expert)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENV_PREFIX = "ROBUST_IRL_"


class Method(str, enum.Enum):
    ROBUST = "RobustIRL"
    ROBUST_SOUND = "RobustIRLSoundOnly"
    ROBUST_VISION = "RobustIRLVisionOnly"
    MLT = "MLT"
    RANDOM = "RandomAttack"


class Study(str, enum.Enum):
    SWEEP = "sweep"
    ATTACK = "attack"
    CONVERGENCE = "convergence"


@dataclass(frozen=True)
class ExperimentConfig:
    world: str = "drone"
    noise_levels: tuple = (0.0, 0.05, 0.1, 0.2)
    seeds: tuple = tuple(range(10))
    attack_seeds: tuple = tuple(range(100))
    methods: tuple = (Method.ROBUST, Method.MLT)
    thresholds: tuple = (0.2, 0.1, 0.05, 0.01)
    em_beta: float = 1.0
    em_epsilon: float = 0.01
    em_max_iterations: int = 100
    gibbs_epsilon: float = 0.01
    gibbs_burn_in: int = 500
    gibbs_thin: int = 5
    gibbs_block_size: int = 200
    gibbs_max_sweeps: int = 50_000
    gibbs_span: int = 0
    norm: Norm = Norm.L2
    out_dir: str = "results"

    def __post_init__(self):
        object.__setattr__(self, "noise_levels", tuple(float(x) for x in self.noise_levels))
        object.__setattr__(self, "seeds", tuple(int(x) for x in self.seeds))
        object.__setattr__(self, "attack_seeds", tuple(int(x) for x in self.attack_seeds))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        object.__setattr__(self, "norm", Norm(self.norm))
        if not self.noise_levels:
            raise ConfigurationError("noise_levels must not be empty")
        if not self.seeds or not self.attack_seeds:
            raise ConfigurationError("seeds must not be empty")
        if not self.methods:
            raise ConfigurationError("methods must not be empty")
        if any(s < 0 for s in self.noise_levels):
            raise ConfigurationError("noise levels must be nonnegative")
        if any(t <= 0 for t in self.thresholds):
            raise ConfigurationError("thresholds must be positive")

    def em_options(self, seed: int, threshold: Optional[float] = None, estep: str = "auto") -> EmOptions:
        gibbs = GibbsOptions(epsilon=self.gibbs_epsilon if threshold is None else threshold,
                             burn_in=self.gibbs_burn_in, thin=self.gibbs_thin,
                             block_size=self.gibbs_block_size, max_sweeps=self.gibbs_max_sweeps, seed=seed,
                             span=self.gibbs_span)
        return EmOptions(seed=seed, em_epsilon=self.em_epsilon, max_iterations=self.em_max_iterations,
                         beta=self.em_beta, estep=estep, gibbs=gibbs)

    def load_world(self) -> World:
        return build_world(load_world_config(self.world, env={}))

    def hash(self) -> str:
        """Digest of every setting that can change a result (not the output location)."""
        payload = {k: v for k, v in _plain(asdict(self)).items() if k != "out_dir"}
        payload["world_config"] = repr(load_world_config(self.world, env={}))
        payload["schema"] = SCHEMA_VERSION
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


_LIST_KEYS = {"noise_levels", "seeds", "attack_seeds", "methods", "thresholds"}
_CONFIG_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_seed_range(text: str) -> tuple:
    """``a..b`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(x) for x in text.split("..", 1))
        if hi < lo:
            raise ConfigurationError(f"empty seed range {text!r}")
        return tuple(range(lo, hi + 1))
    return tuple(int(x) for x in text.split(",") if x.strip())


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in ("seeds", "attack_seeds"):
        return parse_seed_range(raw)
    if key in _LIST_KEYS:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    kind = _CONFIG_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: {exc}") from None
    return raw


def parse_experiment_config(text: str, env: Optional[dict] = None, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """``key = value`` lines; ``ROBUST_IRL_<KEY>`` environment variables override them."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {line_no}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ConfigurationError(f"line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    env = os.environ if env is None else env
    for key in _CONFIG_TYPES:
        if ENV_PREFIX + key.upper() in env:
            values[key] = _coerce(key, env[ENV_PREFIX + key.upper()])
    if base_dir is not None and "world" in values:
        candidate = base_dir / values["world"]
        if candidate.exists():
            values["world"] = str(candidate)
    try:
        return ExperimentConfig(**values)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None


def load_experiment_config(path, env: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"no experiment config at {path}")
    return parse_experiment_config(path.read_text(), env, path.parent)


@dataclass(frozen=True)
class ResultRow:
    study: str
    domain: str
    method: str
    sigma: float
    seed: int
    threshold: float = float("nan")
    ile: float = float("nan")
    em_iterations: int = 0
    estep_method: str = ""
    wall_time_seconds: float = 0.0
    outcome: str = ""
    status: str = "ok"
    message: str = ""

    def __post_init__(self):
        if not np.isnan(self.ile) and self.ile < 0:
            raise ValidationError("ile must be nonnegative")

    @property
    def key(self) -> tuple:
        return (self.study, self.method, repr(float(self.sigma)), int(self.seed), repr(float(self.threshold)))


ROW_FIELDS = tuple(f.name for f in fields(ResultRow))


def _row_to_csv(row: ResultRow) -> list:
    out = []
    for name in ROW_FIELDS:
        v = getattr(row, name)
        out.append(repr(float(v)) if isinstance(v, float) else v)
    return out


def _row_from_csv(rec: dict) -> ResultRow:
    kwargs = {}
    for f in fields(ResultRow):
        raw = rec[f.name]
        if f.type == "float":
            kwargs[f.name] = float(raw)
        elif f.type == "int":
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = raw
    return ResultRow(**kwargs)


def read_results(path) -> tuple[Optional[str], list]:
    """Return (config hash from the header, rows)."""
    path = Path(path)
    config_hash = None
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for part in line[1:].split():
                    if part.startswith("config_hash="):
                        config_hash = part.split("=", 1)[1]
                continue
            lines.append(line)
    rows = [_row_from_csv(rec) for rec in csv.DictReader(lines)]
    return config_hash, rows


class _Writer:
    """Single appender for one study's CSV; writes the header on creation."""

    def __init__(self, path: Path, config_hash: str):
        self.path = path
        if path.exists():
            found, self.existing = read_results(path)
            if found != config_hash:
                raise ValidationError(f"{path} was produced by config {found}, not {config_hash}; "
                                      "choose another output directory")
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                fh.write(f"# schema={SCHEMA_VERSION} config_hash={config_hash}\n")
                csv.writer(fh).writerow(ROW_FIELDS)
            self.existing = []

    def done(self) -> set:
        return {row.key for row in self.existing if row.status == "ok"}

    def append(self, row: ResultRow) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(_row_to_csv(row))
            fh.flush()


# ----------------------------------------------------------------- cells

def _demos(world: World, seed: int):
    pi = expert_policy(world)
    return [simulate_expert(world.hm, pi, world.config.horizon, np.random.default_rng([seed, 0, i]))
            for i in range(world.config.n_demos)]


def _observations(world: World, demos, sigma: float, seed: int):
    # The noise stream depends on the seed only, so noise levels are paired.
    return [generate_observations(d, world, sigma, np.random.default_rng([seed, 1, i]))
            for i, d in enumerate(demos)]


def _method_kind(world: World, method: Method) -> ObsKind:
    if method is Method.ROBUST_SOUND:
        return ObsKind.SOUND
    if method is Method.ROBUST_VISION:
        return ObsKind.VISION
    return ObsKind.SOUND if world.config.domain is Domain.DRONE else ObsKind.FUSED


def _learn(cfg: ExperimentConfig, world: World, method: Method, sigma: float, seed: int,
           threshold: Optional[float] = None, estep: str = "auto"):
    """Returns (theta, em_iterations, estep_method)."""
    omega = _observations(world, _demos(world, seed), sigma, seed)
    hm = world.with_model(_method_kind(world, method))
    if method is Method.MLT:
        return mlt_irl(omega, hm).theta, 0, ""
    result = robust_irl(omega, hm, cfg.em_options(seed, threshold, estep))
    return result.theta, len(result.trace), result.trace.records[-1].estep_method.value


def run_cell(cfg: ExperimentConfig, study: Study, method: Method, sigma: float, seed: int,
             threshold: float = float("nan"), world: Optional[World] = None) -> ResultRow:
    """One result row; learner failures become rows with status 'error'."""
    world = world or cfg.load_world()
    study, method = Study(study), Method(method)
    base = dict(study=study.value, domain=world.config.name, method=method.value, sigma=float(sigma),
                seed=int(seed), threshold=float(threshold))
    start = time.perf_counter()
    try:
        theta, iterations, estep = None, 0, ""
        outcome = ""
        if method is not Method.RANDOM:
            th = None if np.isnan(threshold) else float(threshold)
            theta, iterations, estep = _learn(cfg, world, method, sigma, seed, th,
                                              "gibbs" if study is Study.CONVERGENCE else "auto")
        if study is Study.ATTACK:
            trial_seed = np.random.default_rng([seed, 2])
            if method is Method.RANDOM:
                result = random_attack_trial(world, seed=seed)
            else:
                # Greedy in the learned reward, like the ILE score; learned weights have no fixed scale.
                _, policy = value_iteration(world.mdp, reward_table(theta, world.feats))
                result = penetration_trial(world, policy, seed=trial_seed)
            outcome = result.outcome.value
        ile = float("nan") if theta is None else learned_policy_ile(world.mdp, world.feats, theta,
                                                                     world.theta_true, cfg.norm)
        return ResultRow(**base, ile=ile, em_iterations=iterations, estep_method=estep,
                         wall_time_seconds=time.perf_counter() - start, outcome=outcome)
    except (RobustIrlError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("cell %s failed: %s", base, exc)
        return ResultRow(**base, wall_time_seconds=time.perf_counter() - start, status="error",
                         message=f"{type(exc).__name__}: {exc}")


def _cells(cfg: ExperimentConfig, study: Study) -> list:
    if study is Study.SWEEP:
        return [(m, s, seed, float("nan")) for s in cfg.noise_levels for seed in cfg.seeds
                for m in cfg.methods if m is not Method.RANDOM]
    if study is Study.ATTACK:
        return [(m, s, seed, float("nan")) for s in cfg.noise_levels for seed in cfg.attack_seeds
                for m in cfg.methods]
    return [(m, s, seed, t) for t in cfg.thresholds for s in cfg.noise_levels for seed in cfg.seeds
            for m in cfg.methods if m is not Method.RANDOM]


def _cell_worker(args):
    cfg, study, method, sigma, seed, threshold = args
    return run_cell(cfg, study, method, sigma, seed, threshold)


def run_study(cfg: ExperimentConfig, study: Study, workers: int = 1,
              out_path: Optional[Path] = None, progress: Optional[Callable] = None) -> list:
    """Run every missing cell of a study, appending rows to its CSV; returns all rows."""
    study = Study(study)
    world = cfg.load_world()
    if study is Study.ATTACK and world.config.domain is not Domain.PATROL:
        raise ConfigurationError("success-rate runs need a patrol world")
    out_path = out_path or Path(cfg.out_dir) / f"{study.value}_{world.config.name}.csv"
    writer = _Writer(Path(out_path), cfg.hash())
    done = writer.done()
    rows = [r for r in writer.existing if r.status == "ok"]
    todo = [c for c in _cells(cfg, study)
            if ResultRow(study.value, world.config.name, c[0].value, c[1], c[2], c[3]).key not in done]

    def record(row):
        writer.append(row)
        rows.append(row)
        if progress:
            progress(row)

    if workers <= 1:
        for method, sigma, seed, threshold in todo:
            record(run_cell(cfg, study, method, sigma, seed, threshold, world))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_cell_worker, (cfg, study, *c)) for c in todo]
            for fut in as_completed(futures):
                record(fut.result())
    return rows


def run_noise_sweep(cfg: ExperimentConfig, workers: int = 1, **kw) -> list:
    return run_study(cfg, Study.SWEEP, workers, **kw)


def run_success_rate(cfg: ExperimentConfig, workers: int = 1, **kw) -> list:
    return run_study(cfg, Study.ATTACK, workers, **kw)


def run_convergence_study(cfg: ExperimentConfig, workers: int = 1, **kw) -> list:
    if not cfg.thresholds:
        raise ConfigurationError("the convergence study needs thresholds")
    return run_study(cfg, Study.CONVERGENCE, workers, **kw)


# ----------------------------------------------------------------- summaries

def mean_by(rows: Iterable[ResultRow], key: Callable, value: Callable) -> dict:
    groups: dict = {}
    for row in rows:
        if row.status != "ok":
            continue
        groups.setdefault(key(row), []).append(value(row))
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def success_rates(rows: Iterable[ResultRow]) -> dict:
    return mean_by([r for r in rows if r.study == Study.ATTACK.value], lambda r: (r.method, r.sigma),
                   lambda r: float(r.outcome == "success"))


# ----------------------------------------------------------------- plots

def emit_plots(rows: Sequence[ResultRow], out_dir) -> list:
    """Write one SVG line chart per (study, domain); returns the paths."""
    rows = [r for r in rows if r.status == "ok"]
    if not rows:
        raise PreconditionError("no result rows to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    groups: dict = {}
    for row in rows:
        groups.setdefault((row.study, row.domain), []).append(row)
    with matplotlib.rc_context({"svg.hashsalt": "robust-irl", "svg.fonttype": "path"}):
        for (study, domain), group in sorted(groups.items()):
            fig, ax = plt.subplots(figsize=(6, 4))
            if study == Study.SWEEP.value:
                name, xlabel, ylabel = f"ile_vs_sigma_{domain}.svg", "noise sigma", "mean ILE"
                series = mean_by(group, lambda r: (r.method, r.sigma), lambda r: r.ile)
            elif study == Study.ATTACK.value:
                name, xlabel, ylabel = f"success_rate_{domain}.svg", "noise sigma", "success rate"
                series = success_rates(group)
            else:
                name, xlabel, ylabel = f"ile_vs_threshold_{domain}.svg", "E-step threshold", "mean ILE"
                series = mean_by(group, lambda r: (r.method, r.threshold), lambda r: r.ile)
            methods = sorted({m for m, _ in series})
            for method in methods:
                xs = sorted(x for m, x in series if m == method)
                ax.plot(xs, [series[(method, x)] for x in xs], marker="o", label=method)
            if study == Study.CONVERGENCE.value:
                ax.set_xscale("log")
                ax.invert_xaxis()
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            ax.set_title(domain)
            ax.legend()
            fig.tight_layout()
            path = out_dir / name
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
            plt.close(fig)
            written.append(path)
    return written
