"""Experiment orchestration: configuration, pipeline steps and CSV/record emission.

Every step is a plain function taking an :class:`ExperimentConfig` and an output
directory, so the command line, the demos and the tests drive the same code.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import CURVE_FIELDS, AgentConfig, ConfigError, evaluate, load_agent, make_stream, train
from .flowprior import ConditioningSpec, FlowPrior, PriorTrainConfig, load_prior, save_prior, train_prior
from .mazeworld import (
    ACTION_HIGH,
    ACTION_LOW,
    MazeEnv,
    collect_dataset,
    get_layout,
    load_dataset,
    make_env,
    save_dataset,
)
from .metrics import CoverageConfig, GyrationConfig, action_psd, coverage, gyration_sq

log = logging.getLogger(__name__)

OUT_ENV_VAR = "TEMPORL_OUT"


@dataclass
class ExperimentConfig:
    """Every knob of the pipeline. Defaults are the reference (paper-scale) values."""

    mode: str = "temporl"
    layout: str = "room"
    cond: str = "last-actions:1"
    seeds: list[int] = field(default_factory=lambda: [0])
    dataset: str = ""
    prior: str = ""
    out_dir: str = ""
    # offline data
    dataset_layout: str = "room"
    n_traj: int = 4000
    traj_len: int = 500
    expert_noise: float = 0.25
    data_seed: int = 0
    # prior
    prior_epochs: int = 100
    prior_batch_size: int = 400
    prior_lr: float = 1e-4
    prior_weight_decay: float = 1e-6
    prior_hidden: int = 128
    prior_layers: int = 6
    prior_seed: int = 0
    # agent
    gamma: float = 0.99
    polyak: float = 0.995
    alpha: float = 0.0  # 0 selects the per-mode default
    n_step: int = 10
    batch_size: int = 100
    lr: float = 1e-3
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    mixing_hidden: list[int] = field(default_factory=lambda: [128, 128])
    lambda0: float = 0.95
    mixing_grad_scale: float = 1e-9
    replay_size: int = 500_000
    her_ratio: float = 4.0
    epochs: int = 125
    steps_per_epoch: int = 4000
    start_steps: int = 10_000
    update_after: int = 1000
    update_every: int = 50
    updates_per_iteration: int = 0  # 0: one gradient iteration per env step
    eval_episodes: int = 10
    bc_epochs: int = 10
    stop_success: float = 0.0  # 0: never stop early
    # exploration metrics
    explore_traj: int = 20
    explore_len: int = 500
    n_buckets: int = 100
    # spectra
    psd_sequences: int = 100
    psd_len: int = 500
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("sac", "sac_bc", "temporl"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in (self.layout, self.dataset_layout):
            try:
                get_layout(name)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        try:
            ConditioningSpec.parse(self.cond)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def agent_config(self, seed: int) -> AgentConfig:
        return AgentConfig(
            mode=self.mode,
            gamma=self.gamma,
            polyak=self.polyak,
            alpha=self.alpha or None,
            n_step=self.n_step,
            batch_size=self.batch_size,
            lr=self.lr,
            hidden=tuple(self.hidden),
            mixing_hidden=tuple(self.mixing_hidden),
            lambda0=self.lambda0,
            mixing_grad_scale=self.mixing_grad_scale,
            replay_size=self.replay_size,
            her_ratio=self.her_ratio,
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            start_steps=self.start_steps,
            update_after=self.update_after,
            update_every=self.update_every,
            updates_per_iteration=self.updates_per_iteration or None,
            eval_episodes=self.eval_episodes,
            bc_epochs=self.bc_epochs,
            stop_success=self.stop_success or None,
            seed=seed,
        )

    def prior_config(self) -> PriorTrainConfig:
        return PriorTrainConfig(
            epochs=self.prior_epochs,
            batch_size=self.prior_batch_size,
            lr=self.prior_lr,
            weight_decay=self.prior_weight_decay,
            hidden=self.prior_hidden,
            n_layers=self.prior_layers,
            seed=self.prior_seed,
        )


# Overrides that make the pipeline fit a single CPU; see the README for the rationale.
DESK_PRESET = {
    "n_traj": 400,
    "prior_epochs": 10,
    "prior_lr": 1e-3,
    "prior_hidden": 64,
    "hidden": [64, 64],
    "mixing_hidden": [64, 64],
    "replay_size": 100_000,
    "start_steps": 5000,
    "updates_per_iteration": 5,
}
PRESETS = {"paper": {}, "desk": DESK_PRESET}


def _field_types() -> dict[str, object]:
    return typing.get_type_hints(ExperimentConfig)


def _convert(name: str, raw, kind):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind is float:
            return float(text)
        if kind == list[int]:
            return parse_int_list(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_int_list(text: str) -> list[int]:
    """``"0..4"`` (inclusive), ``"0,2,5"``, ``"64x2"`` or a single integer."""
    text = text.strip().replace(" ", "")
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    if "x" in text:
        width, count = text.split("x")
        return [int(width)] * int(count)
    return [int(v) for v in text.split(",") if v]


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_config(preset: str = "paper", file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve defaults < preset < config file < explicit overrides; unknown keys are rejected."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    types = _field_types()
    values: dict = {}
    for layer in (PRESETS[preset], file_values or {}, overrides or {}):
        for key, raw in layer.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _convert(key, raw, types[key])
    return ExperimentConfig(**values)


def config_drift(config: ExperimentConfig) -> dict[str, dict]:
    """Fields that differ from the reference defaults, as ``{name: {"reference", "value"}}``."""
    reference = asdict(ExperimentConfig())
    skip = {"seeds", "dataset", "prior", "out_dir", "mode", "layout", "cond", "workers"}
    return {
        k: {"reference": reference[k], "value": v}
        for k, v in asdict(config).items()
        if k not in skip and reference[k] != v
    }


def output_root(explicit: str | os.PathLike | None = None) -> Path:
    root = Path(explicit or os.environ.get(OUT_ENV_VAR) or "temporl_out")
    root.mkdir(parents=True, exist_ok=True)
    return root


# -- CSV helpers --------------------------------------------------------------
def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


METRIC_HEADER = ["metric", "environment", "value", "stderr"]


def mean_and_spread(values) -> tuple[float, float]:
    """Mean and per-seed standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


# -- pipeline steps -----------------------------------------------------------
def run_collect(config: ExperimentConfig, path: Path) -> Path:
    rng = np.random.default_rng(config.data_seed)
    ds = collect_dataset(config.n_traj, config.traj_len, config.expert_noise, rng, config.dataset_layout)
    save_dataset(ds, path)
    return path


def run_train_prior(config: ExperimentConfig, dataset_path: Path, out_dir: Path, name: str = "prior") -> tuple[Path, Path]:
    """Fit the flow prior; writes ``<name>.bin`` and ``<name>_nll.csv`` (one row per epoch)."""
    ds = load_dataset(dataset_path)
    spec = ConditioningSpec.parse(config.cond)
    prior, curve = train_prior(ds, spec, config.prior_config(), ACTION_LOW, ACTION_HIGH)
    ckpt = out_dir / f"{name}.bin"
    save_prior(prior, ckpt)
    nll_csv = write_csv(out_dir / f"{name}_nll.csv", ["epoch", "nll"], [(i + 1, v) for i, v in enumerate(curve)])
    return ckpt, nll_csv


def _run_tag(config: ExperimentConfig, seed: int) -> str:
    return f"{config.mode}_{config.layout}_seed{seed}"


def train_one_seed(config: ExperimentConfig, seed: int, out_dir: Path) -> dict:
    """Train one agent and write its curve, lambda trace, checkpoint and run record."""
    prior = load_prior(config.prior, ConditioningSpec.parse(config.cond)) if config.mode == "temporl" else None
    dataset = load_dataset(config.dataset) if config.mode == "sac_bc" else None
    env = make_env(config.layout)
    result = train(config.agent_config(seed), env, prior, dataset)
    tag = _run_tag(config, seed)
    write_csv(out_dir / f"curve_{tag}.csv", CURVE_FIELDS, ([r[k] for k in CURVE_FIELDS] for r in result.curve))
    if result.lambda_trace:
        write_csv(out_dir / f"lambda_{tag}.csv", ["env_step", "mean_lambda"], result.lambda_trace)
    result.agent.save(out_dir / f"agent_{tag}.bin")
    record = {
        "version": __version__,
        "seed": seed,
        "config": asdict(config),
        "drift_from_reference": config_drift(config),
        "env_steps": result.env_steps,
        "curve": result.curve,
        "final": {
            "success_rate": result.curve[-1]["success_rate"] if result.curve else 0.0,
            "best_success_rate": max((r["success_rate"] for r in result.curve), default=0.0),
            "mean_lambda": result.curve[-1]["mean_lambda"] if result.curve else 0.0,
        },
    }
    with open(out_dir / f"run_{tag}.json", "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    return record


def _train_worker(args) -> dict:
    config, seed, out_dir = args
    return train_one_seed(config, seed, Path(out_dir))


def run_train_agents(config: ExperimentConfig, out_dir: Path) -> list[dict]:
    """Train every seed, optionally in worker processes; records come back in seed order."""
    if config.mode == "temporl" and not config.prior:
        raise ConfigError("temporl mode needs --prior")
    if config.mode == "sac_bc" and not config.dataset:
        raise ConfigError("sac_bc mode needs --dataset")
    for path in (config.prior if config.mode == "temporl" else "", config.dataset if config.mode == "sac_bc" else ""):
        if path and not Path(path).exists():
            raise ConfigError(f"missing input file {path}")
    jobs = [(config, seed, str(out_dir)) for seed in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_train_worker, jobs))
    return [_train_worker(job) for job in jobs]


def run_eval(checkpoint: Path, layout: str, episodes: int, seed: int, prior: FlowPrior | None = None) -> tuple[float, float]:
    agent = load_agent(checkpoint, prior)
    env = make_env(layout)
    return evaluate(agent, env, episodes, make_stream(seed, "eval"))


# -- exploration and spectra --------------------------------------------------
class PriorSampler:
    """Open-loop action source driven by a prior's own past actions (and the current state)."""

    def __init__(self, prior: FlowPrior, rng: np.random.Generator):
        self.prior = prior
        self.rng = rng
        self.h = max(prior.cond_spec.history_len, 1)
        self.reset()

    def reset(self) -> None:
        self.hist = np.zeros((1, self.h, self.prior.action_dim))

    def __call__(self, pos: np.ndarray) -> np.ndarray:
        cond = self.prior.cond_spec.build(np.asarray(pos).reshape(1, -1), self.hist)
        a = self.prior.sample(cond, self.rng, n=1)[0]
        self.hist = np.concatenate([self.hist[:, 1:], a.reshape(1, 1, -1)], axis=1)
        return a


class UniformSampler:
    def __init__(self, rng: np.random.Generator, dim: int = 2):
        self.rng = rng
        self.dim = dim

    def reset(self) -> None:
        pass

    def __call__(self, pos: np.ndarray) -> np.ndarray:
        return self.rng.uniform(ACTION_LOW, ACTION_HIGH, size=self.dim)


def make_sampler(kind: str, rng: np.random.Generator, prior: FlowPrior | None = None):
    if kind == "uniform":
        return UniformSampler(rng)
    if kind == "prior":
        if prior is None:
            raise ConfigError("the prior sampler needs a prior checkpoint")
        return PriorSampler(prior, rng)
    raise ConfigError(f"unknown sampler {kind!r}; choose uniform or prior")


def rollout_positions(env: MazeEnv, sampler, n_traj: int, length: int) -> list[np.ndarray]:
    """Sampler-driven trajectories from the layout's start; the goal is ignored."""
    trajs = []
    for _ in range(n_traj):
        env.reset()
        sampler.reset()
        states = np.zeros((length, 2))
        for t in range(length):
            states[t] = env.pos
            env.move(sampler(env.pos))
        trajs.append(states)
    return trajs


def sample_action_sequences(sampler, env: MazeEnv, n_seq: int, length: int) -> list[np.ndarray]:
    seqs = []
    for _ in range(n_seq):
        env.reset()
        sampler.reset()
        acts = np.zeros((length, 2))
        for t in range(length):
            acts[t] = sampler(env.pos)
            env.move(acts[t])
        seqs.append(acts)
    return seqs


def exploration_metrics(config: ExperimentConfig, kind: str, prior: FlowPrior | None = None) -> dict[str, list[float]]:
    """Per-seed coverage and radius of gyration for one sampler."""
    spec = get_layout(config.layout)
    low, high = spec.bounds
    cov_cfg = CoverageConfig(config.n_buckets, low, high)
    gyr_cfg = GyrationConfig(spec.diagonal)
    out = {"coverage": [], "gyration_sq": []}
    for seed in config.seeds:
        env = MazeEnv(spec, seed)
        sampler = make_sampler(kind, make_stream(seed, "prior"), prior)
        trajs = rollout_positions(env, sampler, config.explore_traj, config.explore_len)
        out["coverage"].append(coverage(trajs, cov_cfg))
        out["gyration_sq"].append(gyration_sq(trajs, gyr_cfg))
    return out


def run_explore_eval(config: ExperimentConfig, kinds: list[str], out_path: Path, prior: FlowPrior | None = None) -> dict:
    """Coverage/U_g² table; ``environment`` is ``<layout>/<sampler>``, stderr is the per-seed std."""
    results, rows = {}, []
    for kind in kinds:
        res = exploration_metrics(config, kind, prior)
        results[kind] = res
        for metric, values in res.items():
            mean, spread = mean_and_spread(values)
            rows.append((metric, f"{config.layout}/{kind}", mean, spread))
    write_csv(out_path, METRIC_HEADER, rows)
    return results


def run_psd(config: ExperimentConfig, out_path: Path, prior: FlowPrior | None = None, dataset_path: str | None = None) -> dict[str, np.ndarray]:
    """Spectra of dataset actions and prior/uniform samples; one row per frequency bin."""
    env = make_env(config.layout)
    spectra: dict[str, np.ndarray] = {}
    if dataset_path:
        ds = load_dataset(dataset_path)
        spectra["dataset"] = action_psd([t.actions for t in ds.trajectories[: config.psd_sequences]])
    rng_seed = config.seeds[0]
    if prior is not None:
        sampler = PriorSampler(prior, make_stream(rng_seed, "prior"))
        spectra["prior"] = action_psd(sample_action_sequences(sampler, env, config.psd_sequences, config.psd_len))
    uniform = UniformSampler(make_stream(rng_seed, "policy_noise"))
    spectra["uniform"] = action_psd(sample_action_sequences(uniform, env, config.psd_sequences, config.psd_len))
    lengths = {len(v) for v in spectra.values()}
    if len(lengths) != 1:
        raise ValueError(f"spectra have different bin counts {sorted(lengths)}; use equal sequence lengths")
    (n_bins,) = lengths
    length = 2 * (n_bins - 1)
    names = list(spectra)
    rows = [(k, k / max(length, 1), *(spectra[n][k] for n in names)) for k in range(n_bins)]
    write_csv(out_path, ["bin", "frequency", *names], rows)
    return spectra


def lambda_trend(trace: list[tuple[int, float]], total_steps: int, fraction: float = 0.1) -> tuple[float, float]:
    """Mean probe lambda over the first and the final ``fraction`` of training."""
    steps = np.array([s for s, _ in trace], dtype=np.float64)
    lams = np.array([v for _, v in trace])
    first = lams[steps <= fraction * total_steps]
    last = lams[steps > (1.0 - fraction) * total_steps]
    if len(first) == 0 or len(last) == 0:
        raise ValueError("lambda trace does not cover both ends of training")
    return float(first.mean()), float(last.mean())


def summarize_runs(run_dir: Path, out_path: Path) -> list[tuple]:
    """Aggregate run records into ``metric,environment,value,stderr`` rows."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for path in sorted(run_dir.glob("run_*.json")):
        with open(path) as fh:
            rec = json.load(fh)
        cfg = rec["config"]
        groups.setdefault((cfg["mode"], cfg["layout"]), []).append(rec)
    if not groups:
        raise FileNotFoundError(f"no run records in {run_dir}")
    rows = []
    for (mode, layout), recs in sorted(groups.items()):
        env = f"{layout}/{mode}"
        for metric, values in (
            ("final_success_rate", [r["final"]["success_rate"] for r in recs]),
            ("best_success_rate", [r["final"]["best_success_rate"] for r in recs]),
            ("final_mean_lambda", [r["final"]["mean_lambda"] for r in recs]),
            ("env_steps", [r["env_steps"] for r in recs]),
            ("seeds_solved", [float(sum(r["final"]["best_success_rate"] > 0 for r in recs))]),
        ):
            mean, spread = mean_and_spread(values)
            rows.append((metric, env, mean, spread))
    write_csv(out_path, METRIC_HEADER, rows)
    return rows


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    types = _field_types()
    unknown = set(kw) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return replace(config, **kw)


# -- desk-scale suite ---------------------------------------------------------
@dataclass
class SuiteResult:
    out_dir: Path
    explore: dict
    psd: dict[str, np.ndarray]
    runs: dict[str, list[dict]]
    lambda_traces: dict[str, list[list[tuple[int, float]]]]


DESK_RUNS = {
    # name: (mode, layout, overrides)
    "room_temporl": ("temporl", "room", {"epochs": 10, "steps_per_epoch": 2000}),
    "corridor_temporl": ("temporl", "corridor_short",
                         {"epochs": 60, "steps_per_epoch": 5000, "eval_episodes": 1, "stop_success": 0.01}),
    "corridor_sac": ("sac", "corridor_short",
                     {"epochs": 60, "steps_per_epoch": 5000, "eval_episodes": 1, "stop_success": 0.01}),
}


def run_desk_suite(out_dir: Path, seeds: list[int] | None = None, runs: list[str] | None = None) -> SuiteResult:
    """Collect, fit the prior, measure exploration on ``room81`` and action spectra, then train the desk-scale agents.

    The corridor runs stop at their first successful evaluation; the corridor is
    deterministic, so a single evaluation episode decides success.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(range(5)) if seeds is None else seeds
    base = build_config("desk", overrides={"seeds": seeds})
    dataset = run_collect(base, out_dir / "dataset.csv")
    ckpt, _ = run_train_prior(base, dataset, out_dir)
    prior = load_prior(ckpt)
    explore_cfg = with_overrides(base, layout="room81")
    explore = run_explore_eval(explore_cfg, ["uniform", "prior"], out_dir / "explore_room81.csv", prior)
    psd = run_psd(base, out_dir / "psd.csv", prior, str(dataset))
    results, traces = {}, {}
    for name in runs or list(DESK_RUNS):
        mode, layout, extra = DESK_RUNS[name]
        cfg = with_overrides(base, mode=mode, layout=layout, prior=str(ckpt), dataset=str(dataset), **extra)
        run_dir = out_dir / name
        run_dir.mkdir(exist_ok=True)
        results[name] = run_train_agents(cfg, run_dir)
        traces[name] = [_read_trace(run_dir / f"lambda_{_run_tag(cfg, s)}.csv") for s in seeds]
        summarize_runs(run_dir, run_dir / "metrics.csv")
    return SuiteResult(out_dir, explore, psd, results, traces)


def _read_trace(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    return [(int(r["env_step"]), float(r["mean_lambda"])) for r in read_csv(path)]


__all__ = [
    "ExperimentConfig", "DESK_PRESET", "build_config", "read_config_file", "config_drift", "output_root",
    "run_collect", "run_train_prior", "run_train_agents", "train_one_seed", "run_eval", "run_explore_eval",
    "run_psd", "summarize_runs", "lambda_trend", "exploration_metrics", "parse_int_list", "with_overrides",
    "DESK_RUNS", "SuiteResult", "run_desk_suite",
]
