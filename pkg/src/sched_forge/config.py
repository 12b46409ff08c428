"""Experiment configuration: nested dataclasses loaded from a YAML file.

Every field has a default, so an empty file is a valid configuration. Unknown keys
are rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .ddppo import PbtConfig, SyncConfig, TrainConfig
from .errors import ConfigError
from .metrics import GOALS
from .neural import FeatureConfig
from .rl_core import EnvConfig, PpoConfig
from .simulator import EpisodeConfig
from .workload import SynthParams, WorkloadTrace, holdout_split, load_trace, synthesize_trace


@dataclass(frozen=True)
class DatasetConfig:
    # SWF file; when unset a synthetic trace is generated from ``synthetic``
    path: str | None = None
    # heavy enough that the queue usually holds a real choice
    synthetic: SynthParams = field(default_factory=lambda: SynthParams(jobs=2500, mean_interarrival=150.0))
    # trailing fraction of the trace kept out of training
    holdout_fraction: float = 0.2
    strict: bool = False
    # synthesis seed, kept apart from the experiment seed so every run sees one dataset
    seed: int = 1

    @property
    def name(self) -> str:
        if self.path:
            return Path(self.path).name
        s = self.synthetic
        return f"synthetic-{s.jobs}j-{s.nodes}n"


@dataclass(frozen=True)
class ClusterConfig:
    # None: read from the trace header (MaxNodes, or MaxProcs / procs per node)
    nodes: int | None = None
    window: int = 128
    backfill: bool = True


@dataclass(frozen=True)
class EnvSection:
    sequence_length: int = 128
    episodes_per_batch: int = 4
    reward_scale: float = 0.01
    max_walltime: float = 86_400.0
    wait_horizon: float = 12 * 3600.0


@dataclass(frozen=True)
class TrainSection:
    iterations: int = 200
    checkpoint_every: int = 50


@dataclass(frozen=True)
class PbtSection:
    enabled: bool = False
    population: int = 8
    quantile: float = 0.25
    perturb_factors: tuple[float, ...] = (0.8, 1.2)
    cadence: int = 5
    resample_prob: float = 0.0
    hyperparams: tuple[str, ...] = ("lr", "entropy_coef", "clip_eps")


@dataclass(frozen=True)
class TuneSection:
    enabled: bool = False
    trials: int = 4
    # iterations per trial; the winning configuration is then trained in full
    iterations: int = 20
    max_concurrent: int = 1
    space: dict = field(default_factory=lambda: {
        "lr": {"range": [1e-4, 3e-3], "log": True},
        "entropy_coef": {"range": [0.0, 0.05]},
    })


@dataclass(frozen=True)
class EvaluateSection:
    iterations: int = 10
    sequence_length: int = 1024
    schedulers: tuple[str, ...] = ("fcfs", "sjf", "f1", "wfp3", "unicef", "random")
    # every iteration replays one sequence instead of sampling a fresh one
    fixed_sequence: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    goal: str = "bsld"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    env: EnvSection = field(default_factory=EnvSection)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        gamma=1.0, lam=0.95, lr=1e-3, entropy_coef=0.01, optimizer="adam", max_grad_norm=1.0
    ))
    sync: SyncConfig = field(default_factory=SyncConfig)
    train: TrainSection = field(default_factory=TrainSection)
    pbt: PbtSection = field(default_factory=PbtSection)
    tune: TuneSection = field(default_factory=TuneSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def __post_init__(self):
        if self.goal not in GOALS:
            raise ConfigError(f"unknown goal {self.goal!r}; choose from {sorted(GOALS)}")
        if self.train.iterations < 0:
            raise ConfigError("train.iterations must be >= 0")
        if self.evaluate.iterations < 1 or self.evaluate.sequence_length < 1:
            raise ConfigError("evaluate.iterations and evaluate.sequence_length must be >= 1")
        if not self.evaluate.schedulers:
            raise ConfigError("evaluate.schedulers must name at least one scheduler")
        if not 0 <= self.dataset.holdout_fraction < 1:
            raise ConfigError("dataset.holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def override(self, **changes) -> "ExperimentConfig":
        """Apply dotted-path overrides, e.g. ``override(**{"train.iterations": 5})``."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node[leaf] = value
        return from_dict(data)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str, base=None):
    """Layer ``data`` over ``base`` (default: ``cls()``), recursing into nested sections."""
    base = cls() if base is None else base
    if data is None:
        return base
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}".lstrip("."), getattr(base, key))
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = _coerce(hint, value, f"{where}.{key}".lstrip("."))
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _coerce(hint, value, where: str):
    # YAML 1.1 reads "1e-3" as a string
    accepts = typing.get_args(hint) or (hint,)
    if float in accepts and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where} must be a number, got {value!r}") from None
    return value


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# resolution into runtime objects


def load_dataset(cfg: ExperimentConfig) -> WorkloadTrace:
    if cfg.dataset.path:
        return load_trace(cfg.dataset.path, strict=cfg.dataset.strict)
    return synthesize_trace(cfg.dataset.synthetic, seed=cfg.dataset.seed)


def split_dataset(cfg: ExperimentConfig, trace: WorkloadTrace) -> tuple[WorkloadTrace, WorkloadTrace]:
    """(training part, held-out part); with no holdout both are the full trace."""
    if cfg.dataset.holdout_fraction == 0:
        return trace, trace
    return holdout_split(trace, cfg.dataset.holdout_fraction)


def cluster_nodes(cfg: ExperimentConfig, trace: WorkloadTrace) -> int:
    if cfg.cluster.nodes is not None:
        return cfg.cluster.nodes
    nodes = trace.max_nodes
    if nodes <= 0:
        raise ConfigError("trace header gives no cluster size; set cluster.nodes")
    return nodes


def episode_config(cfg: ExperimentConfig, trace: WorkloadTrace) -> EpisodeConfig:
    return EpisodeConfig(
        total_nodes=cluster_nodes(cfg, trace),
        procs_per_node=max(trace.procs_per_node, 1),
        window=cfg.cluster.window,
        backfill=cfg.cluster.backfill,
    )


def feature_config(cfg: ExperimentConfig, trace: WorkloadTrace) -> FeatureConfig:
    from .workload import trace_epoch

    return FeatureConfig(
        window=cfg.cluster.window,
        total_nodes=cluster_nodes(cfg, trace),
        max_walltime=cfg.env.max_walltime,
        wait_horizon=cfg.env.wait_horizon,
        epoch_second_of_day=trace_epoch(trace.header)[1],
    )


def env_config(cfg: ExperimentConfig, trace: WorkloadTrace) -> EnvConfig:
    return EnvConfig(
        episode=episode_config(cfg, trace),
        features=feature_config(cfg, trace),
        goal=cfg.goal,
        sequence_length=cfg.env.sequence_length,
        episodes_per_batch=cfg.env.episodes_per_batch,
        reward_scale=cfg.env.reward_scale,
    )


def train_config(cfg: ExperimentConfig, trace: WorkloadTrace) -> TrainConfig:
    return TrainConfig(
        env=env_config(cfg, trace),
        ppo=cfg.ppo,
        sync=cfg.sync,
        iterations=cfg.train.iterations,
        seed=cfg.seed,
        checkpoint_every=cfg.train.checkpoint_every,
    )


def pbt_config(cfg: ExperimentConfig) -> PbtConfig:
    p = cfg.pbt
    return PbtConfig(
        population=p.population, quantile=p.quantile, perturb_factors=tuple(p.perturb_factors),
        cadence=p.cadence, resample_prob=p.resample_prob, hyperparams=tuple(p.hyperparams),
    )
