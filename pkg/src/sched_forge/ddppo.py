"""Decentralized distributed PPO with population-based training and random search.

Each worker owns a parameter copy, a private generator and a contiguous shard of
the training trace. Workers collect rollouts and compute local gradients without
touching shared state; at every barrier one reducer sums the gradients in worker-id
order (optionally dividing by the number of contributors) and the new parameters
are handed back to every worker before anyone proceeds.

Workers run one after another inside the calling process, which makes the barrier
order, and therefore every result, reproducible for a fixed seed and worker count.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    AllTrialsFailedError,
    ConfigError,
    EmptyBatchError,
    NoGradientsError,
    NonFiniteLossError,
    SchedForgeError,
    ShapeMismatchError,
    TrainingAborted,
    UnscoredMemberError,
)
from .neural import AgentParams, init_agent, save_checkpoint
from .rl_core import (
    EnvConfig,
    Optimizer,
    PpoConfig,
    RolloutBatch,
    ascent_direction,
    collect_rollouts,
    iteration_record,
    minibatch_indices,
    worker_rng,
)
from .workload import WorkloadTrace, split_trace

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyncConfig:
    num_workers: int = 4
    # minibatch gradients accumulated per worker between barriers
    sync_interval: int = 1
    aggregation: str = "mean"
    # None: use the PPO learning rate
    lr: float | None = None

    def __post_init__(self):
        if self.num_workers < 1 or self.sync_interval < 1:
            raise ConfigError("num_workers and sync_interval must be >= 1")
        if self.aggregation not in ("mean", "sum"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class WorkerState:
    worker_id: int
    agent: AgentParams
    rng: np.random.Generator
    shard: WorkloadTrace
    batch: RolloutBatch | None = None
    failures: int = 0


def _flat(g) -> np.ndarray:
    return g.flat() if isinstance(g, AgentParams) else np.asarray(g, dtype=float)


def aggregate(gradients: list, aggregation: str = "mean") -> np.ndarray:
    """Reduce in list (worker-id) order, skipping failed workers (None)."""
    flats = [_flat(g) for g in gradients if g is not None]
    if not flats:
        raise NoGradientsError("no worker produced a gradient")
    size = flats[0].size
    if any(f.size != size for f in flats):
        raise ShapeMismatchError("gradient buffers differ in size")
    total = flats[0].copy()
    for f in flats[1:]:
        total += f
    if aggregation == "mean":
        total /= len(flats)
    return total


def sync_update(
    params: AgentParams,
    gradients: list,
    config: SyncConfig,
    optimizer: Optimizer | None = None,
) -> AgentParams:
    """theta' = theta + lr * aggregate(gradients); gradients ascend the objective."""
    agg = aggregate(gradients, config.aggregation)
    if agg.size != params.size:
        raise ShapeMismatchError(f"gradient of {agg.size} for {params.size} parameters")
    theta = params.flat()
    if optimizer is not None:
        return params.with_flat(optimizer.step(theta, agg))
    if config.lr is None:
        raise ConfigError("sync_update needs a learning rate or an optimizer")
    return params.with_flat(theta + config.lr * agg)


def collect(worker: WorkerState, env: EnvConfig, ppo: PpoConfig) -> RolloutBatch:
    worker.batch = collect_rollouts(worker.agent, worker.shard, env, ppo, worker.rng)
    return worker.batch


def local_gradient(
    worker: WorkerState,
    env: EnvConfig,
    ppo: PpoConfig,
    indices: np.ndarray | None = None,
) -> tuple[AgentParams, dict]:
    """Ascent gradient of the worker's PPO objective on (part of) its own batch.

    Collects a fresh batch first when the worker holds none.
    """
    if worker.batch is None:
        collect(worker, env, ppo)
    batch = worker.batch if indices is None else worker.batch.subset(indices)
    g, stats = ascent_direction(batch, worker.agent, ppo)
    return worker.agent.with_flat(g), stats


@dataclass(frozen=True)
class TrainConfig:
    env: EnvConfig
    ppo: PpoConfig = field(default_factory=PpoConfig)
    sync: SyncConfig = field(default_factory=SyncConfig)
    iterations: int = 100
    seed: int = 0
    checkpoint_every: int = 0


class DDPPOTrainer:
    def __init__(
        self,
        trace: WorkloadTrace,
        config: TrainConfig,
        agent: AgentParams | None = None,
    ):
        self.config = config
        self.env = config.env
        self.ppo = config.ppo
        self.sync = config.sync
        n = self.sync.num_workers
        self.agent = agent if agent is not None else init_agent(config.seed, self.env.features.window)
        shards = split_trace(trace, n)
        if any(len(s.jobs) == 0 for s in shards):
            raise EmptyBatchError(f"trace of {len(trace.jobs)} jobs cannot feed {n} workers")
        self.workers = [
            WorkerState(i, self.agent, worker_rng(config.seed, i), shards[i]) for i in range(n)
        ]
        self.optimizer = Optimizer(self._effective_ppo(), self.agent.size)
        self.iteration = 0

    def _effective_ppo(self) -> PpoConfig:
        if self.sync.lr is not None:
            return replace(self.ppo, lr=self.sync.lr)
        return self.ppo

    def set_hyperparams(self, hparams: dict) -> None:
        self.ppo = replace(self.ppo, **hparams)
        self.optimizer.lr = self._effective_ppo().lr

    def _broadcast(self) -> None:
        for w in self.workers:
            w.agent = self.agent

    def step(self) -> dict:
        t0 = time.perf_counter()
        self._broadcast()
        for w in self.workers:
            collect(w, self.env, self.ppo)
        m = min(self.ppo.num_minibatches, *(len(w.batch) for w in self.workers))
        k = self.sync.sync_interval
        records = []
        for _ in range(self.ppo.epochs):
            splits = [minibatch_indices(len(w.batch), m, w.rng) for w in self.workers]
            for k0 in range(0, m, k):
                grads, stats = [], []
                for w, split in zip(self.workers, splits):
                    try:
                        parts = [ascent_direction(w.batch.subset(split[j]), w.agent, self.ppo)
                                 for j in range(k0, min(k0 + k, m))]
                    except NonFiniteLossError as exc:
                        w.failures += 1
                        logger.warning("worker %d skipped at barrier: %s", w.worker_id, exc)
                        grads.append(None)
                        continue
                    g = parts[0][0]
                    if len(parts) > 1:
                        g = np.mean([p[0] for p in parts], axis=0)
                    grads.append(g)
                    stats.append({key: float(np.mean([p[1][key] for p in parts])) for key in parts[0][1]})
                if not stats:
                    raise TrainingAborted(f"all workers failed in iteration {self.iteration}")
                self.agent = sync_update(self.agent, grads, self.sync, self.optimizer)
                self._broadcast()
                records.append({key: float(np.mean([s[key] for s in stats])) for key in stats[0]})
        merged = RolloutBatch.concat([w.batch for w in self.workers])
        rec = iteration_record(
            self.iteration, merged, {key: float(np.mean([r[key] for r in records])) for key in records[0]}
        )
        rec["wall_time"] = time.perf_counter() - t0
        self.iteration += 1
        return rec


@dataclass
class TrainResult:
    agent: AgentParams
    curve: list[dict]
    checkpoints: list[Path] = field(default_factory=list)
    hyperparams: dict = field(default_factory=dict)


def curve_score(curve: list[dict], last: int = 10) -> float:
    if not curve:
        return -math.inf
    return float(np.mean([r["episode_reward_mean"] for r in curve[-last:]]))


def _jsonable(rec: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in rec.items()}


def train(
    trace: WorkloadTrace,
    config: TrainConfig,
    agent: AgentParams | None = None,
    out_dir: str | Path | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``config.iterations`` rounds of (parallel local gradients -> barrier update)."""
    trainer = DDPPOTrainer(trace, config, agent)
    curve: list[dict] = []
    checkpoints: list[Path] = []
    manifest: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None

    def checkpoint(it: int, score: float | None) -> None:
        if out is None:
            return
        path = save_checkpoint(
            out / "checkpoints" / f"iter_{it:05d}.npz",
            trainer.agent,
            {"iteration": it, "seed": config.seed, "goal": config.env.goal},
        )
        checkpoints.append(path)
        manifest.append({
            "iteration": it, "score": score, "path": str(path.relative_to(out)),
            "hyperparameters": asdict(trainer.ppo),
        })

    checkpoint(0, None)
    for it in range(config.iterations):
        rec = trainer.step()
        curve.append(rec)
        if log:
            log(_jsonable(rec))
        every = config.checkpoint_every
        if every and (it + 1) % every == 0:
            checkpoint(it + 1, rec["episode_reward_mean"])
    if out is not None:
        (out / "checkpoints" / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return TrainResult(trainer.agent, curve, checkpoints, asdict(trainer.ppo))


# ---------------------------------------------------------------------------
# population-based training

_HPARAM_BOUNDS = {
    "lr": (1e-6, 1.0),
    "clip_eps": (0.01, 0.9),
    "entropy_coef": (0.0, 1.0),
    "value_coef": (0.0, 10.0),
    "gamma": (0.0, 1.0),
    "lam": (0.0, 1.0),
}


def _bounded(name: str, value: float) -> float:
    lo, hi = _HPARAM_BOUNDS.get(name, (-math.inf, math.inf))
    return float(min(max(value, lo), hi))


@dataclass
class PbtMember:
    member_id: int
    hyperparams: dict
    score: float | None = None
    checkpoint: AgentParams | None = None
    optimizer_state: dict | None = None
    lineage: list = field(default_factory=list)


@dataclass(frozen=True)
class PbtConfig:
    population: int = 8
    quantile: float = 0.25
    perturb_factors: tuple[float, ...] = (0.8, 1.2)
    cadence: int = 5
    resample_prob: float = 0.0
    hyperparams: tuple[str, ...] = ("lr", "entropy_coef", "clip_eps")

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("PBT needs a population of at least 2")
        if not 0 < self.quantile <= 0.5:
            raise ConfigError("PBT quantile must lie in (0, 0.5]")
        if self.cadence < 1:
            raise ConfigError("PBT cadence must be >= 1")


def pbt_step(
    population: list[PbtMember],
    quantile: float = 0.25,
    perturb_factors=(0.8, 1.2),
    rng: np.random.Generator | int = 0,
    resample_prob: float = 0.0,
    space: dict | None = None,
) -> list[PbtMember]:
    """Exploit then explore. Returns new member objects; the input list is left as is.

    The bottom ``quantile`` of members each pick a donor from the top ``quantile``;
    a member is replaced only when its score is strictly below its donor's. Copied
    hyperparameters are multiplied by a random perturbation factor, or resampled from
    ``space`` with probability ``resample_prob``.
    """
    if len(population) < 2:
        raise ConfigError("PBT needs a population of at least 2")
    if any(m.score is None or not math.isfinite(m.score) for m in population):
        raise UnscoredMemberError("every member must be scored before a PBT step")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    order = sorted(range(len(population)), key=lambda i: (-population[i].score, population[i].member_id))
    cut = max(1, int(math.floor(quantile * len(population))))
    top, bottom = order[:cut], order[-cut:]
    out = [replace(m, hyperparams=dict(m.hyperparams), lineage=list(m.lineage)) for m in population]
    for i in bottom:
        if i in top:
            continue
        donor = population[int(top[rng.integers(len(top))])]
        if not population[i].score < donor.score:
            continue
        hp = {}
        for name, value in donor.hyperparams.items():
            if space and name in space and rng.random() < resample_prob:
                hp[name] = _sample_param(space[name], rng)
            else:
                factor = float(perturb_factors[rng.integers(len(perturb_factors))])
                hp[name] = _bounded(name, value * factor)
        out[i] = PbtMember(
            member_id=population[i].member_id,
            hyperparams=hp,
            score=donor.score,
            checkpoint=donor.checkpoint.copy() if donor.checkpoint is not None else None,
            optimizer_state=donor.optimizer_state,
            lineage=population[i].lineage + [donor.member_id],
        )
    return out


def train_pbt(
    trace: WorkloadTrace,
    config: TrainConfig,
    pbt: PbtConfig,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a population of DD-PPO learners, exploiting/exploring every ``cadence`` iterations."""
    rng = np.random.default_rng([config.seed, 7919])
    base = {name: getattr(config.ppo, name) for name in pbt.hyperparams}
    trainers, members = [], []
    for i in range(pbt.population):
        hp = dict(base)
        if i:
            hp = {k: _bounded(k, v * float(rng.choice(pbt.perturb_factors))) for k, v in hp.items()}
        member_cfg = replace(config, seed=int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0]))
        tr = DDPPOTrainer(trace, member_cfg)
        tr.set_hyperparams(hp)
        trainers.append(tr)
        members.append(PbtMember(i, hp))
    histories: list[list[float]] = [[] for _ in members]
    curve = []
    for it in range(config.iterations):
        recs = [tr.step() for tr in trainers]
        for h, r in zip(histories, recs):
            h.append(r["episode_reward_mean"])
        rewards = [r["episode_reward_mean"] for r in recs]
        best = int(np.argmax(rewards))
        rec = dict(recs[best])
        rec.update({
            "iteration": it,
            "episode_reward_mean": float(np.mean(rewards)),
            "population_best_reward": float(rewards[best]),
            "best_member": members[best].member_id,
        })
        curve.append(rec)
        if log:
            log(_jsonable(rec))
        if (it + 1) % pbt.cadence == 0 and it + 1 < config.iterations:
            for m, tr, h in zip(members, trainers, histories):
                m.score = float(np.mean(h[-pbt.cadence:]))
                m.checkpoint = tr.agent
                m.optimizer_state = tr.optimizer.state()
            new = pbt_step(members, pbt.quantile, pbt.perturb_factors, rng, pbt.resample_prob)
            for j, (old, m) in enumerate(zip(members, new)):
                if m.lineage != old.lineage:
                    trainers[j].agent = m.checkpoint
                    trainers[j].optimizer.load_state(m.optimizer_state)
                    trainers[j].set_hyperparams(m.hyperparams)
                    histories[j] = list(histories[m.lineage[-1]])
            members = new
    final = [float(np.mean(h[-pbt.cadence:])) if h else -math.inf for h in histories]
    best = int(np.argmax(final)) if trainers else 0
    return TrainResult(trainers[best].agent, curve, [], dict(members[best].hyperparams))


# ---------------------------------------------------------------------------
# random-search tuning


@dataclass(frozen=True)
class TuneSpec:
    # name -> {"range": [lo, hi], "log": bool} or {"choices": [...]}
    space: dict
    trials: int = 4
    objective: str = "episode_reward_mean"
    seed: int = 0
    max_concurrent: int = 1

    def __post_init__(self):
        if not self.space:
            raise ConfigError("tuning space is empty")
        if self.trials < 1:
            raise ConfigError("need at least one trial")
        for name, dom in self.space.items():
            if not ("range" in dom or "choices" in dom):
                raise ConfigError(f"search domain for {name!r} needs 'range' or 'choices'")


def _sample_param(domain: dict, rng: np.random.Generator):
    if "choices" in domain:
        choices = domain["choices"]
        return choices[int(rng.integers(len(choices)))]
    lo, hi = domain["range"]
    if domain.get("log"):
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return float(rng.uniform(lo, hi))


def sample_configs(spec: TuneSpec) -> list[dict]:
    rng = np.random.default_rng(spec.seed)
    return [{name: _sample_param(dom, rng) for name, dom in sorted(spec.space.items())} for _ in range(spec.trials)]


@dataclass
class TuneResult:
    hyperparams: dict
    agent: AgentParams | None
    score: float
    trials: list[dict]


TrialFn = Callable[[dict, int], TrainResult]


def tune(spec: TuneSpec, train_fn: TrialFn, ledger_path: str | Path | None = None) -> TuneResult:
    """Random search: run every sampled configuration, keep the best objective.

    ``train_fn(hyperparams, trial_seed)`` returns a :class:`TrainResult`; trials that
    raise a package error or score non-finite are recorded as failed.
    """
    configs = sample_configs(spec)
    seeds = [int(s) for s in np.random.SeedSequence(spec.seed).generate_state(spec.trials)]

    def run(i: int):
        try:
            res = train_fn(configs[i], seeds[i])
            score = curve_score(res.curve)
            if not math.isfinite(score):
                raise NonFiniteLossError("trial produced no finite score")
            return res, score, None
        except SchedForgeError as exc:
            return None, -math.inf, f"{type(exc).__name__}: {exc}"

    if spec.max_concurrent > 1:
        with ThreadPoolExecutor(spec.max_concurrent) as pool:
            outcomes = list(pool.map(run, range(spec.trials)))
    else:
        outcomes = [run(i) for i in range(spec.trials)]

    ledger = []
    best = None
    for i, (res, score, err) in enumerate(outcomes):
        ledger.append({
            "trial": i, "seed": seeds[i], "hyperparameters": configs[i],
            spec.objective: score if err is None else None,
            "status": "ok" if err is None else "failed", "error": err,
        })
        if err is None and (best is None or score > best[1]):
            best = (i, score, res)
    if ledger_path is not None:
        Path(ledger_path).parent.mkdir(parents=True, exist_ok=True)
        Path(ledger_path).write_text(json.dumps(ledger, indent=2))
    if best is None:
        raise AllTrialsFailedError(f"all {spec.trials} trials failed")
    i, score, res = best
    return TuneResult(configs[i], res.agent, score, ledger)
