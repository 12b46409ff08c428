"""Single-process PPO: rollout collection, returns, GAE, the clipped surrogate loss
and minibatch updates."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    EmptyBatchError,
    LengthMismatchError,
    NonFiniteLossError,
)
from .metrics import GOALS, episode_metrics
from .neural import (
    AgentParams,
    FeatureConfig,
    job_features,
    log_softmax_backward,
    policy_backward,
    policy_forward,
    value_backward,
    value_forward,
)
from .simulator import (
    EPISODE_DONE,
    EpisodeConfig,
    EpisodeResult,
    apply_action,
    collect_result,
    init_episode,
    next_decision,
)
from .workload import JobSequence, WorkloadTrace, slice_sequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 1e-3
    epochs: int = 4
    num_minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    optimizer: str = "sgd"
    max_grad_norm: float | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("gamma and lam must lie in [0, 1]")
        if self.clip_eps <= 0 or self.lr <= 0:
            raise ConfigError("clip_eps and lr must be positive")
        if self.epochs < 1 or self.num_minibatches < 1:
            raise ConfigError("epochs and num_minibatches must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class EnvConfig:
    episode: EpisodeConfig
    features: FeatureConfig
    goal: str = "bsld"
    sequence_length: int = 128
    episodes_per_batch: int = 1
    # training rewards are multiplied by this; logged rewards are not
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.goal not in GOALS:
            raise ConfigError(f"unknown goal {self.goal!r}; choose from {sorted(GOALS)}")
        if self.sequence_length < 1 or self.episodes_per_batch < 1:
            raise ConfigError("sequence_length and episodes_per_batch must be >= 1")
        if self.episode.window != self.features.window:
            raise ConfigError("episode window and feature window must match")


# ---------------------------------------------------------------------------
# returns and advantages


def discounted_returns(rewards, gamma: float, dones=None) -> np.ndarray:
    """G_t = R_t + gamma * G_{t+1}, restarting after every ``done`` step."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.zeros(len(rewards), dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    out = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates for one episode.

    ``values`` carries one extra trailing entry: the bootstrap value after the last
    step (0 for a terminal state).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (rewards.size + 1,):
        raise LengthMismatchError(f"{rewards.size} rewards need {rewards.size + 1} values, got {values.size}")
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(rewards.size - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def make_reward(goal: str) -> Callable[[EpisodeResult], float]:
    """Terminal reward: minus the episode average for minimized metrics, plus utilization."""
    if goal not in GOALS:
        raise ConfigError(f"unknown goal {goal!r}")
    metric, minimize = GOALS[goal]

    def reward(result: EpisodeResult) -> float:
        value = episode_metrics(result)[metric]
        return -value if minimize else value

    return reward


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Transition:
    observation: np.ndarray
    action: int
    logp_old: float
    reward: float = 0.0
    value: float = 0.0
    done: bool = False


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    episode_rewards: list[float] = field(default_factory=list)
    episode_metrics: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx) -> "RolloutBatch":
        return RolloutBatch(
            self.obs[idx], self.actions[idx], self.logp_old[idx], self.rewards[idx],
            self.values[idx], self.dones[idx], self.returns[idx], self.advantages[idx],
        )

    @classmethod
    def concat(cls, batches: list["RolloutBatch"]) -> "RolloutBatch":
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])
        out = cls(*(cat(n) for n in (
            "obs", "actions", "logp_old", "rewards", "values", "dones", "returns", "advantages"
        )))
        for b in batches:
            out.episode_rewards += b.episode_rewards
            out.episode_metrics += b.episode_metrics
        return out


def _sample(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    a = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # never land on a zero-probability (padded) slot through rounding
    while probs[min(a, len(probs) - 1)] == 0.0 and a > 0:
        a -= 1
    return min(a, len(probs) - 1)


def run_policy_episode(
    agent: AgentParams, sequence: JobSequence, env: EnvConfig, rng: np.random.Generator
) -> tuple[list[Transition], EpisodeResult]:
    """Roll out the stochastic policy over one sequence; rewards and values are left at 0."""
    state = init_episode(sequence, env.episode)
    transitions: list[Transition] = []
    while True:
        decision = next_decision(state)
        if decision is EPISODE_DONE:
            break
        obs = job_features(decision, env.features)
        out = policy_forward(agent.policy, obs)
        a = _sample(out.probs, rng.random())
        transitions.append(Transition(obs, a, float(out.logp[a])))
        apply_action(state, a)
    return transitions, collect_result(state)


def build_batch(
    agent: AgentParams,
    episodes: list[tuple[list[Transition], EpisodeResult]],
    env: EnvConfig,
    ppo: PpoConfig,
) -> RolloutBatch:
    reward_fn = make_reward(env.goal)
    parts = []
    ep_rewards, ep_metrics = [], []
    for transitions, result in episodes:
        if not transitions:
            continue
        terminal = reward_fn(result)
        ep_rewards.append(terminal)
        ep_metrics.append(episode_metrics(result))
        obs = np.stack([t.observation for t in transitions])
        values, _ = value_forward(agent.value, obs)
        rewards = np.zeros(len(transitions))
        rewards[-1] = terminal * env.reward_scale
        dones = np.zeros(len(transitions), dtype=bool)
        dones[-1] = True
        adv = gae(rewards, np.append(values, 0.0), ppo.gamma, ppo.lam)
        parts.append(RolloutBatch(
            obs,
            np.array([t.action for t in transitions], dtype=np.int64),
            np.array([t.logp_old for t in transitions]),
            rewards, values, dones, adv + values, adv,
        ))
    if not parts:
        raise EmptyBatchError("no transitions collected")
    batch = RolloutBatch.concat(parts)
    batch.episode_rewards = ep_rewards
    batch.episode_metrics = ep_metrics
    if ppo.normalize_advantages:
        batch.advantages = normalize(batch.advantages)
    return batch


def normalize(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return (x - x.mean()) / (std if std > 1e-12 else 1.0)


def sample_episode_sequences(
    shard: WorkloadTrace, env: EnvConfig, rng: np.random.Generator
) -> list[JobSequence]:
    n = len(shard.jobs)
    if n == 0:
        raise EmptyBatchError("worker shard is empty")
    count = min(env.sequence_length, n)
    starts = rng.integers(0, n - count + 1, size=env.episodes_per_batch)
    return [slice_sequence(shard, int(s), count) for s in starts]


def collect_rollouts(
    agent: AgentParams,
    shard: WorkloadTrace,
    env: EnvConfig,
    ppo: PpoConfig,
    rng: np.random.Generator,
) -> RolloutBatch:
    episodes = [run_policy_episode(agent, s, env, rng) for s in sample_episode_sequences(shard, env, rng)]
    return build_batch(agent, episodes, env, ppo)


# ---------------------------------------------------------------------------
# loss


def clipped_surrogate(ratio, advantages, clip_eps: float) -> np.ndarray:
    ratio = np.asarray(ratio, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    return np.minimum(ratio * advantages, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantages)


@dataclass
class LossOutput:
    total: float
    policy_loss: float
    value_loss: float
    entropy: float
    mean_ratio: float
    clip_fraction: float
    surrogate: np.ndarray
    grad: AgentParams

    def stats(self) -> dict[str, float]:
        return {
            "loss": self.total,
            "policy_loss": self.policy_loss,
            "value_loss": self.value_loss,
            "entropy": self.entropy,
            "mean_ratio": self.mean_ratio,
            "clip_fraction": self.clip_fraction,
        }


def ppo_loss(batch: RolloutBatch, agent: AgentParams, ppo: PpoConfig) -> LossOutput:
    """Loss = -mean(surrogate) + c_v * mean((V - G)^2) - c_e * mean(entropy), with gradients."""
    n = len(batch)
    if n == 0:
        raise EmptyBatchError("empty minibatch")
    rows = np.arange(n)
    pout = policy_forward(agent.policy, batch.obs)
    logp_a = pout.logp[rows, batch.actions]
    ratio = np.exp(logp_a - batch.logp_old)
    adv = batch.advantages
    eps = ppo.clip_eps
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    unclipped_branch = ratio * adv <= clipped * adv
    surrogate = np.where(unclipped_branch, ratio * adv, clipped * adv)

    safe_logp = np.where(pout.mask, pout.logp, 0.0)
    ent = -(pout.probs * safe_logp).sum(axis=1)

    values, vcache = value_forward(agent.value, batch.obs)
    verr = values - batch.returns

    policy_loss = -surrogate.mean()
    # divergence is reported below as NonFiniteLoss, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        value_loss = float(np.mean(verr**2))
        total = policy_loss + ppo.value_coef * value_loss - ppo.entropy_coef * ent.mean()
    if not np.isfinite(total):
        raise NonFiniteLossError(f"non-finite PPO loss {total}")

    # d loss / d logp(a): the min() picks the unclipped branch or a constant
    g_logp_a = np.where(unclipped_branch, -adv * ratio, 0.0) / n
    grad_logp = np.zeros_like(pout.logp)
    grad_logp[rows, batch.actions] = g_logp_a
    g_scores = log_softmax_backward(pout.probs, pout.mask, grad_logp)
    if ppo.entropy_coef:
        # dH/ds_j = -p_j (log p_j + H)
        dent = -pout.probs * (safe_logp + ent[:, None])
        g_scores = g_scores - (ppo.entropy_coef / n) * np.where(pout.mask, dent, 0.0)
    g_policy = policy_backward(agent.policy, pout, g_scores)
    g_value = value_backward(agent.value, vcache, ppo.value_coef * 2.0 * verr / n)

    return LossOutput(
        total=float(total),
        policy_loss=float(policy_loss),
        value_loss=value_loss,
        entropy=float(ent.mean()),
        mean_ratio=float(ratio.mean()),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > eps)),
        surrogate=surrogate,
        grad=AgentParams(g_policy, g_value),
    )


def ascent_direction(batch: RolloutBatch, agent: AgentParams, ppo: PpoConfig) -> tuple[np.ndarray, dict]:
    """Flat gradient of the maximized objective (the negated loss) plus loss stats."""
    out = ppo_loss(batch, agent, ppo)
    g = -out.grad.flat()
    if not np.all(np.isfinite(g)):
        raise NonFiniteLossError("non-finite gradient")
    return g, out.stats()


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """theta <- theta + lr * step(g) where g ascends the objective."""

    def __init__(self, ppo: PpoConfig, size: int):
        self.kind = ppo.optimizer
        self.lr = ppo.lr
        self.max_grad_norm = ppo.max_grad_norm
        self.betas = ppo.adam_betas
        self.eps = ppo.adam_eps
        self.t = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.max_grad_norm is not None:
            norm = float(np.sqrt(g @ g))
            if norm > self.max_grad_norm:
                g = g * (self.max_grad_norm / norm)
        if self.kind == "sgd":
            return theta + self.lr * g
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        return theta + self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m.copy(), "v": self.v.copy()}

    def load_state(self, state: dict) -> None:
        self.t, self.m, self.v = state["t"], state["m"].copy(), state["v"].copy()


def minibatch_indices(n: int, num_minibatches: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return np.array_split(perm, num_minibatches)


def ppo_update(
    agent: AgentParams,
    batch: RolloutBatch,
    ppo: PpoConfig,
    rng: np.random.Generator,
    optimizer: Optimizer | None = None,
) -> tuple[AgentParams, dict]:
    """Epochs of shuffled minibatch steps. The input agent is never modified.

    Raises NonFiniteLossError on divergence; callers keep the prior parameters.
    """
    if len(batch) == 0:
        raise EmptyBatchError("empty rollout batch")
    optimizer = optimizer or Optimizer(ppo, agent.size)
    m = min(ppo.num_minibatches, len(batch))
    theta = agent.flat()
    current = agent
    records = []
    saved = optimizer.state()
    try:
        for _ in range(ppo.epochs):
            for idx in minibatch_indices(len(batch), m, rng):
                g, st = ascent_direction(batch.subset(idx), current, ppo)
                theta = optimizer.step(theta, g)
                current = agent.with_flat(theta)
                records.append(st)
    except NonFiniteLossError:
        optimizer.load_state(saved)
        raise
    stats = {k: float(np.mean([r[k] for r in records])) for k in records[0]}
    return current, stats


# ---------------------------------------------------------------------------
# reference single-process loop


def worker_rng(seed: int, worker_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, worker_id])


def iteration_record(iteration: int, batch: RolloutBatch, stats: dict) -> dict:
    rec = {
        "iteration": iteration,
        "episode_reward_mean": float(np.mean(batch.episode_rewards)),
        "episodes": len(batch.episode_rewards),
        "transitions": len(batch),
    }
    rec.update(stats)
    return rec


def ppo_train_loop(
    trace: WorkloadTrace,
    env: EnvConfig,
    ppo: PpoConfig,
    iterations: int,
    seed: int,
    agent: AgentParams,
    log: Callable[[dict], None] | None = None,
) -> tuple[AgentParams, list[dict]]:
    """Plain PPO: collect, update, repeat. Uses worker 0's random stream."""
    rng = worker_rng(seed, 0)
    optimizer = Optimizer(ppo, agent.size)
    curve = []
    for it in range(iterations):
        t0 = time.perf_counter()
        batch = collect_rollouts(agent, trace, env, ppo, rng)
        try:
            agent, stats = ppo_update(agent, batch, ppo, rng, optimizer)
        except NonFiniteLossError as exc:
            logger.warning("iteration %d: update aborted (%s); keeping parameters", it, exc)
            stats = {}
        rec = iteration_record(it, batch, stats)
        rec["wall_time"] = time.perf_counter() - t0
        curve.append(rec)
        if log:
            log(rec)
    return agent, curve

