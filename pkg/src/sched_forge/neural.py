"""Small tanh MLPs with exact reverse-mode gradients, in float64.

The policy network is applied to every observable job independently (shared
weights) and the per-job scores go through a masked softmax, so the action
distribution is permutation-equivariant in the job slots. The value network reads
the whole flattened observation window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointShapeMismatch, NoValidJobsError, ShapeMismatchError
from .simulator import DecisionPoint

POLICY_HIDDEN = (32, 16, 8)
VALUE_HIDDEN = (64, 32, 8)

FEATURES = (
    "wait",
    "requested_time",
    "requested_nodes",
    "fits_now",
    "time_of_day",
    "queue_position",
    "valid",
)
FEATURE_DIM = len(FEATURES)
VALID = FEATURES.index("valid")

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(float)),
    "identity": (lambda z: z, lambda y: np.ones_like(y)),
}


@dataclass(frozen=True)
class FeatureConfig:
    window: int = 128
    total_nodes: int = 256
    max_walltime: float = 86_400.0
    wait_horizon: float = 12 * 3600.0
    epoch_second_of_day: int = 0


def job_features(decision: DecisionPoint, cfg: FeatureConfig) -> np.ndarray:
    """(window, FEATURE_DIM) observation; padded slots are all zeros."""
    out = np.zeros((cfg.window, FEATURE_DIM))
    clock = decision.state.clock
    free = decision.state.free_nodes
    for i, (job, nodes) in enumerate(zip(decision.observable_jobs, decision.observable_nodes)):
        if i >= cfg.window:
            break
        out[i] = (
            min((clock - job.submit_time) / cfg.wait_horizon, 1.0),
            min(job.requested_time / cfg.max_walltime, 1.0),
            min(nodes / cfg.total_nodes, 1.0),
            1.0 if nodes <= free else 0.0,
            ((job.submit_time + cfg.epoch_second_of_day) % 86_400) / 86_400.0,
            i / cfg.window,
            1.0,
        )
    return out


@dataclass
class MlpParams:
    """Weights (out x in) and biases of a feed-forward net. Also used as a gradient buffer."""

    arch: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(self.sizes[1:-1])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        if vec.size != self.size:
            raise ShapeMismatchError(f"flat vector of {vec.size} for {self.size} parameters")
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return MlpParams(self.arch, arrays[0::2], arrays[1::2], self.activations)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def zeros_like(self) -> "MlpParams":
        return self.with_flat(np.zeros(self.size))

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat())


GradientBuffer = MlpParams


def init_params(arch: str, seed: int, input_dim: int | None = None, window: int = 128) -> MlpParams:
    """Uniform init with bound sqrt(6 / (fan_in + fan_out)), zero biases."""
    if arch == "policy":
        hidden = POLICY_HIDDEN
        input_dim = input_dim or FEATURE_DIM
    elif arch == "value":
        hidden = VALUE_HIDDEN
        input_dim = input_dim or window * FEATURE_DIM
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    activations = ("tanh",) * len(hidden) + ("identity",)
    return MlpParams(arch, weights, biases, activations)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (output, cache); cache holds every layer's input plus the final output."""
    if x.shape[-1] != params.sizes[0]:
        raise ShapeMismatchError(f"input width {x.shape[-1]} != {params.sizes[0]}")
    cache = [x]
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = _ACTIVATIONS[act][0](h @ w.T + b)
        cache.append(h)
    return h, cache


def backward(params: MlpParams, cache: list[np.ndarray], upstream: np.ndarray) -> GradientBuffer:
    """Gradient of sum(upstream * output) with respect to every parameter."""
    if upstream.shape != cache[-1].shape:
        raise ShapeMismatchError(f"upstream {upstream.shape} != output {cache[-1].shape}")
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n
    gb: list[np.ndarray] = [None] * n
    delta = upstream
    for k in range(n - 1, -1, -1):
        delta = delta * _ACTIVATIONS[params.activations[k]][1](cache[k + 1])
        gw[k] = delta.T @ cache[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = delta @ params.weights[k]
    return MlpParams(params.arch, gw, gb, params.activations)


@dataclass
class PolicyOutput:
    scores: np.ndarray
    probs: np.ndarray
    logp: np.ndarray
    mask: np.ndarray
    cache: list[np.ndarray] = field(repr=False)


def policy_forward(params: MlpParams, jobs: np.ndarray) -> PolicyOutput:
    """Score each job slot and softmax over valid slots.

    ``jobs`` is (W, F) for one decision or (B, W, F) for a batch; padded slots are
    recognized by a zero validity feature and get probability exactly 0.
    """
    single = jobs.ndim == 2
    if single:
        jobs = jobs[None]
    b, w, f = jobs.shape
    mask = jobs[..., VALID] > 0.5
    if not mask.any(axis=1).all():
        raise NoValidJobsError("decision with no valid job slots")
    out, cache = mlp_forward(params, jobs.reshape(b * w, f))
    scores = out.reshape(b, w)
    masked = np.where(mask, scores, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.where(mask, np.exp(logp), 0.0)
    if single:
        return PolicyOutput(scores[0], probs[0], logp[0], mask[0], cache)
    return PolicyOutput(scores, probs, logp, mask, cache)


def log_softmax_backward(probs: np.ndarray, mask: np.ndarray, grad_logp: np.ndarray) -> np.ndarray:
    """Chain rule through the masked log-softmax: (B, W) grad on log-probs -> grad on scores."""
    g = np.where(mask, grad_logp, 0.0)
    return np.where(mask, g - probs * g.sum(axis=-1, keepdims=True), 0.0)


def policy_backward(params: MlpParams, out: PolicyOutput, grad_scores: np.ndarray) -> GradientBuffer:
    grad = np.where(out.mask, grad_scores, 0.0).reshape(-1, 1)
    return backward(params, out.cache, grad)


def value_forward(params: MlpParams, window: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """V(s) for a (W, F) window, a flat (W*F,) vector, or a batch (B, W*F) / (B, W, F)."""
    expect = params.sizes[0]
    if window.ndim == 1 or (window.ndim == 2 and window.shape[-1] != expect and window.size == expect):
        x = window.reshape(1, -1)
    elif window.ndim == 3:
        x = window.reshape(window.shape[0], -1)
    else:
        x = window
    if x.shape[-1] != expect:
        raise ShapeMismatchError(f"value input width {x.shape[-1]} != {expect}")
    out, cache = mlp_forward(params, x)
    return out[:, 0], cache


def value_backward(params: MlpParams, cache: list[np.ndarray], grad_values: np.ndarray) -> GradientBuffer:
    return backward(params, cache, np.asarray(grad_values, dtype=float).reshape(-1, 1))


@dataclass
class AgentParams:
    policy: MlpParams
    value: MlpParams

    @property
    def size(self) -> int:
        return self.policy.size + self.value.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.policy.flat(), self.value.flat()])

    def with_flat(self, vec: np.ndarray) -> "AgentParams":
        if vec.size != self.size:
            raise ShapeMismatchError(f"flat vector of {vec.size} for {self.size} parameters")
        k = self.policy.size
        return AgentParams(self.policy.with_flat(vec[:k]), self.value.with_flat(vec[k:]))

    def zeros_like(self) -> "AgentParams":
        return self.with_flat(np.zeros(self.size))

    def copy(self) -> "AgentParams":
        return self.with_flat(self.flat())

    @property
    def window(self) -> int:
        return self.value.sizes[0] // FEATURE_DIM


def init_agent(seed: int, window: int = 128) -> AgentParams:
    ps, vs = np.random.SeedSequence(seed).generate_state(2)
    return AgentParams(
        init_params("policy", int(ps)), init_params("value", int(vs), window=window)
    )


def save_checkpoint(path: str | Path, agent: AgentParams, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "features": list(FEATURES),
        "policy": {"sizes": agent.policy.sizes, "activations": list(agent.policy.activations)},
        "value": {"sizes": agent.value.sizes, "activations": list(agent.value.activations)},
        "meta": meta or {},
    }
    arrays = {}
    for tag, net in (("policy", agent.policy), ("value", agent.value)):
        for i, a in enumerate(net.arrays()):
            arrays[f"{tag}_{i}"] = a
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path, window: int | None = None) -> tuple[AgentParams, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointShapeMismatch(f"unsupported checkpoint version {header.get('version')}")
        if tuple(header.get("features", ())) != FEATURES:
            raise CheckpointShapeMismatch("checkpoint feature layout differs")
        nets = {}
        for tag, hidden in (("policy", POLICY_HIDDEN), ("value", VALUE_HIDDEN)):
            sizes = header[tag]["sizes"]
            if tuple(sizes[1:-1]) != hidden or sizes[-1] != 1:
                raise CheckpointShapeMismatch(f"{tag} sizes {sizes} do not match {hidden}")
            arrays = []
            for i in range(2 * (len(sizes) - 1)):
                a = data[f"{tag}_{i}"]
                k = i // 2
                want = (sizes[k + 1], sizes[k]) if i % 2 == 0 else (sizes[k + 1],)
                if a.shape != want:
                    raise CheckpointShapeMismatch(f"{tag}_{i} has shape {a.shape}, expected {want}")
                arrays.append(np.array(a, dtype=float))
            nets[tag] = MlpParams(tag, arrays[0::2], arrays[1::2], tuple(header[tag]["activations"]))
    agent = AgentParams(nets["policy"], nets["value"])
    if agent.policy.sizes[0] != FEATURE_DIM:
        raise CheckpointShapeMismatch("policy input width does not match the feature layout")
    if window is not None and agent.window != window:
        raise CheckpointShapeMismatch(f"checkpoint window {agent.window} != {window}")
    return agent, header["meta"]


def policy_scheduler(agent: AgentParams, features: FeatureConfig):
    """Greedy scheduler (argmax probability, lowest job id on ties) for evaluation."""

    def schedule(decision: DecisionPoint) -> int:
        obs = job_features(decision, features)
        out = policy_forward(agent.policy, obs)
        n = min(len(decision.observable_jobs), features.window)
        p = out.probs[:n]
        best = p.max()
        ties = [i for i in range(n) if p[i] == best]
        return min(ties, key=lambda i: decision.observable_jobs[i].job_id)

    return schedule
