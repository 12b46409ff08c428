"""Finite-difference checks of the analytic network and loss gradients on random configurations."""

import numpy as np

from _helpers import gradient_error, random_batch
from sched_forge.neural import (
    FEATURE_DIM,
    VALID,
    init_agent,
    init_params,
    log_softmax_backward,
    policy_backward,
    policy_forward,
    value_backward,
    value_forward,
)
from sched_forge.rl_core import PpoConfig, ppo_loss


def random_window(rng, w, n_valid=None):
    n_valid = int(rng.integers(1, w + 1)) if n_valid is None else n_valid
    x = np.zeros((w, FEATURE_DIM))
    x[:n_valid] = rng.uniform(0, 1, size=(n_valid, FEATURE_DIM))
    x[:n_valid, VALID] = 1.0
    return x


def perturbed(params, rng, scale):
    return params.with_flat(params.flat() * scale + rng.normal(0, 0.1, params.size))


def policy_gradient_error(seed):
    rng = np.random.default_rng(seed)
    params = perturbed(init_params("policy", seed), rng, rng.uniform(0.5, 2))
    x = random_window(rng, int(rng.integers(1, 8)))
    c = rng.normal(size=x.shape[0])

    def f(theta):
        out = policy_forward(params.with_flat(theta), x)
        return float(np.sum(np.where(out.mask, c * out.logp, 0.0)))

    out = policy_forward(params, x)
    g_scores = log_softmax_backward(out.probs, out.mask, c)
    analytic = policy_backward(params, out, g_scores).flat()
    coords = rng.choice(params.size, size=30, replace=False)
    return gradient_error(f, params.flat(), analytic, coords)


def value_gradient_error(seed):
    rng = np.random.default_rng(seed)
    w = int(rng.integers(1, 6))
    params = perturbed(init_params("value", seed, window=w), rng, rng.uniform(0.5, 2))
    x = rng.uniform(0, 1, size=(int(rng.integers(1, 5)), w * FEATURE_DIM))
    u = rng.normal(size=x.shape[0])

    def f(theta):
        return float(u @ value_forward(params.with_flat(theta), x)[0])

    _, cache = value_forward(params, x)
    analytic = value_backward(params, cache, u).flat()
    coords = rng.choice(params.size, size=30, replace=False)
    return gradient_error(f, params.flat(), analytic, coords)


def _near_kink(batch, agent, eps, margin=1e-3):
    logp = policy_forward(agent.policy, batch.obs).logp[np.arange(len(batch)), batch.actions]
    ratio = np.exp(logp - batch.logp_old)
    return np.any(np.abs(np.abs(ratio - 1) - eps) < margin)


def loss_gradient_error(seed):
    rng = np.random.default_rng(seed)
    agent = init_agent(seed, window=4)
    agent = agent.with_flat(agent.flat() * rng.uniform(0.5, 2) + rng.normal(0, 0.05, agent.size))
    ppo = PpoConfig(clip_eps=0.2, value_coef=rng.uniform(0.1, 1), entropy_coef=rng.uniform(0, 0.1))
    batch = random_batch(rng, n=10)
    current = policy_forward(agent.policy, batch.obs).logp[np.arange(10), batch.actions]
    while True:
        batch.logp_old = current + rng.normal(0, 0.3, 10)
        if not _near_kink(batch, agent, ppo.clip_eps):
            break

    def f(theta):
        return ppo_loss(batch, agent.with_flat(theta), ppo).total

    analytic = ppo_loss(batch, agent, ppo).grad.flat()
    coords = rng.choice(agent.size, size=30, replace=False)
    return gradient_error(f, agent.flat(), analytic, coords)
