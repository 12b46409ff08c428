import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import random_batch, toy_env, toy_trace
from sched_forge import ddppo
from sched_forge.ddppo import (
    DDPPOTrainer,
    PbtConfig,
    PbtMember,
    SyncConfig,
    TrainConfig,
    TrainResult,
    TuneSpec,
    WorkerState,
    aggregate,
    local_gradient,
    pbt_step,
    sample_configs,
    sync_update,
    train,
    train_pbt,
    tune,
)
from sched_forge.errors import (
    AllTrialsFailedError,
    ConfigError,
    EmptyBatchError,
    NoGradientsError,
    NonFiniteLossError,
    ShapeMismatchError,
    TrainingAborted,
    UnscoredMemberError,
)
from sched_forge.neural import init_agent
from sched_forge.rl_core import PpoConfig, ascent_direction, ppo_train_loop, worker_rng
from sched_forge.workload import WorkloadTrace


def _strip(curve):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in curve]


# -- barrier algebra ---------------------------------------------------------------------------


def test_sum_and_mean_of_identical_gradients():
    agent = init_agent(0, window=4)
    g = np.random.default_rng(0).normal(size=agent.size)
    theta = agent.flat()
    s = sync_update(agent, [g] * 3, SyncConfig(num_workers=3, aggregation="sum", lr=0.1))
    m = sync_update(agent, [g] * 3, SyncConfig(num_workers=3, aggregation="mean", lr=0.1))
    np.testing.assert_allclose(s.flat(), theta + 0.1 * 3 * g, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(m.flat(), theta + 0.1 * g, rtol=1e-12, atol=1e-15)


def test_opposite_gradients_cancel():
    agent = init_agent(0, window=4)
    g = np.random.default_rng(0).normal(size=agent.size)
    out = sync_update(agent, [g, -g], SyncConfig(num_workers=2, lr=0.5))
    assert np.array_equal(out.flat(), agent.flat())


def test_aggregate_errors_and_skips():
    with pytest.raises(NoGradientsError):
        aggregate([None, None])
    with pytest.raises(ShapeMismatchError):
        aggregate([np.ones(3), np.ones(4)])
    # a failed worker is skipped and the mean renormalized over the rest
    assert aggregate([np.ones(2), None, 3 * np.ones(2)]).tolist() == [2.0, 2.0]
    with pytest.raises(ShapeMismatchError):
        sync_update(init_agent(0, window=4), [np.ones(3)], SyncConfig(lr=0.1))


def test_sync_config_validation():
    with pytest.raises(ConfigError):
        SyncConfig(num_workers=0)
    with pytest.raises(ConfigError):
        SyncConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        SyncConfig(aggregation="median")


def test_partitioned_gradients_match_full_batch():
    rng = np.random.default_rng(0)
    agent = init_agent(3, window=4)
    batch = random_batch(rng, n=32)
    ppo = PpoConfig(entropy_coef=0.01, lr=0.05)
    full, _ = ascent_direction(batch, agent, ppo)
    workers = [WorkerState(i, agent, worker_rng(0, i), WorkloadTrace({}, ()), batch) for i in range(4)]
    grads = [local_gradient(w, None, ppo, np.arange(8 * i, 8 * i + 8))[0] for i, w in enumerate(workers)]
    dist = aggregate(grads, "mean")
    assert np.max(np.abs(dist - full)) / np.max(np.abs(full)) < 1e-6
    stepped = sync_update(agent, grads, SyncConfig(num_workers=4, lr=ppo.lr))
    reference = agent.flat() + ppo.lr * full
    assert np.max(np.abs(stepped.flat() - reference)) / np.max(np.abs(reference)) < 1e-6


def test_same_worker_seed_same_gradient():
    env, trace = toy_env(), toy_trace()
    agent = init_agent(0, window=8)
    make = lambda: WorkerState(0, agent, worker_rng(4, 0), trace)
    a, _ = local_gradient(make(), env, PpoConfig())
    b, _ = local_gradient(make(), env, PpoConfig())
    assert np.array_equal(a.flat(), b.flat())


def test_empty_shard():
    worker = WorkerState(0, init_agent(0, window=8), worker_rng(0, 0), WorkloadTrace({}, ()))
    with pytest.raises(EmptyBatchError):
        local_gradient(worker, toy_env(), PpoConfig())
    with pytest.raises(EmptyBatchError):
        DDPPOTrainer(toy_trace(jobs=3), TrainConfig(toy_env(), sync=SyncConfig(num_workers=4)))


# -- training ----------------------------------------------------------------------------------


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_single_worker_matches_reference_loop(optimizer):
    env, trace = toy_env(), toy_trace()
    ppo = PpoConfig(optimizer=optimizer, lr=0.01, entropy_coef=0.01)
    cfg = TrainConfig(env, ppo, SyncConfig(num_workers=1), iterations=20, seed=3)
    ours = train(trace, cfg, init_agent(3, window=8))
    agent, curve = ppo_train_loop(trace, env, ppo, 20, 3, init_agent(3, window=8))
    assert np.array_equal(ours.agent.flat(), agent.flat())
    assert _strip(ours.curve) == _strip(curve)


def test_workers_identical_after_barrier():
    trainer = DDPPOTrainer(toy_trace(), TrainConfig(toy_env(), sync=SyncConfig(num_workers=3), seed=1))
    for _ in range(2):
        trainer.step()
        trainer._broadcast()
        assert all(np.array_equal(w.agent.flat(), trainer.agent.flat()) for w in trainer.workers)


def test_zero_iterations(tmp_path):
    agent = init_agent(2, window=8)
    res = train(toy_trace(), TrainConfig(toy_env(), iterations=0, seed=2), agent, out_dir=tmp_path)
    assert res.curve == [] and np.array_equal(res.agent.flat(), agent.flat())
    assert [p.name for p in res.checkpoints] == ["iter_00000.npz"]
    assert json.loads((tmp_path / "checkpoints" / "manifest.json").read_text())[0]["iteration"] == 0


def test_checkpoint_cadence(tmp_path):
    cfg = TrainConfig(toy_env(), sync=SyncConfig(num_workers=2), iterations=4, checkpoint_every=2)
    res = train(toy_trace(), cfg, out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["iter_00000.npz", "iter_00002.npz", "iter_00004.npz"]


def test_training_is_reproducible():
    cfg = TrainConfig(toy_env(), sync=SyncConfig(num_workers=2, sync_interval=2), iterations=3, seed=9)
    a, b = train(toy_trace(), cfg), train(toy_trace(), cfg)
    assert np.array_equal(a.agent.flat(), b.agent.flat()) and _strip(a.curve) == _strip(b.curve)


def test_failed_worker_is_skipped(monkeypatch):
    real = ddppo.ascent_direction
    calls = {"n": 0}

    def flaky(batch, agent, ppo):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise NonFiniteLossError("boom")
        return real(batch, agent, ppo)

    monkeypatch.setattr(ddppo, "ascent_direction", flaky)
    trainer = DDPPOTrainer(toy_trace(), TrainConfig(toy_env(), sync=SyncConfig(num_workers=2)))
    before = trainer.agent.flat()
    trainer.step()
    assert trainer.workers[1].failures > 0 and trainer.workers[0].failures == 0
    assert not np.array_equal(trainer.agent.flat(), before)


def test_all_workers_failing_aborts(monkeypatch):
    def broken(batch, agent, ppo):
        raise NonFiniteLossError("boom")

    monkeypatch.setattr(ddppo, "ascent_direction", broken)
    with pytest.raises(TrainingAborted):
        train(toy_trace(), TrainConfig(toy_env(), sync=SyncConfig(num_workers=2), iterations=1))


# -- population-based training -----------------------------------------------------------------


def _members(scores, hp=None):
    agent = init_agent(0, window=4)
    return [PbtMember(i, dict(hp or {"lr": 0.01 * (i + 1)}), s, agent.with_flat(agent.flat() + i))
            for i, s in enumerate(scores)]


def test_pbt_pair_clones_better_member():
    pop = _members([1.0, 5.0])
    new = pbt_step(pop, 0.5, (0.8, 1.2), 0)
    assert new[1].hyperparams == pop[1].hyperparams
    assert new[0].lineage == [1]
    assert new[0].hyperparams["lr"] in (pytest.approx(0.02 * 0.8), pytest.approx(0.02 * 1.2))
    assert np.array_equal(new[0].checkpoint.flat(), pop[1].checkpoint.flat())


def test_pbt_unit_factor_copies_exactly():
    new = pbt_step(_members([1.0, 5.0]), 0.5, (1.0,), 0)
    assert new[0].hyperparams == {"lr": 0.02}


def test_pbt_ties_replace_nobody():
    pop = _members([2.0, 2.0, 2.0, 2.0])
    new = pbt_step(pop, 0.25, (0.8, 1.2), 0)
    assert [m.hyperparams for m in new] == [m.hyperparams for m in pop]
    assert all(m.lineage == [] for m in new)


def test_pbt_unscored_member():
    with pytest.raises(UnscoredMemberError):
        pbt_step(_members([1.0, None]), 0.5)


def test_pbt_resample():
    space = {"lr": {"range": [0.5, 0.6]}}
    new = pbt_step(_members([1.0, 5.0]), 0.5, (1.0,), 0, resample_prob=1.0, space=space)
    assert 0.5 <= new[0].hyperparams["lr"] <= 0.6


@settings(max_examples=100)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.sampled_from([0.25, 0.5]),
       st.integers(0, 1000))
def test_pbt_never_lowers_best_score(scores, q, seed):
    pop = _members(scores)
    new = pbt_step(pop, q, (0.8, 1.2), seed)
    best = max(range(len(pop)), key=lambda i: pop[i].score)
    assert max(m.score for m in new) >= max(scores)
    assert new[best].lineage == pop[best].lineage


def test_pbt_config_validation():
    with pytest.raises(ConfigError):
        PbtConfig(population=1)
    with pytest.raises(ConfigError):
        PbtConfig(quantile=0.9)


def test_train_pbt_smoke():
    cfg = TrainConfig(toy_env(), sync=SyncConfig(num_workers=1), iterations=4, seed=0)
    res = train_pbt(toy_trace(), cfg, PbtConfig(population=2, quantile=0.5, cadence=2))
    assert len(res.curve) == 4 and set(res.hyperparams) == {"lr", "entropy_coef", "clip_eps"}
    assert all("population_best_reward" in r for r in res.curve)


# -- random search -----------------------------------------------------------------------------


def _fake_train(scores):
    def run(hp, seed):
        s = scores(hp)
        if s is None:
            raise NonFiniteLossError("diverged")
        return TrainResult(None, [{"episode_reward_mean": s}], hyperparams=hp)
    return run


def test_single_trial_is_best(tmp_path):
    spec = TuneSpec({"lr": {"range": [1e-4, 1e-2], "log": True}}, trials=1)
    res = tune(spec, _fake_train(lambda hp: -3.0), tmp_path / "trials.json")
    assert res.score == -3.0 and res.hyperparams == sample_configs(spec)[0]
    assert json.loads((tmp_path / "trials.json").read_text())[0]["status"] == "ok"


def test_sampled_configs_reproducible():
    spec = TuneSpec({"lr": {"range": [1e-4, 1e-2], "log": True}, "clip_eps": {"choices": [0.1, 0.2]}}, trials=5)
    assert sample_configs(spec) == sample_configs(spec)
    assert all(1e-4 <= c["lr"] <= 1e-2 for c in sample_configs(spec))


def test_all_trials_failed():
    spec = TuneSpec({"lr": {"range": [0.1, 1.0]}}, trials=3)
    with pytest.raises(AllTrialsFailedError):
        tune(spec, _fake_train(lambda hp: None))


def test_failed_trials_recorded():
    spec = TuneSpec({"lr": {"range": [0.0, 1.0]}}, trials=6, seed=2, max_concurrent=2)
    res = tune(spec, _fake_train(lambda hp: None if hp["lr"] > 0.5 else -hp["lr"]))
    statuses = {t["status"] for t in res.trials}
    assert statuses == {"ok", "failed"} and res.hyperparams["lr"] <= 0.5


def test_tune_spec_validation():
    with pytest.raises(ConfigError):
        TuneSpec({})
    with pytest.raises(ConfigError):
        TuneSpec({"lr": {"range": [0, 1]}}, trials=0)


def test_tuning_rejects_a_huge_learning_rate():
    env, trace = toy_env(), toy_trace()

    def run(hp, seed):
        cfg = TrainConfig(env, PpoConfig(lr=hp["lr"]), SyncConfig(num_workers=2), iterations=15, seed=0)
        return train(trace, cfg)

    spec = TuneSpec({"lr": {"choices": [10.0, 1e-3]}}, trials=2)
    configs = sample_configs(spec)
    if {c["lr"] for c in configs} != {10.0, 1e-3}:
        spec = TuneSpec({"lr": {"choices": [10.0, 1e-3]}}, trials=2, seed=1)
        configs = sample_configs(spec)
    assert {c["lr"] for c in configs} == {10.0, 1e-3}
    res = tune(spec, run)
    assert res.hyperparams["lr"] == 1e-3
    assert math.isfinite(res.score)
