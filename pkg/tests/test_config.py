import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from sched_forge import config as cfgmod
from sched_forge.config import ExperimentConfig, dump_config, from_dict, load_config
from sched_forge.errors import ConfigError


def test_defaults_round_trip_through_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(ExperimentConfig()))
    assert load_config(path) == ExperimentConfig()
    assert load_config(None) == ExperimentConfig()


def test_partial_section_keeps_other_defaults():
    cfg = from_dict({"ppo": {"lr": "3e-4"}, "dataset": {"synthetic": {"jobs": 300}}})
    assert cfg.ppo.lr == 3e-4
    assert cfg.ppo.optimizer == ExperimentConfig().ppo.optimizer
    assert cfg.dataset.synthetic.mean_interarrival == ExperimentConfig().dataset.synthetic.mean_interarrival


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        from_dict({"ppo": {"learning_rate": 1e-3}})
    with pytest.raises(ConfigError):
        from_dict({"bogus": 1})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        from_dict({"goal": "speed"})
    with pytest.raises(ConfigError):
        from_dict({"ppo": {"gamma": 2}})
    with pytest.raises(ConfigError):
        from_dict({"evaluate": {"iterations": 0}})


def test_io_and_yaml_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("ppo: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_override():
    cfg = ExperimentConfig().override(**{"train.iterations": 5, "sync.num_workers": 1})
    assert cfg.train.iterations == 5 and cfg.sync.num_workers == 1
    with pytest.raises(ConfigError):
        ExperimentConfig().override(**{"train.epochs": 5})


def test_dataset_does_not_follow_experiment_seed():
    small = {"dataset": {"synthetic": {"jobs": 50}}}
    a = cfgmod.load_dataset(from_dict({**small, "seed": 0}))
    b = cfgmod.load_dataset(from_dict({**small, "seed": 7}))
    assert a.jobs == b.jobs


def test_cluster_size_from_trace_header():
    cfg = from_dict({"dataset": {"synthetic": {"jobs": 20, "nodes": 64}}})
    trace = cfgmod.load_dataset(cfg)
    assert cfgmod.cluster_nodes(cfg, trace) == 64
    assert cfgmod.cluster_nodes(cfg.override(**{"cluster.nodes": 32}), trace) == 32


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["bsld", "wait", "turnaround", "util"]),
       st.floats(1e-6, 1.0), st.integers(1, 8))
def test_dump_load_identity(seed, goal, lr, workers):
    cfg = ExperimentConfig().override(**{"seed": seed, "goal": goal, "ppo.lr": lr, "sync.num_workers": workers})
    assert from_dict(yaml.safe_load(dump_config(cfg))) == cfg
