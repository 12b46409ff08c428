import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from _helpers import job, sequence
from sched_forge.baselines import RULE_NAMES, PriorityRule, pick, rule_scheduler, score
from sched_forge.errors import ConfigError, EmptyWindowError, NonPositiveRuntimeError
from sched_forge.simulator import DecisionPoint, EpisodeConfig, StateView, run_episode
from sched_forge.workload import JobRecord


def _decision(jobs, clock=0):
    jobs = tuple(jobs)
    view = StateView(clock, 1, 1, len(jobs), 0)
    return DecisionPoint(view, jobs, tuple(j.requested_procs for j in jobs), "arrival")


def _rec(job_id, s, r, n):
    return JobRecord(job_id=job_id, submit_time=s, requested_time=r, requested_procs=n, run_time=r)


def test_fcfs_score_is_submit_time():
    assert score(PriorityRule.FCFS, _rec(1, 100, 5, 1), 200) == 100


def test_sjf_prefers_short_job():
    short, long_ = _rec(1, 0, 10, 1), _rec(2, 0, 1000, 1)
    assert score(PriorityRule.SJF, short, 0) < score(PriorityRule.SJF, long_, 0)
    assert pick(PriorityRule.SJF, _decision([long_, short])) == 1


def test_wfp3_zero_wait_scores_zero():
    for n, r in ((1, 1), (64, 3600), (7, 12)):
        assert score(PriorityRule.WFP3, _rec(1, 50, r, n), 50) == 0


def test_f1_unit_job():
    assert score(PriorityRule.F1, _rec(1, 1, 1, 1), 10) == 0


def test_formulas_by_hand():
    j = _rec(1, 100, 50, 8)
    assert score(PriorityRule.WFP3, j, 200) == pytest.approx(-((100 / 50) ** 3) * 8)
    assert score(PriorityRule.UNICEF, j, 200) == pytest.approx(-100 / (3 * 50))
    assert score(PriorityRule.F1, j, 200) == pytest.approx(math.log10(50) * 8 + 870 * 2)
    # guards keep serial jobs finite under UNICEF
    assert score(PriorityRule.UNICEF, _rec(1, 0, 10, 1), 20) == pytest.approx(-2.0)


def test_non_positive_runtime():
    with pytest.raises(NonPositiveRuntimeError):
        score(PriorityRule.SJF, _rec(1, 0, 0, 1), 0)


def test_pick_single_and_ties():
    assert pick(PriorityRule.WFP3, _decision([_rec(5, 0, 10, 1)])) == 0
    same = [_rec(i, 0, 10, 1) for i in (9, 3, 7)]
    assert pick(PriorityRule.SJF, _decision(same)) == 1


def test_pick_empty_window():
    with pytest.raises(EmptyWindowError):
        pick(PriorityRule.FCFS, _decision([]))


def test_random_reproducible():
    d = _decision([_rec(i, 0, 10, 1) for i in range(1, 20)])
    a = [pick(PriorityRule.RANDOM, d, np.random.default_rng(4)) for _ in range(3)]
    assert len(set(a)) == 1


def test_rule_names_and_aliases():
    assert set(RULE_NAMES) == {"fcfs", "sjf", "f1", "wfp3", "unicef", "random"}
    assert PriorityRule.parse("WFP") is PriorityRule.WFP3
    assert PriorityRule.parse("uni") is PriorityRule.UNICEF
    with pytest.raises(ConfigError):
        PriorityRule.parse("lifo")


jobs_st = st.lists(
    st.tuples(st.integers(0, 10**5), st.integers(1, 10**5), st.integers(1, 512)),
    min_size=1, max_size=12,
)
transforms = [
    lambda x: 4.0 * x,
    lambda x: x ** 3,
    math.atan,
    lambda x: math.copysign(math.log1p(abs(x)), x),
]


@settings(max_examples=200, deadline=None)
@given(jobs_st, st.integers(0, 10**5), st.sampled_from([r for r in PriorityRule if r is not PriorityRule.RANDOM]),
       st.sampled_from(transforms))
def test_increasing_transform_keeps_argmin(specs, extra, rule, f):
    recs = [_rec(i + 1, s, r, n) for i, (s, r, n) in enumerate(specs)]
    clock = max(s for s, _, _ in specs) + extra
    raw = [score(rule, j, clock) for j in recs]
    mapped = [f(x) for x in raw]
    pairs = sorted(set(zip(raw, mapped)))
    # only meaningful where floating point keeps the transform strictly increasing
    assume(all(b[1] > a[1] for a, b in zip(pairs, pairs[1:])))
    best = min(range(len(recs)), key=lambda i: (mapped[i], recs[i].job_id))
    assert pick(rule, _decision(recs, clock)) == best


def _brute_force_min_wait(runs):
    best = math.inf
    for order in itertools.permutations(runs):
        best = min(best, sum(itertools.accumulate(order[:-1], initial=0)))
    return best / len(runs)


@pytest.mark.parametrize("n", range(1, 7))
def test_sjf_matches_brute_force(n):
    rng = np.random.default_rng(n)
    runs = [int(x) for x in rng.integers(1, 100, size=n)]
    oracle = _brute_force_min_wait(runs)
    sjf = rule_scheduler("sjf")
    for perm in itertools.permutations(range(n)):
        seq = sequence(*(job(k + 1, 0, runs[p]) for k, p in enumerate(perm)))
        r = run_episode(seq, sjf, EpisodeConfig(total_nodes=1))
        assert r.wait.mean() == pytest.approx(oracle, abs=1e-9)
