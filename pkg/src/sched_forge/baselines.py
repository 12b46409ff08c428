"""Rule-based priority schedulers: lower score runs first, ties go to the lowest job id."""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .errors import ConfigError, EmptyWindowError, NonPositiveRuntimeError
from .simulator import DecisionPoint, Scheduler
from .workload import JobRecord


class PriorityRule(str, Enum):
    FCFS = "fcfs"
    SJF = "sjf"
    F1 = "f1"
    WFP3 = "wfp3"
    UNICEF = "unicef"
    RANDOM = "random"

    @classmethod
    def parse(cls, name: str) -> "PriorityRule":
        key = name.strip().lower()
        aliases = {"wfp": "wfp3", "uni": "unicef"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"unknown scheduler rule {name!r}") from None


RULE_NAMES = [r.value for r in PriorityRule]


def score(rule: PriorityRule, job: JobRecord, clock: int) -> float:
    n = job.requested_procs
    r = job.requested_time
    s = job.submit_time
    if r <= 0:
        raise NonPositiveRuntimeError(f"job {job.job_id} has requested_time {r}")
    w = max(clock - s, 0)
    if rule is PriorityRule.FCFS:
        return float(s)
    if rule is PriorityRule.SJF:
        return float(r)
    if rule is PriorityRule.WFP3:
        return -((w / r) ** 3) * n
    if rule is PriorityRule.UNICEF:
        return -w / (math.log2(max(n, 2)) * r)
    if rule is PriorityRule.F1:
        return math.log10(max(r, 1)) * n + 870.0 * math.log10(max(s, 1))
    if rule is PriorityRule.RANDOM:
        return 0.0
    raise ValueError(rule)


def pick(rule: PriorityRule, decision: DecisionPoint, rng: np.random.Generator | None = None) -> int:
    jobs = decision.observable_jobs
    if not jobs:
        raise EmptyWindowError("no observable jobs")
    if rule is PriorityRule.RANDOM:
        if rng is None:
            raise ValueError("RANDOM rule needs a generator")
        return int(rng.integers(len(jobs)))
    clock = decision.state.clock
    keys = [(score(rule, job, clock), job.job_id) for job in jobs]
    return min(range(len(jobs)), key=keys.__getitem__)


def rule_scheduler(name: str | PriorityRule, seed: int = 0) -> Scheduler:
    """A scheduler callback; RANDOM draws from a generator owned by the callback."""
    rule = name if isinstance(name, PriorityRule) else PriorityRule.parse(name)
    rng = np.random.default_rng(seed) if rule is PriorityRule.RANDOM else None

    def schedule(decision: DecisionPoint) -> int:
        return pick(rule, decision, rng)

    schedule.rule = rule
    return schedule
