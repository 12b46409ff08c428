"""Discrete-event simulation of a homogeneous, node-allocated cluster.

The simulator replays a :class:`~sched_forge.workload.JobSequence` and asks a
scheduler which waiting job to run next whenever the wait queue is non-empty and no
reservation is outstanding. Events are job arrivals and job completions; at equal
timestamps completions are processed before arrivals.

When the chosen job does not fit, it receives a reservation at the earliest time
enough nodes are (by user estimates) released, and EASY backfilling starts any other
queued job that fits now and whose requested walltime ends no later than that
reservation. No further decisions are requested until the reserved job starts.

Jobs are executed for ``min(run_time, requested_time)`` seconds: a job reaching its
walltime is killed, as a batch system would. This keeps reservations safe.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .errors import (
    BadIndexError,
    EmptySequenceError,
    InvariantViolation,
    JobTooLargeError,
    SimulationError,
    ZeroHorizonError,
)
from .workload import JobRecord, JobSequence

logger = logging.getLogger(__name__)

_INF = math.inf


@dataclass(frozen=True)
class PreloadJob:
    nodes: int
    remaining: int


@dataclass(frozen=True)
class EpisodeConfig:
    total_nodes: int
    procs_per_node: int = 1
    window: int = 128
    backfill: bool = True
    preload: tuple[PreloadJob, ...] = ()
    check_invariants: bool = False

    def __post_init__(self):
        if self.total_nodes < 1 or self.procs_per_node < 1 or self.window < 1:
            raise SimulationError(f"invalid episode config: {self}")
        object.__setattr__(
            self,
            "preload",
            tuple(p if isinstance(p, PreloadJob) else PreloadJob(**p) for p in self.preload),
        )


class Cause(str, Enum):
    INITIAL = "initial"
    ARRIVAL = "arrival"
    COMPLETION = "completion"


@dataclass(frozen=True)
class StateView:
    clock: int
    free_nodes: int
    total_nodes: int
    queue_length: int
    running_count: int


@dataclass(frozen=True)
class DecisionPoint:
    state: StateView
    observable_jobs: tuple[JobRecord, ...]
    observable_nodes: tuple[int, ...]
    cause: Cause

    def __len__(self) -> int:
        return len(self.observable_jobs)


class _Done:
    def __repr__(self) -> str:
        return "EPISODE_DONE"


EPISODE_DONE = _Done()

Scheduler = Callable[[DecisionPoint], int]


@dataclass
class RunningJob:
    job_id: int
    nodes: int
    start_time: int
    end_time: int
    est_end: int


class ClusterState:
    """Mutable episode state. Owned by exactly one episode."""

    def __init__(self, jobs: list[JobRecord], nodes: list[int], config: EpisodeConfig, dropped: int):
        self.config = config
        self.jobs = jobs
        self.nodes = nodes
        self.total_nodes = config.total_nodes
        self.free_nodes = config.total_nodes
        self.clock = jobs[0].submit_time
        self.next_arrival = 0
        self.wait_queue: list[int] = []
        self.running: dict[int, RunningJob] = {}
        self._heap: list[tuple[int, int, int]] = []
        self.start = np.full(len(jobs), -1, dtype=np.int64)
        self.end = np.full(len(jobs), -1, dtype=np.int64)
        self.finished = 0
        self.reservation: tuple[int, int] | None = None
        self.reservations: list[tuple[int, int, int]] = []
        self.last_cause = Cause.INITIAL
        self.dropped = dropped
        self.decisions = 0
        self.alloc_times: list[int] = []
        self.alloc_nodes: list[int] = []

    # -- bookkeeping --------------------------------------------------------

    def _record_alloc(self) -> None:
        used = self.total_nodes - self.free_nodes
        if self.alloc_times and self.alloc_times[-1] == self.clock:
            self.alloc_nodes[-1] = used
        elif not self.alloc_nodes or self.alloc_nodes[-1] != used:
            self.alloc_times.append(self.clock)
            self.alloc_nodes.append(used)

    def _start(self, idx: int) -> None:
        job = self.jobs[idx]
        self.wait_queue.remove(idx)
        self.free_nodes -= self.nodes[idx]
        end = self.clock + job.run_time
        self.start[idx] = self.clock
        self.end[idx] = end
        self.running[idx] = RunningJob(
            job.job_id, self.nodes[idx], self.clock, end, self.clock + job.requested_time
        )
        heapq.heappush(self._heap, (end, job.job_id, idx))
        self._record_alloc()

    def _add_running(self, idx: int, job_id: int, nodes: int, end: int) -> None:
        # preloaded work: not part of the sequence, negative index
        self.free_nodes -= nodes
        self.running[idx] = RunningJob(job_id, nodes, self.clock, end, end)
        heapq.heappush(self._heap, (end, job_id, idx))

    def earliest_start(self, need: int) -> int:
        """Earliest time ``need`` nodes are free, trusting requested walltimes."""
        free = self.free_nodes
        if need <= free:
            return self.clock
        for rj in sorted(self.running.values(), key=lambda r: (r.est_end, r.job_id)):
            free += rj.nodes
            if free >= need:
                return rj.est_end
        raise JobTooLargeError(f"{need} nodes requested on a {self.total_nodes}-node cluster")

    def _try_start_reserved(self) -> None:
        idx, when = self.reservation
        if self.nodes[idx] <= self.free_nodes:
            self._start(idx)
            self.reservations.append((self.jobs[idx].job_id, when, self.clock))
            self.reservation = None

    def _backfill(self) -> None:
        reserved, shadow = self.reservation
        for idx in list(self.wait_queue):
            if idx == reserved:
                continue
            if self.nodes[idx] <= self.free_nodes and self.clock + self.jobs[idx].requested_time <= shadow:
                self._start(idx)

    def _advance(self) -> bool:
        """Move the clock to the next event and process it. False when none remain."""
        t_done = self._heap[0][0] if self._heap else _INF
        t_arr = self.jobs[self.next_arrival].submit_time if self.next_arrival < len(self.jobs) else _INF
        t = min(t_done, t_arr)
        if t == _INF:
            return False
        self.clock = int(t)
        completed = False
        while self._heap and self._heap[0][0] == t:
            _, _, idx = heapq.heappop(self._heap)
            rj = self.running.pop(idx)
            self.free_nodes += rj.nodes
            if idx >= 0:
                self.finished += 1
            completed = True
        while self.next_arrival < len(self.jobs) and self.jobs[self.next_arrival].submit_time == t:
            self.wait_queue.append(self.next_arrival)
            self.next_arrival += 1
        self.last_cause = Cause.COMPLETION if completed else Cause.ARRIVAL
        self._record_alloc()
        if self.reservation is not None:
            self._try_start_reserved()
            if self.reservation is not None and self.config.backfill:
                self._backfill()
        if self.config.check_invariants:
            self.check_invariants()
        return True

    def check_invariants(self) -> None:
        held = sum(rj.nodes for rj in self.running.values())
        if self.free_nodes < 0 or self.free_nodes + held != self.total_nodes:
            raise InvariantViolation(
                f"node conservation broken at t={self.clock}: free={self.free_nodes} held={held}"
            )
        for rj in self.running.values():
            if not rj.start_time <= self.clock <= rj.end_time:
                raise InvariantViolation(f"job {rj.job_id} running outside [start, end] at t={self.clock}")
        running_seq = sum(1 for i in self.running if i >= 0)
        pending = len(self.jobs) - self.next_arrival
        if pending + len(self.wait_queue) + running_seq + self.finished != len(self.jobs):
            raise InvariantViolation(f"job accounting broken at t={self.clock}")
        if len(set(self.wait_queue)) != len(self.wait_queue):
            raise InvariantViolation("duplicate job in wait queue")
        if any(i in self.running for i in self.wait_queue):
            raise InvariantViolation("job both waiting and running")

    def view(self) -> StateView:
        return StateView(
            self.clock, self.free_nodes, self.total_nodes, len(self.wait_queue), len(self.running)
        )


def _sanitize(job: JobRecord) -> JobRecord:
    requested = job.requested_time if job.requested_time > 0 else max(job.run_time, 1)
    return replace(job, run_time=min(job.run_time, requested), requested_time=requested)


def init_episode(sequence: JobSequence, config: EpisodeConfig) -> ClusterState:
    kept = [j for j in sequence.jobs if j.run_time >= 0]
    dropped = len(sequence.jobs) - len(kept)
    if dropped:
        logger.warning("dropped %d jobs with unknown run time", dropped)
    if not kept:
        raise EmptySequenceError("no replayable jobs in sequence")
    kept.sort(key=lambda j: (j.submit_time, j.job_id))
    jobs = [_sanitize(j) for j in kept]
    nodes = [max(1, math.ceil(j.requested_procs / config.procs_per_node)) for j in jobs]
    for job, n in zip(jobs, nodes):
        if n > config.total_nodes:
            raise JobTooLargeError(
                f"job {job.job_id} needs {n} nodes; cluster has {config.total_nodes}"
            )
    state = ClusterState(jobs, nodes, config, dropped)
    if sum(p.nodes for p in config.preload) > config.total_nodes:
        raise JobTooLargeError("preload exceeds cluster size")
    for k, p in enumerate(config.preload):
        state._add_running(-1 - k, -1 - k, p.nodes, state.clock + max(0, p.remaining))
    state._record_alloc()
    if config.check_invariants:
        state.check_invariants()
    return state


def next_decision(state: ClusterState) -> DecisionPoint | _Done:
    while True:
        if state.reservation is None and state.wait_queue:
            window = state.wait_queue[: state.config.window]
            return DecisionPoint(
                state.view(),
                tuple(state.jobs[i] for i in window),
                tuple(state.nodes[i] for i in window),
                state.last_cause,
            )
        if not state._advance():
            if state.wait_queue or state.reservation is not None:
                raise InvariantViolation("jobs left waiting with no future events")
            return EPISODE_DONE


def apply_action(state: ClusterState, chosen: int) -> ClusterState:
    if state.reservation is not None:
        raise SimulationError("cannot act while a reservation is outstanding")
    window = state.wait_queue[: state.config.window]
    if not 0 <= chosen < len(window):
        raise BadIndexError(f"action {chosen} outside observable window of {len(window)}")
    idx = window[chosen]
    state.decisions += 1
    if state.nodes[idx] <= state.free_nodes:
        state._start(idx)
    else:
        state.reservation = (idx, state.earliest_start(state.nodes[idx]))
        if state.config.backfill:
            state._backfill()
    if state.config.check_invariants:
        state.check_invariants()
    return state


@dataclass
class EpisodeResult:
    job_ids: np.ndarray
    submit: np.ndarray
    start: np.ndarray
    end: np.ndarray
    run: np.ndarray
    requested: np.ndarray
    nodes: np.ndarray
    alloc_times: np.ndarray
    alloc_nodes: np.ndarray
    total_nodes: int
    dropped: int = 0
    decisions: int = 0
    reservations: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def wait(self) -> np.ndarray:
        return self.start - self.submit

    @property
    def makespan(self) -> int:
        return int(self.end.max() - self.submit.min())

    @property
    def horizon(self) -> tuple[int, int]:
        return int(self.submit.min()), int(self.end.max())

    def to_dict(self) -> dict:
        return {
            "total_nodes": self.total_nodes,
            "makespan": self.makespan,
            "dropped": self.dropped,
            "decisions": self.decisions,
            "jobs": [
                {
                    "job_id": int(j), "submit": int(s), "start": int(b), "end": int(e),
                    "wait": int(b - s), "run": int(r), "requested": int(q), "nodes": int(n),
                }
                for j, s, b, e, r, q, n in zip(
                    self.job_ids, self.submit, self.start, self.end,
                    self.run, self.requested, self.nodes,
                )
            ],
            "allocation": [[int(t), int(a)] for t, a in zip(self.alloc_times, self.alloc_nodes)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["job_id", "submit", "start", "end", "wait", "run", "requested", "nodes"])
        for row in self.to_dict()["jobs"]:
            w.writerow(row.values())
        return out.getvalue()


def collect_result(state: ClusterState) -> EpisodeResult:
    if state.finished != len(state.jobs):
        raise SimulationError("episode not finished")
    jobs = state.jobs
    return EpisodeResult(
        job_ids=np.array([j.job_id for j in jobs], dtype=np.int64),
        submit=np.array([j.submit_time for j in jobs], dtype=np.int64),
        start=state.start.copy(),
        end=state.end.copy(),
        run=np.array([j.run_time for j in jobs], dtype=np.int64),
        requested=np.array([j.requested_time for j in jobs], dtype=np.int64),
        nodes=np.array(state.nodes, dtype=np.int64),
        alloc_times=np.array(state.alloc_times, dtype=np.int64),
        alloc_nodes=np.array(state.alloc_nodes, dtype=np.int64),
        total_nodes=state.total_nodes,
        dropped=state.dropped,
        decisions=state.decisions,
        reservations=list(state.reservations),
    )


def run_episode(sequence: JobSequence, scheduler: Scheduler, config: EpisodeConfig) -> EpisodeResult:
    state = init_episode(sequence, config)
    while True:
        decision = next_decision(state)
        if decision is EPISODE_DONE:
            break
        apply_action(state, int(scheduler(decision)))
    return collect_result(state)


def _allocation_integral(result: EpisodeResult, t: np.ndarray) -> np.ndarray:
    times = result.alloc_times.astype(float)
    values = result.alloc_nodes.astype(float)
    cum = np.concatenate([[0.0], np.cumsum(values[:-1] * np.diff(times))])
    k = np.searchsorted(times, t, side="right") - 1
    kk = np.clip(k, 0, None)
    out = cum[kk] + values[kk] * (t - times[kk])
    return np.where(k < 0, 0.0, out)


def utilization_series(
    result: EpisodeResult, horizon: tuple[float, float] | float | None = None, bins: int = 1
) -> np.ndarray:
    """Time-weighted allocated-node fraction over ``bins`` equal slices of the horizon.

    ``horizon`` is ``(t0, t1)``, a duration measured from the first submission, or
    None for first submission to last completion.
    """
    if horizon is None:
        t0, t1 = result.horizon
    elif np.isscalar(horizon):
        t0 = float(result.submit.min())
        t1 = t0 + float(horizon)
    else:
        t0, t1 = horizon
    if not t1 > t0:
        raise ZeroHorizonError(f"empty horizon [{t0}, {t1}]")
    edges = np.linspace(float(t0), float(t1), bins + 1)
    integral = _allocation_integral(result, edges)
    return np.diff(integral) / (np.diff(edges) * result.total_nodes)
