"""Standard Workload Format (SWF) traces: parsing, slicing, statistics and synthesis.

SWF is a line-oriented format. Lines starting with ``;`` carry header directives
(``; MaxNodes: 128``) or free comments; every other non-blank line holds 18
whitespace-separated numeric columns, ``-1`` meaning unknown.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyTraceError,
    InvalidParamsError,
    MissingFieldsError,
    NonNumericFieldError,
    OutOfRangeError,
)

logger = logging.getLogger(__name__)

SWF_COLUMNS = 18
UNKNOWN = -1

_HEADER_RE = re.compile(r"^;\s*([A-Za-z][\w]*)\s*:\s*(.*?)\s*$")
_WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


class JobStatus(IntEnum):
    UNKNOWN = -1
    FAILED = 0
    COMPLETED = 1
    PARTIAL = 2
    PARTIAL_LAST = 3
    PARTIAL_FAILED = 4
    CANCELLED = 5

    @classmethod
    def from_code(cls, code: int) -> "JobStatus":
        try:
            return cls(code)
        except ValueError:
            return cls.UNKNOWN


@dataclass(frozen=True)
class JobRecord:
    """One SWF job. Field order follows the 18 SWF columns."""

    job_id: int
    submit_time: int
    wait_time: int = UNKNOWN
    run_time: int = UNKNOWN
    used_procs: int = UNKNOWN
    avg_cpu_time: float = UNKNOWN
    used_memory: float = UNKNOWN
    requested_procs: int = 1
    requested_time: int = UNKNOWN
    requested_memory: int = UNKNOWN
    status: JobStatus = JobStatus.COMPLETED
    user_id: int = UNKNOWN
    group_id: int = UNKNOWN
    executable_id: int = UNKNOWN
    queue_id: int = UNKNOWN
    partition_id: int = UNKNOWN
    preceding_job_id: int = UNKNOWN
    think_time: int = UNKNOWN

    def to_swf(self) -> str:
        return " ".join(_fmt(getattr(self, f.name)) for f in fields(self))


_FLOAT_COLUMNS = {"avg_cpu_time", "used_memory"}
_FIELD_NAMES = [f.name for f in fields(JobRecord)]
assert len(_FIELD_NAMES) == SWF_COLUMNS


def _fmt(value) -> str:
    if isinstance(value, float):
        return str(int(value)) if value.is_integer() else repr(value)
    return str(int(value))


@dataclass(frozen=True)
class WorkloadTrace:
    header: dict
    jobs: tuple[JobRecord, ...]
    skipped_lines: int = 0
    rejected_jobs: int = 0

    def __len__(self) -> int:
        return len(self.jobs)

    @property
    def max_procs(self) -> int:
        value = self.header.get("MaxProcs")
        if isinstance(value, int) and value > 0:
            return value
        nodes = self.header.get("MaxNodes")
        if isinstance(nodes, int) and nodes > 0:
            return nodes
        return max((j.requested_procs for j in self.jobs), default=1)

    @property
    def max_nodes(self) -> int:
        value = self.header.get("MaxNodes")
        if isinstance(value, int) and value > 0:
            return value
        return self.max_procs

    @property
    def procs_per_node(self) -> int:
        return max(1, self.max_procs // self.max_nodes)

    def node_footprint(self, job: JobRecord) -> int:
        return node_footprint(job, self.procs_per_node)


@dataclass(frozen=True)
class JobSequence:
    """A contiguous run of jobs re-based so that the first submits at t=0."""

    jobs: tuple[JobRecord, ...]
    start_index: int = 0
    epoch_offset: int = 0

    def __len__(self) -> int:
        return len(self.jobs)

    def digest(self) -> str:
        h = hashlib.sha256()
        for job in self.jobs:
            h.update(job.to_swf().encode())
            h.update(b"\n")
        return h.hexdigest()


def node_footprint(job: JobRecord, procs_per_node: int = 1) -> int:
    return max(1, math.ceil(job.requested_procs / procs_per_node))


# ---------------------------------------------------------------------------
# parsing


def _parse_header_value(raw: str):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def _to_number(token: str, column: str, lineno: int):
    try:
        value = float(token)
    except ValueError:
        raise NonNumericFieldError(
            f"line {lineno}: column {column!r} is not numeric: {token!r}"
        ) from None
    if not math.isfinite(value):
        raise NonNumericFieldError(f"line {lineno}: column {column!r} is not finite")
    if column in _FLOAT_COLUMNS:
        return value
    return int(round(value))


def _validate(job: JobRecord) -> JobRecord | None:
    """Field-level repair; None means the job cannot be simulated."""
    if job.submit_time < 0:
        return None
    if job.requested_procs <= 0:
        if job.used_procs > 0:
            job = replace(job, requested_procs=job.used_procs)
        else:
            return None
    if job.run_time < UNKNOWN:
        job = replace(job, run_time=UNKNOWN)
    return job


def parse_swf(text: str | Iterable[str], strict: bool = False) -> WorkloadTrace:
    """Parse SWF text into a :class:`WorkloadTrace`.

    In lenient mode (the default) malformed data lines are skipped and counted in
    ``skipped_lines``; with ``strict=True`` they raise. Jobs whose processor count
    cannot be determined are dropped in both modes and counted in ``rejected_jobs``.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    header: dict = {}
    jobs: list[JobRecord] = []
    skipped = rejected = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(";"):
            m = _HEADER_RE.match(line)
            if m:
                header[m.group(1)] = _parse_header_value(m.group(2))
            continue
        tokens = line.split()
        try:
            if len(tokens) < SWF_COLUMNS:
                raise MissingFieldsError(
                    f"line {lineno}: expected {SWF_COLUMNS} columns, got {len(tokens)}"
                )
            values = [
                _to_number(tok, name, lineno)
                for tok, name in zip(tokens[:SWF_COLUMNS], _FIELD_NAMES)
            ]
        except (MissingFieldsError, NonNumericFieldError):
            if strict:
                raise
            skipped += 1
            continue
        values[10] = JobStatus.from_code(values[10])
        job = _validate(JobRecord(*values))
        if job is None:
            rejected += 1
            continue
        jobs.append(job)
    if not jobs:
        raise EmptyTraceError("trace contains no valid jobs")
    jobs.sort(key=lambda j: (j.submit_time, j.job_id))
    if skipped or rejected:
        logger.warning("SWF parse: skipped %d malformed lines, rejected %d jobs", skipped, rejected)
    return WorkloadTrace(header, tuple(jobs), skipped, rejected)


def load_trace(path: str | Path, strict: bool = False) -> WorkloadTrace:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rt", encoding="utf-8", errors="replace") as fh:
            return parse_swf(fh.read(), strict=strict)
    return parse_swf(path.read_text(encoding="utf-8", errors="replace"), strict=strict)


def serialize_swf(trace: WorkloadTrace) -> str:
    out = io.StringIO()
    for key, value in trace.header.items():
        out.write(f"; {key}: {value}\n")
    for job in trace.jobs:
        out.write(job.to_swf())
        out.write("\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# slicing


def slice_sequence(trace: WorkloadTrace, start: int, count: int) -> JobSequence:
    n = len(trace.jobs)
    if start < 0 or count < 1 or start + count > n:
        raise OutOfRangeError(f"slice [{start}, {start + count}) outside trace of {n} jobs")
    chunk = trace.jobs[start : start + count]
    offset = chunk[0].submit_time
    jobs = tuple(replace(j, submit_time=j.submit_time - offset) for j in chunk)
    return JobSequence(jobs, start_index=start, epoch_offset=offset)


def sample_sequences(
    trace: WorkloadTrace, n: int, count: int, seed: int
) -> list[JobSequence]:
    total = len(trace.jobs)
    if count < 1 or count > total:
        raise OutOfRangeError(f"cannot take {count} jobs from a trace of {total}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, total - count + 1, size=n)
    return [slice_sequence(trace, int(s), count) for s in starts]


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SynthParams:
    jobs: int = 10_000
    nodes: int = 256
    mean_interarrival: float = 600.0
    runtime_range: tuple[int, int] = (60, 36_000)
    size_distribution: str = "pow2"
    # requested_time / run_time is drawn from U(1, overestimate)
    overestimate: float = 3.0


def _draw_sizes(rng: np.random.Generator, params: SynthParams) -> np.ndarray:
    dist = str(params.size_distribution)
    n, nodes = params.jobs, params.nodes
    if dist.startswith("constant"):
        _, _, k = dist.partition(":")
        size = int(k or 1)
        if not 1 <= size <= nodes:
            raise InvalidParamsError(f"constant size {size} outside [1, {nodes}]")
        return np.full(n, size, dtype=np.int64)
    if dist == "uniform":
        return rng.integers(1, nodes + 1, size=n)
    if dist == "pow2":
        # serial jobs are common; parallel sizes favour small powers of two
        kmax = int(math.floor(math.log2(nodes)))
        weights = 0.7 ** np.arange(kmax + 1)
        weights /= weights.sum()
        k = rng.choice(kmax + 1, size=n, p=weights)
        upper = 2**k
        exact = rng.random(n) < 0.75
        lower = np.maximum(upper // 2, 1)
        jitter = rng.integers(0, np.maximum(upper - lower, 1))
        sizes = np.where(exact | (k == 0), upper, lower + 1 + jitter)
        serial = rng.random(n) < 0.2
        return np.minimum(np.where(serial, 1, sizes), nodes).astype(np.int64)
    raise InvalidParamsError(f"unknown size distribution {dist!r}")


def synthesize_trace(params: SynthParams, seed: int) -> WorkloadTrace:
    """Generate a synthetic single-partition trace; deterministic per seed."""
    lo, hi = params.runtime_range
    if (
        params.jobs <= 0
        or params.nodes <= 0
        or params.mean_interarrival <= 0
        or lo <= 0
        or hi < lo
        or params.overestimate < 1
    ):
        raise InvalidParamsError(f"invalid synthesis parameters: {params}")
    rng = np.random.default_rng(seed)
    gaps = np.rint(rng.exponential(params.mean_interarrival, size=params.jobs)).astype(np.int64)
    gaps[0] = 0
    submits = np.cumsum(gaps)
    runtimes = np.rint(np.exp(rng.uniform(math.log(lo), math.log(hi), size=params.jobs))).astype(np.int64)
    factors = rng.uniform(1.0, params.overestimate, size=params.jobs)
    requested = np.maximum(np.ceil(runtimes * factors / 60.0).astype(np.int64) * 60, runtimes)
    sizes = _draw_sizes(rng, params)
    jobs = tuple(
        JobRecord(
            job_id=i + 1,
            submit_time=int(submits[i]),
            wait_time=UNKNOWN,
            run_time=int(runtimes[i]),
            used_procs=int(sizes[i]),
            requested_procs=int(sizes[i]),
            requested_time=int(requested[i]),
            status=JobStatus.COMPLETED,
            user_id=int(i % 97) + 1,
        )
        for i in range(params.jobs)
    )
    header = {
        "Version": 2.2,
        "Computer": "synthetic",
        "MaxJobs": params.jobs,
        "MaxRecords": params.jobs,
        "MaxNodes": params.nodes,
        "MaxProcs": params.nodes,
        "Note": f"seed={seed} {json.dumps(asdict(params), sort_keys=True)}",
    }
    return WorkloadTrace(header, jobs)


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class TraceStats:
    job_count: int
    node_count: int
    job_size_histogram: dict[int, int]
    hourly_submission_counts: list[int]
    daily_submission_counts: list[int]
    runtime_quantiles: dict[str, float]
    epoch_weekday: int = 0
    epoch_second_of_day: int = 0
    skipped_lines: int = 0
    rejected_jobs: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["job_size_histogram"] = {str(k): v for k, v in self.job_size_histogram.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["section", "key", "value"])
        w.writerow(["summary", "job_count", self.job_count])
        w.writerow(["summary", "node_count", self.node_count])
        for k, v in self.job_size_histogram.items():
            w.writerow(["job_size", k, v])
        for h, v in enumerate(self.hourly_submission_counts):
            w.writerow(["hourly", h, v])
        for d, v in enumerate(self.daily_submission_counts):
            w.writerow(["daily", _WEEKDAYS[d], v])
        for q, v in self.runtime_quantiles.items():
            w.writerow(["runtime_quantile", q, v])
        return out.getvalue()


def size_bucket(procs: int) -> int:
    """Smallest power of two >= procs."""
    return 1 << max(0, int(procs) - 1).bit_length()


def trace_epoch(header: dict) -> tuple[int, int]:
    """(weekday, second_of_day) of the trace epoch; Monday midnight if unknown."""
    start = header.get("StartTime")
    if isinstance(start, str):
        tokens = start.split()
        if tokens and tokens[0][:3] in _WEEKDAYS:
            weekday = _WEEKDAYS.index(tokens[0][:3])
            second = 0
            for tok in tokens:
                m = re.fullmatch(r"(\d{1,2}):(\d{2}):(\d{2})", tok)
                if m:
                    h, mi, s = map(int, m.groups())
                    second = h * 3600 + mi * 60 + s
                    break
            return weekday, second
    unix = header.get("UnixStartTime")
    if isinstance(unix, int):
        t = time.gmtime(unix)
        return t.tm_wday, t.tm_hour * 3600 + t.tm_min * 60 + t.tm_sec
    return 0, 0


def trace_statistics(
    trace: WorkloadTrace,
    epoch_weekday: int | None = None,
    epoch_second_of_day: int | None = None,
) -> TraceStats:
    if not trace.jobs:
        raise EmptyTraceError("cannot summarize an empty trace")
    weekday, second = trace_epoch(trace.header)
    if epoch_weekday is not None:
        weekday = epoch_weekday
    if epoch_second_of_day is not None:
        second = epoch_second_of_day

    hist: dict[int, int] = {}
    for job in trace.jobs:
        b = size_bucket(job.requested_procs)
        hist[b] = hist.get(b, 0) + 1
    hist = dict(sorted(hist.items()))

    submits = np.array([j.submit_time for j in trace.jobs], dtype=np.int64)
    absolute = submits + second
    hours = (absolute // 3600) % 24
    days = (absolute // 86400 + weekday) % 7
    hourly = np.bincount(hours, minlength=24).tolist()
    daily = np.bincount(days, minlength=7).tolist()

    runtimes = np.array([j.run_time for j in trace.jobs if j.run_time >= 0], dtype=float)
    if runtimes.size:
        qs = np.quantile(runtimes, [0.0, 0.25, 0.5, 0.75, 1.0])
        quantiles = {k: float(v) for k, v in zip(("min", "q25", "median", "q75", "max"), qs)}
    else:
        quantiles = {}
    return TraceStats(
        job_count=len(trace.jobs),
        node_count=trace.max_nodes,
        job_size_histogram=hist,
        hourly_submission_counts=hourly,
        daily_submission_counts=daily,
        runtime_quantiles=quantiles,
        epoch_weekday=weekday,
        epoch_second_of_day=second,
        skipped_lines=trace.skipped_lines,
        rejected_jobs=trace.rejected_jobs,
    )


def split_trace(trace: WorkloadTrace, parts: int) -> list[WorkloadTrace]:
    """Contiguous, near-equal partition of the job list (used for worker shards)."""
    bounds = np.linspace(0, len(trace.jobs), parts + 1).astype(int)
    return [
        WorkloadTrace(trace.header, trace.jobs[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
    ]


def holdout_split(trace: WorkloadTrace, fraction: float) -> tuple[WorkloadTrace, WorkloadTrace]:
    cut = int(round(len(trace.jobs) * (1.0 - fraction)))
    return (
        WorkloadTrace(trace.header, trace.jobs[:cut]),
        WorkloadTrace(trace.header, trace.jobs[cut:]),
    )


def sequences_digest(sequences: Sequence[JobSequence]) -> str:
    h = hashlib.sha256()
    for s in sequences:
        h.update(s.digest().encode())
    return h.hexdigest()
