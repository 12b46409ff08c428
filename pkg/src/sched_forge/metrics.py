"""Scheduling metrics and cross-episode summary statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyResultsError, NegativeInputError
from .simulator import EpisodeResult, utilization_series

BSLD_THRESHOLD = 10.0

METRICS = ("avg_bounded_slowdown", "avg_waiting_time", "avg_turnaround_time", "utilization")
# goal name -> (metric, lower is better)
GOALS = {
    "bsld": ("avg_bounded_slowdown", True),
    "wait": ("avg_waiting_time", True),
    "turnaround": ("avg_turnaround_time", True),
    "util": ("utilization", False),
}
# long spellings accepted everywhere a goal is named
GOALS.update({
    "bounded_slowdown": GOALS["bsld"],
    "waiting": GOALS["wait"],
    "utilization": GOALS["util"],
})


def _check(w, e):
    w = np.asarray(w, dtype=float)
    e = np.asarray(e, dtype=float)
    if np.any(w < 0) or np.any(e < 0):
        raise NegativeInputError("waiting and run times must be non-negative")
    return w, e


def bounded_slowdown(w, e, threshold: float = BSLD_THRESHOLD):
    w, e = _check(w, e)
    out = np.maximum((w + e) / np.maximum(e, threshold), 1.0)
    return float(out) if out.ndim == 0 else out


def turnaround(w, e):
    w, e = _check(w, e)
    out = w + e
    return float(out) if out.ndim == 0 else out


def utilization(result: EpisodeResult) -> float:
    """Time-weighted allocated fraction from first submission to last completion."""
    return float(utilization_series(result)[0])


def episode_metrics(result: EpisodeResult) -> dict[str, float]:
    w = result.wait.astype(float)
    e = result.run.astype(float)
    return {
        "avg_bounded_slowdown": float(np.mean(bounded_slowdown(w, e))),
        "avg_waiting_time": float(np.mean(w)),
        "avg_turnaround_time": float(np.mean(turnaround(w, e))),
        "utilization": utilization(result),
    }


@dataclass(frozen=True)
class DistStats:
    mean: float
    std: float
    median: float
    q25: float
    q75: float
    min: float
    max: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "DistStats":
        v = np.sort(np.asarray(values, dtype=float))
        if v.size == 0:
            raise EmptyResultsError("no values")
        q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
        return cls(
            mean=float(v.mean()), std=float(v.std()), median=float(med),
            q25=float(q25), q75=float(q75), min=float(v[0]), max=float(v[-1]),
        )


@dataclass(frozen=True)
class MetricsSummary:
    avg_bounded_slowdown: float
    avg_waiting_time: float
    avg_turnaround_time: float
    utilization: float
    distributions: dict[str, DistStats]
    per_episode: dict[str, list[float]]
    episodes: int

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            **{m: getattr(self, m) for m in METRICS},
            "distributions": {k: asdict(v) for k, v in self.distributions.items()},
            "per_episode": self.per_episode,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self, **keys) -> list[dict]:
        return [{**keys, "metric": m, **asdict(self.distributions[m])} for m in METRICS]


def summarize_values(per_episode: dict[str, list[float]]) -> MetricsSummary:
    if not per_episode or not per_episode[METRICS[0]]:
        raise EmptyResultsError("nothing to summarize")
    dists = {m: DistStats.of(per_episode[m]) for m in METRICS}
    return MetricsSummary(
        **{m: dists[m].mean for m in METRICS},
        distributions=dists,
        per_episode={m: list(per_episode[m]) for m in METRICS},
        episodes=len(per_episode[METRICS[0]]),
    )


def summarize(results: Sequence[EpisodeResult]) -> MetricsSummary:
    """Job-level averages per episode, then mean, population std and quartiles across episodes."""
    if not results:
        raise EmptyResultsError("no episode results")
    per = [episode_metrics(r) for r in results]
    return summarize_values({m: [p[m] for p in per] for m in METRICS})


def write_summary_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(out, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return out.getvalue()
