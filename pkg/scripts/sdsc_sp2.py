"""Rule baselines, single-worker PPO and four-worker DD-PPO on the SDSC-SP2 log.

    python3 scripts/sdsc_sp2.py path/to/SDSC-SP2-1998-4.2-cln.swf.gz --out runs/sdsc

The log is the public one from the Parallel Workloads Archive; it is not shipped here.
Every scheduler is evaluated on the same 10 held-out sequences of 1,024 jobs, one table per goal.
"""

import argparse
import sys
from pathlib import Path

import yaml

from sched_forge.cli import main

RULES = ["fcfs", "sjf", "f1", "wfp3", "unicef"]
GOALS = ["bsld", "wait", "turnaround", "util"]


def run(log: str, out: str, iterations: int, seed: int) -> int:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    code = main(["parse", log, "--out", str(root / "parse")])
    if code:
        return code
    for goal in GOALS:
        cfg = root / goal / "config.yaml"
        cfg.parent.mkdir(parents=True, exist_ok=True)
        cfg.write_text(yaml.safe_dump({
            "seed": seed,
            "goal": goal,
            "dataset": {"path": str(Path(log).resolve())},
            "train": {"iterations": iterations},
        }))
        for name, workers in (("ppo", 1), ("ddppo", 4)):
            code = main(["train", "--config", str(cfg), "--workers", str(workers),
                         "--out", str(cfg.parent / name)])
            if code:
                return code
        args = ["evaluate", "--config", str(cfg), "--out", str(cfg.parent / "eval")]
        for s in RULES + [str(cfg.parent / "ppo"), str(cfg.parent / "ddppo")]:
            args += ["--scheduler", s]
        code = main(args)
        if code:
            return code
    return 0


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("log")
    p.add_argument("--out", default="runs/sdsc")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    sys.exit(run(a.log, a.out, a.iterations, a.seed))
