"""Train DD-PPO on the default synthetic 256-node workload and compare it with every rule.

    python3 scripts/desk_scale.py --out runs/desk --seed 0

Writes <out>/train (checkpoints, log, manifest) and <out>/eval (summary.json/csv, raw.csv).
Takes about three minutes on one laptop core.
"""

import argparse
import sys

from sched_forge.cli import main


def run(out: str, seed: int, iterations: int) -> int:
    code = main(["train", "--seed", str(seed), "--iterations", str(iterations), "--out", f"{out}/train"])
    if code:
        return code
    # 10 held-out sequences of 256 jobs (the 500-job holdout is too short for 1024)
    schedulers = ["fcfs", "sjf", "f1", "wfp3", "unicef", "random", f"{out}/train"]
    args = ["evaluate", "--seed", str(seed), "--sequence-length", "256", "--out", f"{out}/eval"]
    for s in schedulers:
        args += ["--scheduler", s]
    return main(args)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=200)
    a = p.parse_args()
    sys.exit(run(a.out, a.seed, a.iterations))
