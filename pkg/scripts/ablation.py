"""Train the full / no-PBT / no-tune variants under one config and evaluate them side by side.

    python3 scripts/ablation.py --out runs/ablation [--config my.yaml] [--iterations 50]

PBT multiplies the cost by the population size, so the default budget here is smaller than
a plain training run.
"""

import argparse
import sys

from sched_forge.cli import main

VARIANTS = ("full", "no_pbt", "no_tune")


def run(out: str, config: str | None, iterations: int, seed: int) -> int:
    common = ["--seed", str(seed)] + (["--config", config] if config else [])
    code = main(["train", *common, "--ablation", "--iterations", str(iterations), "--out", f"{out}/train"])
    if code:
        return code
    args = ["evaluate", *common, "--sequence-length", "256", "--out", f"{out}/eval", "--scheduler", "fcfs"]
    for v in VARIANTS:
        args += ["--scheduler", f"{out}/train/{v}"]
    return main(args)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--config")
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    sys.exit(run(a.out, a.config, a.iterations, a.seed))
