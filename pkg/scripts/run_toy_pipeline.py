#!/usr/bin/env python3
"""End-to-end toy pipeline: synthesize data, train both diffusion models,
sample paired images+masks, and validate the generated dataset.

    python3 scripts/run_toy_pipeline.py --workdir out/pipeline [--iterations 2000]
"""

import argparse
import sys
from pathlib import Path

from defectgen.cli import main as cli

CONFIG = """\
[run]
seed = {seed}
out_root = {work}/runs

[dataset]
root = {work}/data
count = 25
val_count = 50
resolution = 32
n_defect = 2

[schedule]
t = {t}

[train]
iterations = {iterations}

[sampler]
u = {u}
count = {count}
"""


def run(argv):
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="out/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--t", type=int, default=200)
    ap.add_argument("--u", type=int, default=50)
    ap.add_argument("--count", type=int, default=16)
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    cfg = work / "run.ini"
    cfg.write_text(CONFIG.format(work=work, seed=args.seed, t=args.t,
                                 iterations=args.iterations, u=args.u,
                                 count=args.count), encoding="utf-8")
    print(f"config: {cfg}")

    run(["gen-toy", "--config", str(cfg)])
    run(["validate-dataset", str(work / "data")])
    run(["train", "--config", str(cfg), "--model", "large"])
    run(["train", "--config", str(cfg), "--model", "small"])
    run(["sample", "--config", str(cfg)])
    print("pipeline complete; artifacts under", work / "runs")


if __name__ == "__main__":
    main()
