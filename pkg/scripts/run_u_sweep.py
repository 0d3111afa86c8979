#!/usr/bin/env python3
"""Sweep the switch timestep u (and optionally several small-stage presets)
against the FID proxy and diversity, reusing checkpoints trained by
run_toy_pipeline.py.

    python3 scripts/run_u_sweep.py --workdir out/pipeline --u-list 0,10,50,100,200
"""

import argparse
import sys

from defectgen.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="out/pipeline",
                    help="workdir of a previous run_toy_pipeline.py run")
    ap.add_argument("--u-list", default="0,10,50,100,200")
    ap.add_argument("--rf-list", default="small",
                    help="comma-separated small-stage checkpoint names")
    ap.add_argument("--count", type=int, default=64)
    args = ap.parse_args()

    cfg = f"{args.workdir}/run.ini"
    sys.exit(cli(["sweep", "--config", cfg, "--u-list", args.u_list,
                  "--rf-list", args.rf_list, "--count", str(args.count)]))


if __name__ == "__main__":
    main()
