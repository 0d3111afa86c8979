#!/usr/bin/env python3
"""Synthetic-augmentation experiment: train the reference segmenter at several
synthetic-to-real ratios (multiple seeds each) and report validation mIoU,
reusing checkpoints trained by run_toy_pipeline.py.

    python3 scripts/run_augment_experiment.py --workdir out/pipeline \\
        --ratios 0,0.5,1.0 --seeds 0,1,2,3,4
"""

import argparse
from pathlib import Path

from defectgen.augment import make_generator, ratio_sweep, write_sweep_csv
from defectgen.config import load_config, parse_float_list, parse_int_list
from defectgen.data import load_dataset
from defectgen.schedule import default_schedule
from defectgen.segmentation import SegConfig
from defectgen.training import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="out/pipeline")
    ap.add_argument("--ratios", default="0,0.5,1.0")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()

    work = Path(args.workdir)
    cfg = load_config(work / "run.ini")
    real = load_dataset(Path(cfg["dataset"]["root"]), cfg["dataset"]["split"])
    val = load_dataset(Path(cfg["dataset"]["root"]), cfg["dataset"]["val_split"])
    models = Path(cfg["run"]["out_root"]) / "models"
    gen = make_generator(load_checkpoint(models / "large.pt"),
                         load_checkpoint(models / "small.pt"),
                         default_schedule(cfg["schedule"]["t"]),
                         real.class_map, u=cfg["sampler"]["u"])

    rows = ratio_sweep(real, parse_float_list(args.ratios),
                       SegConfig(epochs=args.epochs), val, gen,
                       seeds=parse_int_list(args.seeds),
                       work_root=work / "augment_cells")
    raw, summary = work / "augment_raw.csv", work / "augment_summary.csv"
    write_sweep_csv(rows, raw, summary)
    for r in rows:
        print(f"ratio {r['ratio']:<4} mIoU {r['mean_miou']:.4f} "
              f"± {r['stddev']:.4f} over {len(r['per_seed'])} seeds")
    print(f"wrote {raw} and {summary}")


if __name__ == "__main__":
    main()
