"""Synthetic-data augmentation: merge generated pairs with real data at a
controlled synthetic-to-real ratio and sweep the ratio against segmentation
mIoU on a held-out real validation split."""

from __future__ import annotations

import csv
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, DefectSample, export_dataset, validate_sample
from .errors import ConfigError
from .sampling import SamplerConfig, decode_batch, sample_two_stage
from .segmentation import SegConfig, eval_seg, train_seg

MAX_OVERSAMPLE = 10  # resampling budget for all-background generations


@dataclass(frozen=True)
class AugmentPlan:
    ratio: float  # synthetic count = round-half-up(ratio * |real|)
    seed: int = 0
    filter_valid: bool = True
    reject_empty_masks: bool = True

    def __post_init__(self):
        if self.ratio < 0:
            raise ConfigError("ratio must be >= 0")

    def synthetic_count(self, n_real: int) -> int:
        return int(np.floor(self.ratio * n_real + 0.5))


def make_generator(large_ckpt, small_ckpt, s, class_map, u: int, sample_batch: int = 16):
    """Close over two trained checkpoints; returns generate(count, seed) -> samples."""
    large = large_ckpt.build_model()
    small = small_ckpt.build_model()
    if large.config.in_channels != class_map.n_total:
        raise ConfigError(f"checkpoint channels {large.config.in_channels} do not match "
                          f"class map n_total {class_map.n_total}")

    def generate(count: int, seed: int) -> list[DefectSample]:
        cfg = SamplerConfig(T=s.T, u=u, batch=count, seed=seed)
        batch = sample_two_stage(large, small, s, cfg)
        return decode_batch(batch, class_map, prefix=f"syn{seed}")

    return generate


def build_augmented(real: DatasetManifest, plan: AugmentPlan, generator,
                    out_root: Path, split: str = "train") -> DatasetManifest:
    """All real samples plus exactly round(ratio * |real|) synthetic ones.

    Synthetic pairs decoding to an all-background mask teach the segmenter
    nothing about defects, so they are rejected and resampled, up to a 10x
    oversampling budget.
    """
    need = plan.synthetic_count(len(real))
    synthetic: list[DefectSample] = []
    attempt = 0
    while len(synthetic) < need:
        if attempt >= MAX_OVERSAMPLE:
            raise ConfigError(
                f"could not draw {need} usable synthetic samples within "
                f"{MAX_OVERSAMPLE}x oversampling (got {len(synthetic)})")
        got = generator(need - len(synthetic), plan.seed + attempt)
        for s in got:
            if plan.reject_empty_masks and s.mask.max() == 0:
                continue
            if plan.filter_valid and not validate_sample(s, real.class_map).ok:
                continue
            synthetic.append(s)
        attempt += 1
    synthetic = synthetic[:need]
    for i, s in enumerate(synthetic):
        s.sample_id = f"synthetic_{i:04d}"

    out_root = Path(out_root)
    real_samples = real.load_all()
    provenance = {s.sample_id: "real" for s in real_samples}
    provenance.update({s.sample_id: "synthetic" for s in synthetic})
    return export_dataset(real.class_map, real_samples + synthetic, out_root,
                          split=split, provenance=provenance)


def ratio_sweep(real: DatasetManifest, ratios, seg_cfg: SegConfig,
                val: DatasetManifest, generator, seeds, work_root: Path) -> list[dict]:
    """Train/eval the reference segmenter per (ratio, seed) cell.

    Validation is always the real split passed in; synthetic data never enters
    evaluation. Returns rows sorted by ratio with per-seed values retained.
    """
    if not ratios or not seeds:
        raise ConfigError("need at least one ratio and one seed")
    work_root = Path(work_root)
    rows = []
    for ratio in sorted(ratios):
        per_seed = []
        for seed in seeds:
            cell_dir = work_root / f"ratio_{ratio}_seed_{seed}"
            if cell_dir.exists():
                shutil.rmtree(cell_dir)
            plan = AugmentPlan(ratio=ratio, seed=seed)
            merged = build_augmented(real, plan, generator, cell_dir)
            cfg = SegConfig(epochs=seg_cfg.epochs, learning_rate=seg_cfg.learning_rate,
                            batch_size=seg_cfg.batch_size, seed=seed,
                            backbone=seg_cfg.backbone,
                            class_weighting=seg_cfg.class_weighting)
            model = train_seg(merged, cfg)
            res = eval_seg(model, val)
            per_seed.append({"seed": seed, "miou": res["mean"]})
        vals = [r["miou"] for r in per_seed]
        rows.append({"ratio": ratio, "mean_miou": float(np.mean(vals)),
                     "stddev": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                     "per_seed": per_seed})
    return rows


def write_sweep_csv(rows: list[dict], raw_path: Path, summary_path: Path) -> None:
    with Path(raw_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "seed", "miou"])
        for row in rows:
            for rec in row["per_seed"]:
                w.writerow([row["ratio"], rec["seed"], f"{rec['miou']:.6f}"])
    with Path(summary_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "mean", "stddev"])
        for row in rows:
            w.writerow([row["ratio"], f"{row['mean_miou']:.6f}", f"{row['stddev']:.6f}"])
