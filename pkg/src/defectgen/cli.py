"""Operator CLI tying the pipeline together.

Exit codes: 0 success, 1 domain failure (validation/metric), 2 I/O or config
error. Every command writes its outputs under a fresh run directory
runs/<timestamp>-<confighash>/ and never mutates its inputs, except that
`train` also publishes its checkpoint to the stable path
<out_root>/models/<model>.pt so later commands can find it.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import qc as Q
from . import sampling as S
from . import unet as U
from .augment import AugmentPlan, build_augmented, make_generator, ratio_sweep, write_sweep_csv
from .config import RunConfig, load_config, parse_float_list, parse_int_list
from .errors import ConfigError, DatasetError
from .schedule import default_schedule, make_schedule
from .segmentation import SegConfig, eval_seg, train_seg
from .training import TrainConfig, load_checkpoint, save_checkpoint, train, weights_hash

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


def _run_dir(cfg: RunConfig, command: str) -> Path:
    root = Path(cfg["run"]["out_root"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = root / f"{stamp}-{cfg.hash()}-{command}"
    (d / "outputs").mkdir(parents=True, exist_ok=True)
    (d / "meta").mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "meta" / "config.json")
    return d


def _schedule_from(cfg: RunConfig):
    sc = cfg["schedule"]
    if sc["beta_start"] > 0 and sc["beta_end"] > 0:
        return make_schedule(sc["t"], sc["beta_start"], sc["beta_end"])
    return default_schedule(sc["t"])


def _model_config(cfg: RunConfig, which: str, n_total: int):
    sec = cfg["model_large"] if which == "large" else cfg["model_small"]
    preset = U.PRESETS[sec["preset"]]
    return preset(n_total, cfg["dataset"]["resolution"], channel_scale=sec["channel_scale"])


def _model_path(cfg: RunConfig, model_name: str) -> Path:
    return Path(cfg["run"]["out_root"]) / "models" / f"{model_name}.pt"


def _load_train_manifest(cfg: RunConfig) -> D.DatasetManifest:
    return D.load_dataset(Path(cfg["dataset"]["root"]), cfg["dataset"]["split"])


def cmd_validate_dataset(args) -> int:
    try:
        manifest = D.load_dataset(Path(args.root), args.split)
        samples = manifest.load_all()
    except (DatasetError, FileNotFoundError) as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return EXIT_IO
    dirty = 0
    for s in samples:
        rep = D.validate_sample(s, manifest.class_map)
        for v in rep.violations:
            print(f"{s.sample_id}: {v}", file=sys.stderr)
        dirty += not rep.ok
    print(f"checked {len(samples)} samples, {dirty} with violations")
    return EXIT_OK if dirty == 0 else EXIT_DOMAIN


def cmd_gen_toy(args) -> int:
    cfg = load_config(args.config)
    ds = cfg["dataset"]
    kinds = tuple(k for k in ds["defect_kinds"].split(",") if k)
    root = Path(ds["root"])
    for split, count, seed in ((ds["split"], ds["count"], cfg.seed),
                               (ds["val_split"], ds["val_count"], cfg.seed + 1)):
        spec = D.ToySpec(count=count, h=ds["resolution"], w=ds["resolution"],
                         n_defect=ds["n_defect"], defect_kinds=kinds, seed=seed)
        manifest = D.synth_toy_dataset(spec, root, split=split)
        print(f"wrote {len(manifest)} samples to {root}/{split}")
    run_dir = _run_dir(cfg, "gen-toy")
    (run_dir / "meta" / "dataset.json").write_text(
        json.dumps({"root": str(root), "config_hash": cfg.hash()}), encoding="utf-8")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = _load_train_manifest(cfg)
    mc = _model_config(cfg, "large" if args.model == "large" else "small", manifest.class_map.n_total)
    if args.model != "large":
        # allow `--model medium` to override the small-stage preset
        mc = U.PRESETS[args.model](manifest.class_map.n_total, cfg["dataset"]["resolution"],
                                   channel_scale=cfg["model_small"]["channel_scale"])
    tr = cfg["train"]
    tc = TrainConfig(learning_rate=tr["learning_rate"], batch_size=tr["batch_size"],
                     iterations=tr["iterations"], weight_decay=tr["weight_decay"],
                     seed=cfg.seed, checkpoint_every=tr["checkpoint_every"],
                     T=cfg["schedule"]["t"])
    run_dir = _run_dir(cfg, f"train-{args.model}")
    ckpt = train(mc, manifest, tc, out_dir=run_dir / "outputs",
                 log_every=max(tr["iterations"] // 10, 1))
    stable = _model_path(cfg, args.model)
    save_checkpoint(ckpt, stable)
    print(f"trained {args.model}: weights hash {weights_hash(ckpt.state_dict)} -> {stable}")
    return EXIT_OK


def _load_models(cfg: RunConfig):
    large = load_checkpoint(_model_path(cfg, "large"))
    small_name = cfg["model_small"]["preset"]
    small = load_checkpoint(_model_path(cfg, small_name))
    return large, small


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    manifest = _load_train_manifest(cfg)
    s = _schedule_from(cfg)
    u = args.u if args.u is not None else cfg["sampler"]["u"]
    count = args.count or cfg["sampler"]["count"]
    scfg = S.SamplerConfig(T=s.T, u=u, batch=count, seed=cfg.seed)
    run_dir = _run_dir(cfg, "sample")

    if args.single:
        ckpt = load_checkpoint(_model_path(cfg, args.single))
        batch = S.sample_single(ckpt.build_model(), s, scfg)
        ckpt_hashes = {args.single: weights_hash(ckpt.state_dict)}
    else:
        large, small = _load_models(cfg)
        batch = S.sample_two_stage(large.build_model(), small.build_model(), s, scfg)
        ckpt_hashes = {"large": weights_hash(large.state_dict),
                       "small": weights_hash(small.state_dict)}
    meta = {"u": u, "T": s.T, "seed": cfg.seed, "count": count,
            "checkpoint_hashes": ckpt_hashes, "batch_hash": S.batch_hash(batch),
            "config_hash": cfg.hash()}
    S.export_pairs(batch, manifest.class_map, run_dir / "outputs", meta=meta)
    print(f"batch hash {meta['batch_hash']}; exported {count} pairs to {run_dir}/outputs")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    manifest = _load_train_manifest(cfg)
    s = _schedule_from(cfg)
    u_list = parse_int_list(args.u_list)
    rf_list = [r.strip() for r in args.rf_list.split(",") if r.strip()]
    count = args.count or cfg["sampler"]["count"]
    extractor = M.FeatureExtractor(seed=cfg["metrics"]["extractor_seed"])
    real_images = [smp.image for smp in manifest.load_all()]
    run_dir = _run_dir(cfg, "sweep")

    large = load_checkpoint(_model_path(cfg, "large")).build_model()
    rows = []
    for rf_name in rf_list:
        small = load_checkpoint(_model_path(cfg, rf_name)).build_model()
        scfg = S.SamplerConfig(T=s.T, u=0, batch=count, seed=cfg.seed)
        sweep = S.sample_u_sweep(large, small, s, scfg, u_list)
        for u in u_list:
            gen_images = [x[..., :3] for x in np.clip(sweep[u], -1, 1)]
            rows.append({"rf_preset": rf_name, "u": u,
                         "fid": M.fid(gen_images, real_images, extractor),
                         "diversity": M.diversity(gen_images, extractor)})
            print(f"rf={rf_name} u={u} fid={rows[-1]['fid']:.4f} "
                  f"diversity={rows[-1]['diversity']:.4f}")
    out = run_dir / "outputs" / "sweep.csv"
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rf_preset", "u", "fid", "diversity"])
        for r in rows:
            w.writerow([r["rf_preset"], r["u"], f"{r['fid']:.6f}", f"{r['diversity']:.6f}"])
    print(f"wrote {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = load_config(args.config)
    manifest = _load_train_manifest(cfg)
    s = _schedule_from(cfg)
    ratio = args.ratio if args.ratio is not None else cfg["augment"]["ratio"]
    large, small = _load_models(cfg)
    gen = make_generator(large, small, s, manifest.class_map, u=cfg["sampler"]["u"])
    run_dir = _run_dir(cfg, "augment")
    merged = build_augmented(manifest, AugmentPlan(ratio=ratio, seed=cfg.seed),
                             gen, run_dir / "outputs")
    n_syn = sum(1 for v in merged.provenance.values() if v == "synthetic")
    print(f"augmented set: {len(merged)} samples ({n_syn} synthetic) at {merged.root}")
    return EXIT_OK


def cmd_seg_train(args) -> int:
    cfg = load_config(args.config)
    root = Path(args.data_root) if args.data_root else Path(cfg["dataset"]["root"])
    split = args.split or cfg["dataset"]["split"]
    manifest = D.load_dataset(root, split)
    sg = cfg["seg"]
    model = train_seg(manifest, SegConfig(epochs=sg["epochs"], learning_rate=sg["learning_rate"],
                                          batch_size=sg["batch_size"], seed=cfg.seed,
                                          backbone=sg["backbone"]))
    run_dir = _run_dir(cfg, "seg-train")
    import torch

    out = run_dir / "outputs" / "seg_model.pt"
    torch.save({"state_dict": model.net.state_dict(), "n_classes": model.n_classes,
                "backbone": sg["backbone"], "loss_history": model.loss_history}, out)
    print(f"seg model: weights hash {model.weights_hash()}, "
          f"loss {model.loss_history[0]:.4f} -> {model.loss_history[-1]:.4f}, saved {out}")
    return EXIT_OK


def cmd_seg_eval(args) -> int:
    cfg = load_config(args.config)
    import torch

    from .segmentation import SEG_BACKBONES, SegModel

    blob = torch.load(Path(args.model), weights_only=False)
    net = SEG_BACKBONES[blob["backbone"]](blob["n_classes"])
    net.load_state_dict(blob["state_dict"])
    model = SegModel(net=net, n_classes=blob["n_classes"], loss_history=blob["loss_history"])
    root = Path(args.data_root) if args.data_root else Path(cfg["dataset"]["root"])
    split = args.split or cfg["dataset"]["val_split"]
    res = eval_seg(model, D.load_dataset(root, split))
    print(json.dumps(res, indent=1, sort_keys=True))
    return EXIT_OK


def _read_mask_dir(path: Path):
    import numpy as np
    from PIL import Image

    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise DatasetError(f"no mask files in {path}")
    return [np.asarray(Image.open(p), dtype=np.int64) for p in files], [p.stem for p in files]


def cmd_qc_sim(args) -> int:
    try:
        preds, ids = _read_mask_dir(args.pred_masks)
        gts, gids = _read_mask_dir(args.gt_masks)
        if ids != gids:
            raise DatasetError("pred/gt mask directories list different sample ids")
        class_map = D.ClassMap.from_dict(
            json.loads(Path(args.classmap).read_text(encoding="utf-8")))
        ruleset = Q.parse_rules(Path(args.rules), unlisted_policy=args.unlisted_policy)
    except (DatasetError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    result = Q.evaluate(preds, gts, ruleset, class_map)
    if args.report:
        Q.write_evaluation_csv(result, args.report, sample_ids=ids)
    conf = result["confusion"]
    rec = "absent" if result["recall"] is None else f"{result['recall']:.4f}"
    fpr = "absent" if result["fpr"] is None else f"{result['fpr']:.4f}"
    print(f"recall={rec} fpr={fpr} TP={conf['TP']} FP={conf['FP']} "
          f"TN={conf['TN']} FN={conf['FN']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defectgen")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("validate-dataset")
    sp.add_argument("root")
    sp.add_argument("--split", default="train")
    sp.set_defaults(fn=cmd_validate_dataset)

    for name, fn in (("gen-toy", cmd_gen_toy),):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("train")
    sp.add_argument("--config", required=True)
    sp.add_argument("--model", choices=["large", "medium", "small"], required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample")
    sp.add_argument("--config", required=True)
    sp.add_argument("--u", type=int, default=None)
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--single", choices=["large", "medium", "small"], default=None,
                    help="single-model sampling with the named checkpoint")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("sweep")
    sp.add_argument("--config", required=True)
    sp.add_argument("--u-list", required=True)
    sp.add_argument("--rf-list", required=True)
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=1)  # cells run serially; kept for interface parity
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("augment")
    sp.add_argument("--config", required=True)
    sp.add_argument("--ratio", type=float, default=None)
    sp.set_defaults(fn=cmd_augment)

    sp = sub.add_parser("seg-train")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data-root", default=None)
    sp.add_argument("--split", default=None)
    sp.set_defaults(fn=cmd_seg_train)

    sp = sub.add_parser("seg-eval")
    sp.add_argument("--config", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data-root", default=None)
    sp.add_argument("--split", default=None)
    sp.set_defaults(fn=cmd_seg_eval)

    sp = sub.add_parser("qc-sim")
    sp.add_argument("--rules", required=True)
    sp.add_argument("--pred-masks", required=True)
    sp.add_argument("--gt-masks", required=True)
    sp.add_argument("--classmap", required=True)
    sp.add_argument("--unlisted-policy", choices=["forbidden", "ignored"], default="forbidden")
    sp.add_argument("--report", default=None)
    sp.set_defaults(fn=cmd_qc_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_IO
    except DatasetError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
