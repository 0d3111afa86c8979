"""CLI behavior: exit-code taxonomy, config parsing, and a tiny end-to-end run."""

import csv
import json

import numpy as np
import pytest
from PIL import Image

from defectgen.cli import EXIT_DOMAIN, EXIT_IO, EXIT_OK, main
from defectgen.config import RunConfig, load_config, parse_float_list, parse_int_list
from defectgen.errors import ConfigError

CONFIG_TEMPLATE = """\
[run]
seed = 0
out_root = {out}

[dataset]
root = {data}
count = 6
val_count = 6
resolution = 32
n_defect = 2

[schedule]
t = 20

[train]
iterations = 25
batch_size = 2

[sampler]
u = 10
count = 4

[seg]
epochs = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config + toy data + two trained (tiny) checkpoints, shared by the module."""
    root = tmp_path_factory.mktemp("cliws")
    cfg_path = root / "run.ini"
    cfg_path.write_text(CONFIG_TEMPLATE.format(out=root / "runs", data=root / "data"),
                        encoding="utf-8")
    assert main(["gen-toy", "--config", str(cfg_path)]) == EXIT_OK
    assert main(["train", "--config", str(cfg_path), "--model", "large"]) == EXIT_OK
    assert main(["train", "--config", str(cfg_path), "--model", "small"]) == EXIT_OK
    return root, cfg_path


class TestConfigFile:
    def test_defaults_fill_missing_keys(self, tmp_path):
        p = tmp_path / "min.ini"
        p.write_text("[run]\nseed = 3\n", encoding="utf-8")
        cfg = load_config(p)
        assert cfg.seed == 3
        assert cfg["schedule"]["t"] == 200
        assert cfg["train"]["learning_rate"] == 1e-4

    def test_seed_mandatory(self, tmp_path):
        p = tmp_path / "noseed.ini"
        p.write_text("[dataset]\ncount = 5\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="seed"):
            load_config(p)

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[run]\nseed = 0\n[banana]\nx = 1\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[run]\nseed = 0\nspeed = 9\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_type_error_rejected(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[run]\nseed = 0\n[schedule]\nt = soon\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_hash_stable_and_content_sensitive(self, tmp_path):
        a = RunConfig.defaults(seed=0)
        b = RunConfig.defaults(seed=0)
        c = RunConfig.defaults(seed=1)
        assert a.hash() == b.hash()
        assert a.hash() != c.hash()

    def test_list_parsers(self):
        assert parse_int_list("1, 2,3") == [1, 2, 3]
        assert parse_float_list("0,0.5, 1.0") == [0.0, 0.5, 1.0]
        assert parse_int_list("") == []


class TestExitCodes:
    def test_missing_config_is_io_error(self, tmp_path, capsys):
        assert main(["sample", "--config", str(tmp_path / "nope.ini")]) == EXIT_IO
        assert "config error" in capsys.readouterr().err

    def test_missing_dataset_is_io_error(self, tmp_path, capsys):
        assert main(["validate-dataset", str(tmp_path / "absent")]) == EXIT_IO

    def test_clean_dataset_validates_ok(self, workspace):
        root, _ = workspace
        assert main(["validate-dataset", str(root / "data")]) == EXIT_OK

    def test_corrupt_mask_is_domain_error(self, workspace, tmp_path, capsys):
        root, _ = workspace
        import shutil

        bad = tmp_path / "bad"
        shutil.copytree(root / "data", bad)
        victims = sorted((bad / "train" / "masks").glob("*.png"))
        m = np.asarray(Image.open(victims[0])).copy()
        m[:] = 250  # class index far outside the class map
        Image.fromarray(m.astype(np.uint8)).save(victims[0])
        assert main(["validate-dataset", str(bad)]) == EXIT_DOMAIN
        assert "violation" in capsys.readouterr().out


class TestPipeline:
    def test_models_published_to_stable_paths(self, workspace):
        root, _ = workspace
        assert (root / "runs" / "models" / "large.pt").exists()
        assert (root / "runs" / "models" / "small.pt").exists()

    def test_sample_two_stage_exports_pairs(self, workspace):
        root, cfg = workspace
        assert main(["sample", "--config", str(cfg), "--u", "10", "--count", "3"]) == EXIT_OK
        run = sorted((root / "runs").glob("*-sample"))[-1]
        meta = json.loads((run / "outputs" / "generation_meta.json").read_text())
        assert meta["u"] == 10 and meta["count"] == 3
        assert set(meta["checkpoint_hashes"]) == {"large", "small"}
        assert len(list((run / "outputs" / "synthetic" / "images").glob("*.png"))) == 3
        assert main(["validate-dataset", str(run / "outputs"),
                     "--split", "synthetic"]) == EXIT_OK

    def test_sample_single_model(self, workspace):
        root, cfg = workspace
        assert main(["sample", "--config", str(cfg), "--count", "2",
                     "--single", "small"]) == EXIT_OK

    def test_sample_determinism_across_invocations(self, workspace, capsys):
        _, cfg = workspace
        hashes = []
        for _ in range(2):
            assert main(["sample", "--config", str(cfg), "--count", "2"]) == EXIT_OK
            out = capsys.readouterr().out
            hashes.append(out.split("batch hash ")[1].split(";")[0])
        assert hashes[0] == hashes[1]

    def test_sweep_csv(self, workspace):
        root, cfg = workspace
        assert main(["sweep", "--config", str(cfg), "--u-list", "0,10,20",
                     "--rf-list", "small", "--count", "3"]) == EXIT_OK
        run = sorted((root / "runs").glob("*-sweep"))[-1]
        with (run / "outputs" / "sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["rf_preset"], int(r["u"])) for r in rows] == \
            [("small", 0), ("small", 10), ("small", 20)]
        for r in rows:
            assert float(r["fid"]) >= 0.0 and float(r["diversity"]) >= 0.0

    def test_seg_train_then_eval(self, workspace, capsys):
        root, cfg = workspace
        assert main(["seg-train", "--config", str(cfg)]) == EXIT_OK
        run = sorted((root / "runs").glob("*-seg-train"))[-1]
        model = run / "outputs" / "seg_model.pt"
        assert model.exists()
        capsys.readouterr()
        assert main(["seg-eval", "--config", str(cfg), "--model", str(model)]) == EXIT_OK
        res = json.loads(capsys.readouterr().out)
        assert 0.0 <= res["mean"] <= 1.0

    def test_augment_builds_merged_set(self, workspace, capsys):
        root, cfg = workspace
        assert main(["augment", "--config", str(cfg), "--ratio", "0.5"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "9 samples (3 synthetic)" in out

    def test_run_dirs_record_config(self, workspace):
        root, _ = workspace
        run = sorted((root / "runs").glob("*-sample"))[-1]
        dumped = json.loads((run / "meta" / "config.json").read_text())
        assert dumped["run"]["seed"] == 0


class TestQcSim:
    @pytest.fixture
    def qc_setup(self, tmp_path):
        (tmp_path / "pred").mkdir()
        (tmp_path / "gt").mkdir()
        rng = np.random.default_rng(0)
        for i in range(6):
            for d in ("pred", "gt"):
                m = np.zeros((32, 32), dtype=np.uint8)
                if rng.random() < 0.5:
                    m[:8, :8] = rng.integers(1, 3)
                Image.fromarray(m).save(tmp_path / d / f"s{i:02d}.png")
        (tmp_path / "classmap.json").write_text(
            json.dumps({"0": "background", "1": "cracks", "2": "contamination"}))
        (tmp_path / "pill.rules").write_text("cracks forbidden\ncontamination max_area 50\n")
        return tmp_path

    def test_qc_sim_report(self, qc_setup, capsys):
        t = qc_setup
        report = t / "eval.csv"
        assert main(["qc-sim", "--rules", str(t / "pill.rules"),
                     "--pred-masks", str(t / "pred"), "--gt-masks", str(t / "gt"),
                     "--classmap", str(t / "classmap.json"),
                     "--report", str(report)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "recall=" in out and "fpr=" in out
        with report.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        assert rows[0]["sample_id"] == "s00"

    def test_qc_sim_mismatched_dirs_io_error(self, qc_setup, capsys):
        t = qc_setup
        (t / "pred" / "s00.png").unlink()
        assert main(["qc-sim", "--rules", str(t / "pill.rules"),
                     "--pred-masks", str(t / "pred"), "--gt-masks", str(t / "gt"),
                     "--classmap", str(t / "classmap.json")]) == EXIT_IO

    def test_qc_sim_bad_rules_io_error(self, qc_setup, capsys):
        t = qc_setup
        (t / "pill.rules").write_text("cracks sometimes\n")
        assert main(["qc-sim", "--rules", str(t / "pill.rules"),
                     "--pred-masks", str(t / "pred"), "--gt-masks", str(t / "gt"),
                     "--classmap", str(t / "classmap.json")]) == EXIT_IO
