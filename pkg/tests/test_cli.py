import json
from pathlib import Path

import numpy as np
import pytest

from sinodet import cli
from sinodet.io import read_csv_rows, read_manifest, read_volume

MINI_CONFIG = {
    "profile": "tiny",
    "phantom": {"extents": [64, 64, 20], "spacing": [3.0, 3.0, 3.0],
                "n_train": 2, "n_test": 1},
    "geometry": {"n_views": 36, "row_height": 3.0},
    "detector": {"patch_shape": [16, 16, 8]},
    "sampling": {"n_lung": 15, "n_edge": 5, "pos_aug": 3, "margin_mm": 24.0},
    "train": {"stage1": {"samples_per_scan": 4}, "stage2": {"epochs": 2}},
    "eval": {"n_boot": 50, "step_mm": 12.0},
}


def run_chain(run: Path):
    cfg_path = run.parent / "mini.json"
    cfg_path.write_text(json.dumps(MINI_CONFIG))
    steps = [
        ["phantom", "--dir", str(run), "--config", str(cfg_path)],
        ["project", "--dir", str(run)],
        ["fbp", "--dir", str(run)],
        ["train-recon", "--dir", str(run)],
        ["train-detector", "--dir", str(run), "--variant", "reference"],
        ["train-detector", "--dir", str(run), "--variant", "fbp"],
        ["train-detector", "--dir", str(run), "--variant", "two-step"],
        ["finetune", "--dir", str(run)],
        ["evaluate", "--dir", str(run)],
        ["report", "--dir", str(run)],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv


@pytest.fixture(scope="module")
def chain_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("cli") / "run"
    run_chain(run)
    return run


class TestChainOutputs:
    def test_manifest_and_scans(self, chain_run):
        records = read_manifest(chain_run / "manifest.json")
        assert len(records) == 3
        assert sum(r["split"] == "train" for r in records) == 2
        vol = read_volume(chain_run / records[0]["volume"])
        assert vol.unit == "HU"
        assert vol.values.shape == (20, 64, 64)

    def test_checkpoints_exist(self, chain_run):
        names = {p.name for p in (chain_run / "ckpt").iterdir()}
        assert names == {"stage1.ckpt", "stage2_reference.ckpt",
                         "stage2_fbp.ckpt", "stage2_two-step.ckpt",
                         "stage3.ckpt"}

    def test_loss_traces(self, chain_run):
        for name in ("stage1", "stage2_two-step", "stage3"):
            header, rows = read_csv_rows(chain_run / "loss" / f"{name}.csv")
            assert header == ["step", "loss"]
            assert rows and all(np.isfinite(float(r[1])) for r in rows)

    def test_scores_grid_shape(self, chain_run):
        header, rows = read_csv_rows(chain_run / "scores.csv")
        assert header == ["noise", "reference", "fbp", "two-step", "end-to-end"]
        levels = [str(v) for v in MINI_CONFIG["eval"].get(
            "noise_levels", ["none"])]
        assert len(rows) >= 1
        for row in rows:
            for cell in row[1:]:
                assert 0.0 <= float(cell) <= 1.0

    def test_froc_and_detection_files_match_grid(self, chain_run):
        _, rows = read_csv_rows(chain_run / "scores.csv")
        for row in rows:
            noise = row[0]
            for variant in ("reference", "fbp", "two-step", "end-to-end"):
                froc_path = chain_run / "froc" / f"{variant}_{noise}.csv"
                det_path = chain_run / "detect" / f"{variant}_{noise}.csv"
                assert froc_path.exists() and det_path.exists()
                header, _ = read_csv_rows(froc_path)
                assert header == ["fp_per_scan", "sensitivity", "lo95", "hi95"]

    def test_report_svgs(self, chain_run):
        for name in ("froc.svg", "slices.svg"):
            path = chain_run / "report" / name
            assert path.exists()
            assert b"<svg" in path.read_bytes()[:1024]

    def test_config_echoes(self, chain_run):
        for cmd in ("phantom", "project", "fbp", "train-recon",
                    "train-detector", "finetune", "evaluate", "report"):
            assert (chain_run / f"config.{cmd}.json").exists()

    def test_resolved_config_has_no_profile_key(self, chain_run):
        doc = json.loads((chain_run / "config.json").read_text())
        assert "profile" not in doc


class TestExitCodes:
    def test_bad_config_key_is_config_error(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"profile": "tiny", "recon": {"depth": 3}}))
        assert cli.main(["phantom", "--dir", str(tmp_path / "r"),
                         "--config", str(cfg)]) == 2

    def test_unknown_profile_is_config_error(self, tmp_path):
        assert cli.main(["phantom", "--dir", str(tmp_path / "r"),
                         "--profile", "huge"]) == 2

    def test_missing_run_dir_is_data_error(self, tmp_path):
        assert cli.main(["fbp", "--dir", str(tmp_path / "nothing")]) == 3

    def test_detect_before_training_is_data_error(self, tmp_path, chain_run):
        import shutil
        run = tmp_path / "partial"
        run.mkdir()
        shutil.copy(chain_run / "config.json", run / "config.json")
        shutil.copy(chain_run / "manifest.json", run / "manifest.json")
        shutil.copytree(chain_run / "scans", run / "scans")
        shutil.copytree(chain_run / "sino", run / "sino")
        assert cli.main(["detect", "--dir", str(run),
                         "--variant", "two-step"]) == 3


class TestDeterminism:
    def test_phantom_repeat_byte_identical(self, tmp_path, chain_run):
        cfg = tmp_path / "mini.json"
        cfg.write_text(json.dumps(MINI_CONFIG))
        run = tmp_path / "r"
        assert cli.main(["phantom", "--dir", str(run), "--config", str(cfg)]) == 0
        for rec in read_manifest(run / "manifest.json"):
            for key in ("volume", "mask", "annotations"):
                a = (run / rec[key]).read_bytes()
                b = (chain_run / rec[key]).read_bytes()
                assert a == b, rec[key]

    def test_seed_override_changes_phantoms(self, tmp_path, chain_run):
        cfg = tmp_path / "mini.json"
        cfg.write_text(json.dumps(MINI_CONFIG))
        run = tmp_path / "r2"
        assert cli.main(["phantom", "--dir", str(run), "--config", str(cfg),
                         "--seed", "123"]) == 0
        rec = read_manifest(run / "manifest.json")[0]
        assert (run / rec["volume"]).read_bytes() != \
            (chain_run / rec["volume"]).read_bytes()
