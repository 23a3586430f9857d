"""End-to-end tests of the command line: generate, train, eval, infer,
ablate, and the error-category contract."""

import json

import numpy as np
import pytest

from mvref.cli import main
from mvref.dataset import load_manifest
from mvref.net import load_checkpoint


def _tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["generate", "--seed", "11", "--locations", "3", "--out", str(root),
               "--width", "64", "--height", "32", "--augments", "1",
               "--corruption", "mild"])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def zero_step_ckpt(tmp_path_factory, cli_dataset):
    out = tmp_path_factory.mktemp("cli") / "train0"
    config = out.parent / "config.json"
    config.write_text(json.dumps({
        "model": {"base_width": 2},
        "train": {"total_steps": 0, "batch_locations": 1, "seed": 0},
    }))
    rc = main(["train", "--data", str(cli_dataset), "--config", str(config),
               "--out", str(out)])
    assert rc == 0
    return out / "checkpoint_latest.ckpt"


class TestGenerate:
    def test_manifest_counts_match_directory_scan(self, cli_dataset):
        manifest = load_manifest(cli_dataset)
        loc_dirs = sorted(d for d in cli_dataset.iterdir() if d.is_dir())
        assert len(loc_dirs) == manifest.n_locations == 3
        for d in loc_dirs:
            assert len(list(d.iterdir())) == manifest.views_per_location

    def test_same_seed_byte_identical_trees(self, tmp_path):
        args = ["generate", "--seed", "4", "--locations", "1", "--width", "32",
                "--height", "16", "--augments", "0"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_bad_preset_rejected_by_parser(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--seed", "1", "--locations", "1",
                  "--out", str(tmp_path / "x"), "--corruption", "apocalyptic"])
        assert exc.value.code == 2


class TestTrainCommand:
    def test_writes_checkpoint_and_log(self, cli_dataset, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({
            "model": {"base_width": 2},
            "train": {"total_steps": 2, "batch_locations": 1, "seed": 1},
        }))
        out = tmp_path / "run"
        rc = main(["train", "--data", str(cli_dataset), "--config", str(config),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "checkpoint_latest.ckpt").is_file()
        log = (out / "train_log.txt").read_text().splitlines()
        assert len(log) == 2
        _, _, meta = load_checkpoint(out / "checkpoint_latest.ckpt")
        assert meta["step"] == 2
        assert meta["model_config"]["base_width"] == 2

    def test_malformed_config_is_config_error(self, cli_dataset, tmp_path, capsys):
        config = tmp_path / "broken.json"
        config.write_text("{not json")
        rc = main(["train", "--data", str(cli_dataset), "--config", str(config),
                   "--out", str(tmp_path / "run")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("config-error:")
        assert len(err.strip().splitlines()) == 1


class TestEvalCommand:
    def test_zero_init_reports_refined_equal_input(self, cli_dataset, zero_step_ckpt,
                                                   tmp_path, capsys):
        out = tmp_path / "metrics"
        rc = main(["eval", "--data", str(cli_dataset), "--ckpt", str(zero_step_ckpt),
                   "--split", "test", "--out", str(out)])
        assert rc == 0
        payload = json.loads((out / "metrics_test.json").read_text())
        assert payload["refined"] == payload["input"]
        table = (out / "metrics_test.txt").read_text()
        assert capsys.readouterr().out == table
        lines = table.splitlines()
        assert lines[1].startswith("input")
        assert lines[2].startswith("refined")

    def test_missing_dataset_is_dataset_error(self, zero_step_ckpt, tmp_path, capsys):
        rc = main(["eval", "--data", str(tmp_path / "nope"),
                   "--ckpt", str(zero_step_ckpt)])
        assert rc == 1
        assert capsys.readouterr().err.startswith("dataset-error:")

    def test_missing_checkpoint_is_io_error(self, cli_dataset, tmp_path, capsys):
        rc = main(["eval", "--data", str(cli_dataset),
                   "--ckpt", str(tmp_path / "nope.ckpt")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("io-error:")


class TestInferCommand:
    def test_location_dir_outputs_planes_and_previews(self, cli_dataset,
                                                      zero_step_ckpt, tmp_path):
        out = tmp_path / "infer"
        rc = main(["infer", "--ckpt", str(zero_step_ckpt),
                   "--view", str(cli_dataset / "loc_000002"), "--out", str(out)])
        assert rc == 0
        meta = json.loads((out / "meta.json").read_text())
        assert meta["preview_scale"] > 0
        assert len(meta["views"]) == 8  # 4 canonical + 4 augmented
        for name in meta["views"]:
            plane = np.frombuffer((out / name / "idepth_refined.f32").read_bytes(),
                                  "<f4")
            assert plane.size == 32 * 64
            assert (plane >= 0).all()
            assert (out / name / "preview_refined.png").is_file()
            assert (out / name / "preview_input.png").is_file()

    def test_single_view_dir(self, cli_dataset, zero_step_ckpt, tmp_path):
        out = tmp_path / "one"
        rc = main(["infer", "--ckpt", str(zero_step_ckpt),
                   "--view", str(cli_dataset / "loc_000000" / "view_top"),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "view_top" / "idepth_refined.f32").is_file()

    def test_empty_dir_is_dataset_error(self, zero_step_ckpt, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        rc = main(["infer", "--ckpt", str(zero_step_ckpt),
                   "--view", str(tmp_path / "empty"), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("dataset-error:")


class TestAblateCommand:
    def test_tiny_grid_emits_table(self, cli_dataset, tmp_path, capsys):
        out = tmp_path / "ablation"
        rc = main(["ablate", "--data", str(cli_dataset), "--out", str(out),
                   "--steps", "2", "--seeds", "0", "--variants",
                   "baseline,average+fsr", "--base-width", "2",
                   "--batch-locations", "1", "--val-interval", "2"])
        assert rc == 0
        table = (out / "ablation.txt").read_text()
        lines = table.splitlines()
        assert lines[1].split()[0] == "unrefined"
        assert {l.split()[0] for l in lines[2:]} == {"baseline", "average+fsr"}
        payload = json.loads((out / "ablation.json").read_text())
        assert payload["steps"] == 2
        assert set(payload["runs"]) == {"baseline", "average+fsr"}

    def test_rerun_reuses_finished_runs(self, cli_dataset, tmp_path):
        out = tmp_path / "ablation"
        args = ["ablate", "--data", str(cli_dataset), "--out", str(out),
                "--steps", "2", "--seeds", "0", "--variants", "baseline",
                "--base-width", "2", "--batch-locations", "1",
                "--val-interval", "2"]
        assert main(args) == 0
        marker = (out / "baseline_s0" / "train_log.txt").stat().st_mtime_ns
        assert main(args) == 0  # second call must not retrain
        assert (out / "baseline_s0" / "train_log.txt").stat().st_mtime_ns == marker

    def test_unknown_variant_is_train_error(self, cli_dataset, tmp_path, capsys):
        rc = main(["ablate", "--data", str(cli_dataset), "--out",
                   str(tmp_path / "x"), "--variants", "quantum"])
        assert rc == 1
        assert capsys.readouterr().err.startswith("train-error:")
