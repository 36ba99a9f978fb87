"""Command line harness: exit codes, error JSON, and the synth->train->infer
smoke path."""

import hashlib
import json
import os

import pytest

from conftest import toy_config
from slidefocus import cli


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthetic dataset plus a finished training run, shared here."""
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = root / "synth.json"
    synth_cfg.write_text(json.dumps(
        {"noise_grain": 16, "blob_count_range": [2, 2],
         "blob_radius_range": [0.12, 0.2]}))
    cfg_path = root / "cfg.json"
    toy_config(dtype="float32", seed=3, marker_clusters=3,
               max_epochs_global=1, max_epochs_joint=1, patience=1,
               joint_patience=1, batch_size=2).save(cfg_path)
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--seed", "3",
                     "--width", "128", "--height", "128",
                     "--train-per-class", "3", "--test-per-class", "1",
                     "--config", str(synth_cfg), "--marker-textures"]) == 0
    run = root / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(run),
                     "--config", str(cfg_path), "--quiet"]) == 0
    slide_dir = sorted((data / "slides").iterdir())[0]
    return {"root": root, "data": data, "run": run,
            "ckpt": run / "model.ckpt", "cfg": cfg_path,
            "synth_cfg": synth_cfg, "slide": slide_dir}


def test_unknown_command_prints_error_json(capsys):
    code, out, err = run_cli(capsys, "frobnicate")
    assert code == 2
    payload = json.loads(err)
    assert payload["error"] == "usage"


def test_unknown_flag_prints_error_json(capsys):
    code, out, err = run_cli(capsys, "grad-check", "--bogus")
    assert code == 2
    assert json.loads(err)["error"] == "usage"


def test_malformed_config_is_reported(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"no_such_field": 1}')
    code, out, err = run_cli(capsys, "train", "--data", "x", "--out",
                             str(tmp_path / "o"), "--config", str(bad))
    assert code == 1
    assert json.loads(err)["error"] == "config"


def test_synth_same_seed_identical_trees(tmp_path, capsys):
    argv = ["synth", "--seed", "7", "--width", "128", "--height", "128",
            "--train-per-class", "2", "--test-per-class", "1"]
    for out in ("a", "b"):
        code, _, _ = run_cli(capsys, *argv, "--out", str(tmp_path / out))
        assert code == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_train_writes_expected_artifacts(workspace):
    run = workspace["run"]
    for name in ("model.ckpt", "config.json", "history.json", "history.csv"):
        assert (run / name).exists(), name
    header = (run / "history.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["phase", "epoch", "train_loss"]
    assert "val_accuracy" in header


def test_infer_prediction_record_schema(workspace, capsys):
    code, out, err = run_cli(capsys, "infer",
                             "--checkpoint", str(workspace["ckpt"]),
                             "--slide", str(workspace["slide"]))
    assert code == 0, err
    payload = json.loads(out)
    assert payload["count"] == 1
    rec = payload["results"][0]
    for key in ("slide_id", "predicted", "probabilities", "pixels_read",
                "level0_pixels", "pixel_fraction", "seconds",
                "stage_seconds", "rects", "shortfall"):
        assert key in rec, key
    assert abs(sum(rec["probabilities"]) - 1.0) < 1e-3
    assert rec["mode"] == "focused"


def test_eval_reports_accuracy_and_auc(workspace, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    code, out, err = run_cli(capsys, "eval",
                             "--checkpoint", str(workspace["ckpt"]),
                             "--data", str(workspace["data"]),
                             "--split", "test", "--out", str(report_path))
    assert code == 0, err
    summary = json.loads(out)
    assert 0.0 <= summary["accuracy"] <= 1.0
    assert 0.0 <= summary["auc"] <= 1.0
    full = json.loads(report_path.read_text())
    assert len(full["predictions"]) == summary["count"]


def test_focus_map_and_prototype_exports(workspace, tmp_path, capsys):
    fmap = tmp_path / "fmap"
    code, out, err = run_cli(capsys, "focus-map",
                             "--checkpoint", str(workspace["ckpt"]),
                             "--slide", str(workspace["slide"]),
                             "--out", str(fmap))
    assert code == 0, err
    assert (fmap / "focus_heatmap.png").exists()
    assert (fmap / "saliency.png").exists()
    assert json.loads((fmap / "focus_map.json").read_text())["selection"]

    protos = tmp_path / "protos"
    code, out, err = run_cli(capsys, "prototypes",
                             "--checkpoint", str(workspace["ckpt"]),
                             "--slide", str(workspace["slide"]),
                             "--out", str(protos))
    assert code == 0, err
    summary = json.loads(out)
    assert summary["prototypes"] >= 1
    for entry in summary["rasters"]:
        assert (protos / entry["file"]).exists()


def test_mine_markers_writes_report(workspace, tmp_path, capsys):
    out_dir = tmp_path / "mine"
    code, out, err = run_cli(capsys, "mine-markers",
                             "--checkpoint", str(workspace["ckpt"]),
                             "--data", str(workspace["data"]),
                             "--split", "all", "--out", str(out_dir))
    assert code == 0, err
    report = json.loads((out_dir / "markers.json").read_text())
    assert report["corpus_size"] > 0
    assert (out_dir / "markers_projection.png").exists()
    for cluster in report["clusters"]:
        assert cluster["size"] >= 1


def test_train_budget_then_resume_finishes(workspace, tmp_path, capsys):
    out = tmp_path / "resumed"
    code, stdout, err = run_cli(capsys, "train",
                                "--data", str(workspace["data"]),
                                "--out", str(out),
                                "--config", str(workspace["cfg"]),
                                "--quiet", "--epoch-budget", "1")
    assert code == 0, err
    first = json.loads(stdout)
    assert first["phase"] != "done"
    code, stdout, err = run_cli(capsys, "train",
                                "--data", str(workspace["data"]),
                                "--out", str(out), "--resume", "--quiet")
    assert code == 0, err
    second = json.loads(stdout)
    assert second["phase"] == "done"
    assert second["epochs"] > first["epochs"]


def test_missing_checkpoint_is_reported(workspace, capsys):
    code, out, err = run_cli(capsys, "eval", "--checkpoint", "/no/such.ckpt",
                             "--data", str(workspace["data"]))
    assert code == 1
    assert json.loads(err)["error"] == "checkpoint"
