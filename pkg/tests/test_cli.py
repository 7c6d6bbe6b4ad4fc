import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dgc import cli
from dgc.data_io import GroundTruthMask, load_mask, save_mask
from dgc.trainer import metric_header, read_metrics

TINY = ["--k", "3", "--patch_size", "8", "--batch", "2", "--embed_dim", "4", "--kernel_size", "3",
        "--strides", "1,1,1", "--reuse", "4"]


def synth(out, *extra):
    return cli.run(["synth", "--out", str(out), "--cubes", "3", "--size", "24", "--bands", "12", *extra])


def _metric_columns(path):
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in read_metrics(path)]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert synth(root / "ds", "--seed", "3") == 0
    assert cli.run(["train", "--dataset", str(root / "ds"), "--out", str(root / "run"), *TINY,
                    "--steps", "6", "--snapshot_interval", "2"]) == 0
    return root


# ------------------------------------------------------------------------ synth

def test_synth_writes_manifest_and_is_deterministic(tmp_path):
    assert synth(tmp_path / "a") == 0 and synth(tmp_path / "b") == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["items"]) == 3
    for a in sorted((tmp_path / "a").iterdir()):
        assert a.read_bytes() == (tmp_path / "b" / a.name).read_bytes()


@pytest.mark.parametrize("bad", [["--cubes", "0"], ["--classes", "1"], ["--noise", "-1"]])
def test_synth_rejects_bad_values(tmp_path, bad):
    assert synth(tmp_path, *bad) == cli.EXIT_CONFIG


# ------------------------------------------------------------------------ train

def test_train_zero_steps(pipeline, tmp_path):
    assert cli.run(["train", "--dataset", str(pipeline / "ds"), "--out", str(tmp_path), *TINY,
                    "--steps", "0"]) == 0
    assert (tmp_path / "final.dgck").exists()
    assert read_metrics(tmp_path / "metrics.csv") == []


def test_train_csv_rows_and_schema(pipeline):
    rows = read_metrics(pipeline / "run" / "metrics.csv")
    assert len(rows) == 6
    assert list(rows[0]) == metric_header(3)
    assert {"step", "comp1", "comp2", "unif", "orth", "bal", "cons", "total", "active_clusters"} <= set(rows[0])


def test_async_csv_matches_sync(pipeline, tmp_path):
    args = ["train", "--dataset", str(pipeline / "ds"), *TINY, "--steps", "6", "--reuse", "2"]
    assert cli.run([*args, "--out", str(tmp_path / "s")]) == 0
    assert cli.run([*args, "--out", str(tmp_path / "a"), "--mode", "async"]) == 0
    assert _metric_columns(tmp_path / "s" / "metrics.csv") == _metric_columns(tmp_path / "a" / "metrics.csv")


def test_train_resume_continues_the_log(pipeline, tmp_path):
    base = ["train", "--dataset", str(pipeline / "ds"), "--out", str(tmp_path), *TINY]
    assert cli.run([*base, "--steps", "3"]) == 0
    assert cli.run([*base, "--steps", "5", "--resume", str(tmp_path / "final.dgck")]) == 0
    assert [int(r["step"]) for r in read_metrics(tmp_path / "metrics.csv")] == [1, 2, 3, 4, 5]


def test_resume_with_other_model_config_is_a_config_error(pipeline, tmp_path):
    code = cli.run(["train", "--dataset", str(pipeline / "ds"), "--out", str(tmp_path), *TINY, "--lr", "0.5",
                    "--resume", str(pipeline / "run" / "final.dgck")])
    assert code == cli.EXIT_CONFIG


def test_config_file_and_override(pipeline, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 1  # shared\n[train]\nsteps = 2\nk = 3\npatch_size = 8\nbatch = 2\nembed_dim = 4\n"
                   "kernel_size = 3\nstrides = 1 1 1\nreuse = 4\n")
    assert cli.run(["train", "--config", str(cfg), "--dataset", str(pipeline / "ds"),
                    "--out", str(tmp_path / "o"), "--steps", "3"]) == 0
    assert len(read_metrics(tmp_path / "o" / "metrics.csv")) == 3


@pytest.mark.parametrize("text", ["[train]\nwarmup = 3\n", "[bogus]\nk = 2\n", "stepz = 1\n"])
def test_unknown_config_entries_rejected(pipeline, tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    code = cli.run(["train", "--config", str(cfg), "--dataset", str(pipeline / "ds"), "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG


def test_unknown_flag_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.run(["train", "--out", str(tmp_path), "--warmup", "3"])
    assert exc.value.code == 2


def test_missing_dataset_is_io_error(tmp_path):
    code = cli.run(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path), *TINY, "--bands", "12"])
    assert code == cli.EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exit_code(pipeline, tmp_path):
    code = cli.run(["train", "--dataset", str(pipeline / "ds"), "--out", str(tmp_path), *TINY,
                    "--steps", "4", "--lr", "1e300", "--max_aborted", "1"])
    assert code == cli.EXIT_NUMERICAL


# ---------------------------------------------------------------------- segment

def test_segment_outputs_are_deterministic(pipeline, tmp_path):
    args = ["segment", "--checkpoint", str(pipeline / "run" / "final.dgck"), "--input", str(pipeline / "ds")]
    assert cli.run([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.run([*args, "--out", str(tmp_path / "b")]) == 0
    maps = sorted((tmp_path / "a").glob("*.hsim"))
    assert len(maps) == 3
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    labels = load_mask(maps[0]).labels
    assert labels.shape == (24, 24) and labels.max() < 3
    assert (tmp_path / "a" / f"{maps[0].stem}.clusters.ppm").read_bytes().startswith(b"P6\n24 24\n255\n")


def test_segment_band_mismatch_is_io_error(pipeline, tmp_path):
    assert cli.run(["synth", "--out", str(tmp_path / "wide"), "--cubes", "1", "--size", "16", "--bands", "14"]) == 0
    code = cli.run(["segment", "--checkpoint", str(pipeline / "run" / "final.dgck"),
                    "--input", str(tmp_path / "wide"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_IO


# ------------------------------------------------------------------ eval, merge

def test_eval_masks_against_themselves(pipeline, tmp_path, capsys):
    maps = sorted(str(p) for p in (pipeline / "ds").glob("*.hsim"))
    assert cli.run(["eval", "--maps", ",".join(maps), "--masks", str(pipeline / "ds"),
                    "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "aggregate: IoU 1.000 (class 0), 1.000 (class 1); mean 1.000" in out
    rows = list(csv.DictReader(open(tmp_path / "iou.csv")))
    assert rows[-1]["map"] == "aggregate" and float(rows[-1]["mean_iou"]) == 1.0
    assert len(rows) == 4


def test_eval_auto_merge_saves_spec(pipeline, tmp_path):
    segs = tmp_path / "seg"
    assert cli.run(["segment", "--checkpoint", str(pipeline / "run" / "final.dgck"), "--input", str(pipeline / "ds"),
                    "--out", str(segs)]) == 0
    spec = tmp_path / "merge" / "m.txt"
    assert cli.run(["eval", "--maps", str(segs), "--masks", str(pipeline / "ds"), "--auto_merge",
                    "--save_merge", str(spec), "--out", str(tmp_path / "e")]) == 0
    assert spec.exists()
    # replaying the saved merge reproduces the scores
    assert cli.run(["eval", "--maps", str(segs), "--masks", str(pipeline / "ds"), "--merge", str(spec),
                    "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "e" / "iou.csv").read_bytes() == (tmp_path / "f" / "iou.csv").read_bytes()


def test_eval_rejects_both_merge_sources(pipeline, tmp_path):
    spec = tmp_path / "m.txt"
    spec.write_text("0 = 0\n1 = 1\n")
    maps = ",".join(sorted(str(p) for p in (pipeline / "ds").glob("*.hsim")))
    code = cli.run(["eval", "--maps", maps, "--masks", str(pipeline / "ds"), "--merge", str(spec),
                    "--auto_merge", "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG


def test_merge_identity_and_collapse(tmp_path):
    labels = np.array([[0, 1, 2], [2, 1, 0]], dtype=np.uint8)
    save_mask(GroundTruthMask(labels), tmp_path / "map.hsim")
    (tmp_path / "id.txt").write_text("0 = 0\n1 = 1\n2 = 2\n")
    (tmp_path / "zero.txt").write_text("0 = 0\n1 = 0\n2 = 0\n")
    (tmp_path / "short.txt").write_text("0 = 0\n1 = 0\n")
    base = ["merge", "--map", str(tmp_path / "map.hsim")]
    assert cli.run([*base, "--spec", str(tmp_path / "id.txt"), "--out", str(tmp_path / "a.hsim")]) == 0
    assert np.array_equal(load_mask(tmp_path / "a.hsim").labels, labels)
    assert cli.run([*base, "--spec", str(tmp_path / "zero.txt"), "--out", str(tmp_path / "b.hsim")]) == 0
    assert not load_mask(tmp_path / "b.hsim").labels.any()
    assert cli.run([*base, "--spec", str(tmp_path / "short.txt"), "--out", str(tmp_path / "c.hsim")]) == 2


# --------------------------------------------------------------------- diagnose

def test_diagnose_writes_timeline(pipeline, tmp_path, capsys):
    out = tmp_path / "timeline.csv"
    assert cli.run(["diagnose", "--run", str(pipeline / "run"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert tuple(rows[0]) == cli.TIMELINE_COLUMNS
    assert [int(r["snapshot"]) for r in rows] == [0, 2, 4, 6]
    assert rows[0]["phase"] == "" and rows[0]["mi_prev"] == ""
    assert all(r["phase"] in ("inactive", "ignite", "afterglow", "smoldering", "aftermath") for r in rows[1:])
    assert capsys.readouterr().out.startswith("ignite: ")


def test_diagnose_collapsed_run_is_inactive(tmp_path, capsys):
    with open(tmp_path / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metric_header(3))
        w.writerow(["1"] + ["0"] * 7 + ["1", "1", "0", "0", "1.0"])
    (tmp_path / "snapshots").mkdir()
    for step in (0, 10, 20):
        save_mask(GroundTruthMask(np.zeros((8, 8), np.uint8)), tmp_path / "snapshots" / f"step_{step:07d}.hsim")
    assert cli.run(["diagnose", "--run", str(tmp_path), "--out", str(tmp_path / "t.csv")]) == 0
    phases = [r["phase"] for r in csv.DictReader(open(tmp_path / "t.csv"))]
    assert phases == ["", "inactive", "inactive"]
    assert "ignite: none" in capsys.readouterr().out


def test_diagnose_needs_two_snapshots(tmp_path):
    (tmp_path / "metrics.csv").write_text(",".join(metric_header(2)) + "\n")
    assert cli.run(["diagnose", "--run", str(tmp_path), "--out", str(tmp_path / "t.csv")]) == cli.EXIT_IO


# ------------------------------------------------------------------------- help

@pytest.mark.parametrize("command", cli.COMMANDS)
def test_help_lists_every_schema_key(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.run([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for name in cli.keys_for(command):
        assert f"--{name}" in text


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dgc.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("dgc ")
