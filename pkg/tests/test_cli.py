import csv
import json
import math
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sdplab import cli

TINY = """\
[dataset]
kind = blobs
num_classes = 3
samples_per_class = 40
dim = 6
center_spread = 4.0
[network]
widths = 6, 16, 12, 3
[teacher]
epochs = 15
[prune]
method = {method}
num_prune_steps = 3
fraction_per_step = 0.1
epochs_per_step = 2
[loss]
mode = sdp_kld
[analysis]
k = 3
bins = 32
[run]
seeds = {seeds}
methods = random, mbp
loss_modes = ce, sdp_kld
"""


def write_config(tmp_path, name="c.ini", method="mbp", seeds="0", extra=""):
    p = tmp_path / name
    p.write_text(TINY.format(method=method, seeds=seeds) + extra)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def teacher_dir(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run("train-teacher", "--config", cfg, "--out", out) == 0
    return cfg, out


def test_gen_data_is_deterministic_and_manifest_counts_match(tmp_path):
    cfg = write_config(tmp_path)
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 0
    first = (tmp_path / "d" / "dataset.csv").read_bytes()
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d", "--force") == 0
    assert (tmp_path / "d" / "dataset.csv").read_bytes() == first

    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    lines = first.decode().splitlines()
    label_at = lines[0].split(",").index(manifest["label_column"])
    counted = np.bincount([int(l.split(",")[label_at]) for l in lines[1:]], minlength=3)
    assert manifest["class_counts"] == counted.tolist() == [40, 40, 40]
    assert manifest["rows"] == len(lines) - 1
    assert manifest["seed"] == 0 and manifest["generator"] == "blobs"


def test_gen_data_refuses_non_empty_dir(tmp_path, capsys):
    cfg = write_config(tmp_path)
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "keep.txt").write_text("x")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == cli.EXIT_CONFIG
    assert "--force" in capsys.readouterr().err
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["keep.txt"]


def test_manifest_feeds_train_teacher(tmp_path):
    cfg = write_config(tmp_path)
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 0
    csv_cfg = tmp_path / "csv.ini"
    text = TINY.format(method="mbp", seeds="0").replace(
        "kind = blobs", f"kind = csv\npath = {tmp_path / 'd' / 'manifest.json'}")
    csv_cfg.write_text(text)
    assert run("train-teacher", "--config", csv_cfg, "--out", tmp_path / "t") == 0
    assert (tmp_path / "t" / "teacher.ckpt").exists()


def test_train_teacher_success(teacher_dir, capsys):
    _, out = teacher_dir
    assert (out / "teacher.ckpt").read_text().startswith("SDPLAB-CKPT v1")
    rows = read_rows(out / "teacher_log.csv")
    assert {r["split"] for r in rows} == {"train", "dev"}
    assert all(0 <= float(r["accuracy"]) <= 1 for r in rows)


def test_train_teacher_missing_dataset(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY.format(method="mbp", seeds="0").replace(
        "kind = blobs", f"kind = csv\npath = {tmp_path / 'nope.csv'}"))
    assert run("train-teacher", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_RUNTIME
    assert "DatasetMissingError" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_train_teacher_invalid_config_names_line(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY.format(method="mbp", seeds="0").replace("epochs = 15", "epochs = 15\nepohcs = 3"))
    assert run("train-teacher", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.startswith("ConfigError") and "c.ini:11" in err and "epohcs" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("line,needle", [
    ("widths = 6, 16, 12, 4", "widths"),
    ("method = magic", "magic"),
    ("fraction_per_step = 1.5", "fraction"),
])
def test_invalid_values_are_config_errors(tmp_path, capsys, line, needle):
    key = line.split(" =")[0]
    text = TINY.format(method="mbp", seeds="0")
    text = "\n".join(line if l.startswith(key + " =") else l for l in text.splitlines())
    (tmp_path / "c.ini").write_text(text)
    assert run("train-teacher", "--config", tmp_path / "c.ini", "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_prune_run_needs_teacher(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("prune-run", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "train-teacher" in capsys.readouterr().err


def test_prune_run_is_byte_identical_on_rerun(teacher_dir):
    cfg, out = teacher_dir
    assert run("prune-run", "--config", cfg, "--out", out) == 0
    first = (out / "metrics.csv").read_bytes()
    assert run("prune-run", "--config", cfg, "--out", out) == cli.EXIT_CONFIG  # refuses without --force
    assert run("prune-run", "--config", cfg, "--out", out, "--force") == 0
    assert (out / "metrics.csv").read_bytes() == first
    assert b"\r" not in first
    assert first.decode().splitlines()[0] == ",".join(cli.METRIC_COLUMNS)


def test_random_run_logs_overlap_with_magnitude(tmp_path, teacher_dir):
    _, out = teacher_dir
    cfg = write_config(tmp_path, "r.ini", method="random")
    assert run("prune-run", "--config", cfg, "--out", out) == 0
    post = [r for r in read_rows(out / "metrics.csv") if r["split"] == "post_prune"]
    assert len(post) == 3
    for r in post:
        assert 0.0 <= float(r["overlap_vs_mbp"]) < 1.0
        assert float(r["frob_distortion_total"]) > 0


def test_remaining_fraction_follows_recurrence(teacher_dir):
    cfg, out = teacher_dir
    assert run("prune-run", "--config", cfg, "--out", out) == 0
    rows = read_rows(out / "metrics.csv")
    live = [6 * 16, 16 * 12]
    total = sum(live)
    expect = []
    for _ in range(3):
        live = [n - math.floor(0.1 * n + 1e-9) for n in live]
        expect.append(sum(live) / total)
    got = [float(r["remaining_fraction"]) for r in rows if r["split"] == "step_end"]
    np.testing.assert_allclose(got, expect, rtol=1e-8)
    pre = [float(r["remaining_fraction"]) for r in rows if r["split"] == "pre_prune"]
    np.testing.assert_allclose(pre, [1.0] + expect[:-1], rtol=1e-8)


def test_metrics_rows_layout(teacher_dir):
    cfg, out = teacher_dir
    assert run("prune-run", "--config", cfg, "--out", out) == 0
    rows = read_rows(out / "metrics.csv")
    assert rows[0]["split"] == "baseline" and rows[0]["step"] == "0"
    block = ["train", "dev"] * 2
    splits = [r["split"] for r in rows[1:]]
    assert splits == (block + ["pre_prune", "post_prune"] + block + ["step_end"]
                      + ["pre_prune", "post_prune"] + block + ["step_end", "pre_prune", "post_prune", "step_end"])
    for r in rows:
        assert 0 < float(r["remaining_fraction"]) <= 1
        assert 0 <= float(r["accuracy"]) <= 1
        assert r["run_id"] == "mbp__sdp_kld__seed0"
    ends = [r for r in rows if r["split"] == "step_end"]
    for r in ends:
        for col in ("snr", "mi_knn", "mi_binned_avg", "kde_mi_input", "kde_mi_label", "repr_distance"):
            assert r[col] != ""
    # no training follows the last prune, so it has no recovery measurement
    assert [r["recovery_epochs"] != "" for r in ends] == [True, True, False]
    assert all(int(r["recovery_epochs"]) >= -1 for r in ends[:2])
    assert ends[-1]["accuracy"] == [r for r in rows if r["split"] == "post_prune"][-1]["accuracy"]


def test_crashed_run_leaves_valid_prefix(teacher_dir, monkeypatch):
    cfg, out = teacher_dir
    real = cli.make_analyzer

    def flaky(cfg_, dev):
        inner = real(cfg_, dev)

        def analyze(step, *a):
            if step == 2:
                raise RuntimeError("boom")
            return inner(step, *a)
        return analyze

    monkeypatch.setattr(cli, "make_analyzer", flaky)
    assert run("prune-run", "--config", cfg, "--out", out) == cli.EXIT_RUNTIME
    rows = read_rows(out / "metrics.csv")
    assert [r["split"] for r in rows if r["split"] == "step_end"] == ["step_end"]
    assert all(len(r) == len(cli.METRIC_COLUMNS) and None not in r for r in rows)


def test_seed_override_namespaces_run(teacher_dir):
    cfg, out = teacher_dir
    assert run("prune-run", "--config", cfg, "--out", out) == 0
    base = (out / "metrics.csv").read_bytes()
    assert run("prune-run", "--config", cfg, "--out", out, "--force", "--seed", "5") == 0
    rows = read_rows(out / "metrics.csv")
    assert (out / "metrics.csv").read_bytes() != base
    assert {r["seed"] for r in rows} == {"5"} and rows[0]["run_id"].endswith("seed5")


def test_sweep_grid_and_aggregate(tmp_path):
    cfg = write_config(tmp_path, seeds="0, 1")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s") == 0
    dirs = sorted(p.name for p in (tmp_path / "s" / "runs").iterdir())
    assert len(dirs) == 8
    assert "random__ce__seed0" in dirs and "mbp__sdp_kld__seed1" in dirs
    agg = read_rows(tmp_path / "s" / "aggregate.csv")
    assert sum(r["row_type"] == "cell" for r in agg) == 8
    for m in ("random", "mbp"):
        for mode in ("ce", "sdp_kld"):
            finals = []
            for seed in (0, 1):
                rows = read_rows(tmp_path / "s" / "runs" / f"{m}__{mode}__seed{seed}" / "metrics.csv")
                finals.append(float([r for r in rows if r["split"] == "step_end"][-1]["accuracy"]))
            mean = next(r for r in agg if r["row_type"] == "mean" and r["method"] == m and r["loss_mode"] == mode)
            std = next(r for r in agg if r["row_type"] == "std" and r["method"] == m and r["loss_mode"] == mode)
            assert float(mean["final_accuracy"]) == pytest.approx(sum(finals) / 2, abs=1e-8)
            assert float(std["final_accuracy"]) == pytest.approx(abs(finals[0] - finals[1]) / 2, abs=1e-8)


def test_sweep_serial_and_parallel_agree(tmp_path):
    cfg = write_config(tmp_path, seeds="0, 1")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "a", "--jobs", "1") == 0
    assert run("sweep", "--config", cfg, "--out", tmp_path / "b", "--jobs", "2") == 0
    assert (tmp_path / "a" / "aggregate.csv").read_bytes() == (tmp_path / "b" / "aggregate.csv").read_bytes()
    for d in (tmp_path / "a" / "runs").iterdir():
        assert (d / "metrics.csv").read_bytes() == (tmp_path / "b" / "runs" / d.name / "metrics.csv").read_bytes()


def test_sweep_reports_failed_cells(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path)
    real = cli.run_one

    def sometimes(cfg_, seed, method, mode, *rest):
        if method == "random" and mode == "ce":
            raise RuntimeError("cell exploded")
        return real(cfg_, seed, method, mode, *rest)

    monkeypatch.setattr(cli, "run_one", sometimes)
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s") == cli.EXIT_PARTIAL
    agg = read_rows(tmp_path / "s" / "aggregate.csv")
    bad = [r for r in agg if r["status"] == "failed"]
    assert len(bad) == 1 and "cell exploded" in bad[0]["error"]
    assert "cell exploded" in capsys.readouterr().err
    assert not any(r["row_type"] == "mean" and r["method"] == "random" and r["loss_mode"] == "ce" for r in agg)


@pytest.fixture
def metrics_csv(teacher_dir):
    cfg, out = teacher_dir
    assert run("prune-run", "--config", cfg, "--out", out) == 0
    return out / "metrics.csv"


SVGS = ("accuracy_vs_remaining.svg", "recovery.svg", "mi_snr.svg")


def test_report_writes_three_wellformed_svgs(metrics_csv, tmp_path):
    out = tmp_path / "rep"
    assert run("report", metrics_csv, "--out", out) == 0
    for name in SVGS:
        root = ET.parse(out / name).getroot()
        assert root.tag.endswith("svg")


def test_report_points_parse_back_to_csv_values(metrics_csv, tmp_path):
    out = tmp_path / "rep"
    assert run("report", metrics_csv, "--out", out) == 0
    rows = read_rows(metrics_csv)

    def points(name):
        root = ET.parse(out / name).getroot()
        return [(e.get("data-series"), e.get("data-x"), e.get("data-y"))
                for e in root.iter() if e.get("data-series") is not None]

    acc = points("accuracy_vs_remaining.svg")
    want = [(r["run_id"], r["remaining_fraction"], r["accuracy"]) for r in rows
            if r["split"] in ("baseline", "step_end")]
    assert acc == want
    rec = points("recovery.svg")
    assert rec == [(r["run_id"], r["step"], r["recovery_epochs"]) for r in rows
                   if r["split"] == "step_end" and r["recovery_epochs"] != ""]
    mi = points("mi_snr.svg")
    ends = [r for r in rows if r["split"] in ("baseline", "step_end")]
    assert mi == ([(f"mi_knn {r['run_id']}", r["step"], r["mi_knn"]) for r in ends]
                  + [(f"snr {r['run_id']}", r["step"], r["snr"]) for r in ends])


@pytest.mark.parametrize("content", ["", ",".join(cli.METRIC_COLUMNS) + "\n"])
def test_report_rejects_empty_csv(tmp_path, capsys, content):
    p = tmp_path / "empty.csv"
    p.write_text(content)
    out = tmp_path / "rep"
    assert run("report", p, "--out", out) == cli.EXIT_RUNTIME
    assert "ReportError" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_report_lists_missing_columns(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    cols = [c for c in cli.METRIC_COLUMNS if c not in ("snr", "mi_knn")]
    p.write_text(",".join(cols) + "\n" + ",".join("1" for _ in cols) + "\n")
    assert run("report", p, "--out", tmp_path / "rep") == cli.EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "snr" in err and "mi_knn" in err


def test_fmt_cells():
    assert cli.fmt(None) == ""
    assert cli.fmt(1 / 3) == "0.333333333"
    assert cli.fmt(np.float64(2.0)) == "2"
    assert cli.fmt(7) == "7"


def test_console_script_entry_point(tmp_path):
    cfg = write_config(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "sdplab.cli", "gen-data", "--config", str(cfg),
                           "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "sdplab.cli", "gen-data", "--config", str(tmp_path / "none.ini")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "ConfigError" in proc.stderr
