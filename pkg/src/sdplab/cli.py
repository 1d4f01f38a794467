"""Command-line entry point: data generation, teacher training, prune runs, sweeps and reports."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis as A
from . import report
from .config import ExperimentConfig, load_config
from .dataset import LabeledDataset, gen_gaussian_blobs, gen_two_spirals, load_csv, save_csv, split
from .errors import ConfigError, DatasetMissingError, ReportError, SdpLabError
from .network import forward, init_network, load_checkpoint, save_checkpoint
from .trainer import EpochRecord, RunRecord, StepRecord, evaluate, iterative_prune, train_teacher
from .tensor_core import Rng

log = logging.getLogger("sdplab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4

METRIC_COLUMNS = (
    "run_id", "seed", "method", "loss_mode", "step", "remaining_fraction", "epoch", "split", "accuracy",
    "loss_total", "loss_ce", "loss_kld", "loss_cc", "snr", "mi_knn", "mi_binned_avg", "kde_mi_input",
    "kde_mi_label", "overlap_vs_mbp", "frob_distortion_total", "repr_distance", "recovery_epochs",
)
AGGREGATE_COLUMNS = ("row_type", "method", "loss_mode", "seed", "status", "final_accuracy",
                     "remaining_fraction", "median_recovery", "mi_knn", "snr", "error")
UNRECOVERED = -1


def fmt(value) -> str:
    """CSV cell: 9 significant digits for floats, blank for missing values."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


class MetricsWriter:
    """Append-only MetricsRow CSV; ``flush`` is called at step boundaries."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(METRIC_COLUMNS)

    def row(self, **cells):
        unknown = set(cells) - set(METRIC_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        self.writer.writerow([fmt(cells.get(c)) for c in METRIC_COLUMNS])

    def flush(self):
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self):
        self.fh.close()


# --------------------------------------------------------------------- data

def _read_manifest(path: Path) -> tuple[Path, dict]:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return path.parent / manifest["csv"], manifest


def acquire_dataset(cfg: ExperimentConfig, seed: int) -> LabeledDataset:
    d = cfg.dataset
    if d["kind"] == "csv":
        path = Path(d["path"])
        if not path.exists():
            raise DatasetMissingError(f"no such dataset file: {path}")
        label_column = d["label_column"]
        if path.suffix == ".json":
            path, manifest = _read_manifest(path)
            label_column = manifest.get("label_column", label_column)
        ds = load_csv(path, label_column)
        if (ds.dim, ds.num_classes) != (cfg.widths[0], cfg.widths[-1]):
            raise ConfigError(f"network widths {cfg.widths} do not fit dataset with dim {ds.dim} "
                              f"and {ds.num_classes} classes")
        return ds
    rng = Rng(seed).child("data")
    if d["kind"] == "blobs":
        return gen_gaussian_blobs(rng, d["num_classes"], d["samples_per_class"], d["dim"],
                                  d["center_spread"], d["cluster_std"])
    return gen_two_spirals(rng, d["samples_per_class"], d["noise_std"])


def splits_for(cfg: ExperimentConfig, seed: int):
    from dataclasses import replace
    return split(acquire_dataset(cfg, seed), replace(cfg.split, seed=seed))


# --------------------------------------------------------------------- analysis

def make_analyzer(cfg: ExperimentConfig, dev: LabeledDataset):
    """Representation metrics of the student on the dev split, compared with the teacher."""
    if not cfg.analysis_enabled:
        return None
    cache = {}

    def analyze(step, student, teacher, gates):
        if "teacher" not in cache:
            cache["teacher"] = forward(teacher, dev.inputs).penultimate
        z_t = cache["teacher"]
        z_s = forward(student, dev.inputs, gates).penultimate
        groups = A.group_by_class(z_s, dev.labels, dev.num_classes)
        return {
            "snr": A.snr(groups, use_sqrt=cfg.snr_sqrt),
            "mi_knn": A.mi_knn(z_s, z_t, cfg.mi),
            "mi_binned_avg": A.mi_binned_multivariate(z_s, z_t, cfg.mi),
            "kde_mi_input": A.kde_mi_input_bound(z_s, cfg.kde_sigma2),
            "kde_mi_label": A.kde_mi_label_bound(z_s, dev.labels, cfg.kde_sigma2),
            "repr_distance": A.representation_distance(z_t, z_s),
        }

    return analyze


# --------------------------------------------------------------------- rows

def _loss_cells(parts: dict) -> dict:
    # the cosine term of SDP-COS shares the representation-loss column with CC
    return {"loss_total": parts.get("total"), "loss_ce": parts.get("ce"), "loss_kld": parts.get("kld"),
            "loss_cc": parts.get("cc", parts.get("cos"))}


def write_epoch_rows(w: MetricsWriter, base: dict, e: EpochRecord):
    w.row(**base, step=e.step, remaining_fraction=e.remaining_fraction, epoch=e.epoch, split="train",
          accuracy=e.train_accuracy, **_loss_cells(e.train_loss))
    w.row(**base, step=e.step, remaining_fraction=e.remaining_fraction, epoch=e.epoch, split="dev",
          accuracy=e.dev_accuracy, loss_total=e.dev_loss, loss_ce=e.dev_loss)


def step_writer(w: MetricsWriter, base: dict):
    """``on_step`` callback writing rows in run order: training epochs, the prune, then the step summary.

    A step's record is complete only after the next step's training (its recovery
    window), so the epochs that follow a prune are written before its ``step_end`` row.
    """
    state = {"remaining": 1.0, "epochs": 0}

    def epochs_through(record: RunRecord, last_step: int):
        while state["epochs"] < len(record.epochs) and record.epochs[state["epochs"]].step <= last_step:
            write_epoch_rows(w, base, record.epochs[state["epochs"]])
            state["epochs"] += 1

    def on_step(record: RunRecord, s: StepRecord | None):
        if s is None:
            w.row(**base, step=0, remaining_fraction=1.0, epoch=0, split="baseline",
                  accuracy=record.baseline_accuracy, **record.baseline_metrics)
            w.flush()
            return
        epochs_through(record, s.step)
        w.row(**base, step=s.step, remaining_fraction=state["remaining"], epoch=record.epochs_per_step,
              split="pre_prune", accuracy=s.pre_prune_accuracy)
        w.row(**base, step=s.step, remaining_fraction=s.remaining_fraction, epoch=0, split="post_prune",
              accuracy=s.post_prune_accuracy, overlap_vs_mbp=s.metrics.get("overlap_vs_mbp"),
              frob_distortion_total=s.metrics.get("frob_distortion_total"))
        epochs_through(record, s.step + 1)
        analysis = {k: v for k, v in s.metrics.items() if k not in ("overlap_vs_mbp", "frob_distortion_total")}
        if not s.retrained:
            recovery = None
        else:
            recovery = UNRECOVERED if s.recovery_epochs is None else s.recovery_epochs
        w.row(**base, step=s.step, remaining_fraction=s.remaining_fraction,
              epoch=record.epochs_per_step if s.retrained else 0, split="step_end", accuracy=s.final_accuracy,
              **analysis, recovery_epochs=recovery)
        state["remaining"] = s.remaining_fraction
        w.flush()

    return on_step


# --------------------------------------------------------------------- commands

def _prepare_out(path: Path, force: bool, what: list[str]):
    """Refuse to overwrite existing outputs unless --force."""
    existing = [p for p in what if (path / p).exists()]
    if existing and not force:
        raise ConfigError(f"{path} already holds {existing}; pass --force to overwrite")


def cmd_gen_data(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    d = cfg.dataset
    if d["kind"] == "csv":
        raise ConfigError("gen-data needs a generator dataset kind (blobs or spirals)")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    seed = cfg.seeds[0]
    ds = acquire_dataset(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out / "dataset.csv", d["label_column"])
    params = {k: d[k] for k in ("num_classes", "samples_per_class", "dim", "center_spread", "cluster_std")} \
        if d["kind"] == "blobs" else {"samples_per_class": d["samples_per_class"], "noise_std": d["noise_std"]}
    manifest = {"generator": d["kind"], "params": params, "seed": seed, "csv": "dataset.csv",
                "label_column": d["label_column"], "rows": len(ds), "dim": ds.dim,
                "num_classes": ds.num_classes, "class_counts": ds.class_counts().tolist()}
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d rows to %s", len(ds), out / "dataset.csv")
    return EXIT_OK


def _train_teacher_for(cfg: ExperimentConfig, seed: int):
    train, dev, _ = splits_for(cfg, seed)
    root = Rng(seed)
    net = init_network(root.child("init"), cfg.widths)
    teacher, history = train_teacher(train, dev, net, cfg.teacher, root.child("teacher"))
    return teacher, history, (train, dev)


def cmd_train_teacher(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    _prepare_out(out, force, ["teacher.ckpt", "teacher_log.csv"])
    seed = cfg.seeds[0]
    splits_for(cfg, seed)  # fail on data problems before creating files
    teacher, history, (_, dev) = _train_teacher_for(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(teacher, out / "teacher.ckpt")
    w = MetricsWriter(out / "teacher_log.csv")
    base = {"run_id": f"teacher__seed{seed}", "seed": seed, "method": "none", "loss_mode": "ce"}
    for e in history:
        write_epoch_rows(w, base, e)
    w.close()
    acc = evaluate(teacher, dev)[0]
    print(f"teacher dev accuracy {acc:.4f} after {len(history)} epochs -> {out / 'teacher.ckpt'}")
    return EXIT_OK


def run_one(cfg: ExperimentConfig, seed: int, method: str, mode: str, teacher_path: Path, run_dir: Path):
    """One prune run writing ``metrics.csv`` and ``student.ckpt`` into ``run_dir``."""
    teacher = load_checkpoint(teacher_path, role="teacher")
    if teacher.widths != cfg.widths:
        raise ConfigError(f"teacher widths {teacher.widths} differ from configured {cfg.widths}")
    train, dev, _ = splits_for(cfg, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    w = MetricsWriter(run_dir / "metrics.csv")
    base = {"run_id": f"{method}__{mode}__seed{seed}", "seed": seed, "method": method, "loss_mode": mode}
    try:
        record, student = iterative_prune(
            teacher, train, dev, method, mode, cfg.schedule, cfg.student, cfg.loss,
            Rng(seed).child("run", method, mode), analyzer=make_analyzer(cfg, dev),
            on_step=step_writer(w, base))
    finally:
        w.close()
    save_checkpoint(student, run_dir / "student.ckpt")
    return record


def cmd_prune_run(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    _prepare_out(out, force, ["metrics.csv", "student.ckpt"])
    teacher_path = Path(cfg.teacher_path) if cfg.teacher_path else out / "teacher.ckpt"
    if not teacher_path.exists():
        raise ConfigError(f"teacher checkpoint {teacher_path} not found; run train-teacher first")
    seed = cfg.seeds[0]
    splits_for(cfg, seed)
    record = run_one(cfg, seed, cfg.method, cfg.loss_mode, teacher_path, out)
    print(f"{cfg.method}/{cfg.loss_mode}: final dev accuracy {record.final_accuracy:.4f} at "
          f"{record.steps[-1].remaining_fraction:.3f} remaining -> {out / 'metrics.csv'}")
    return EXIT_OK


@dataclass
class CellResult:
    method: str
    mode: str
    seed: int
    status: str
    error: str = ""


def _cell(args) -> CellResult:
    cfg, seed, method, mode, teacher_path, run_dir = args
    _setup_logging()
    try:
        run_one(cfg, seed, method, mode, Path(teacher_path), Path(run_dir))
        return CellResult(method, mode, seed, "ok")
    except Exception as exc:  # a failed cell is reported, the sweep carries on
        return CellResult(method, mode, seed, "failed", f"{type(exc).__name__}: {exc}")


def cell_summary(metrics_csv: Path) -> dict:
    """Final-step values of one run, parsed back from its metrics CSV."""
    with open(metrics_csv, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["split"] == "step_end"]
    if not rows:
        raise ReportError(f"{metrics_csv} has no completed steps")
    last = rows[-1]
    measured = [r for r in rows if r["recovery_epochs"] != ""]
    window = [r for r in measured if 5 <= int(r["step"]) <= 15] or measured
    rec = [math.inf if float(r["recovery_epochs"]) == UNRECOVERED else float(r["recovery_epochs"]) for r in window]

    def num(key):
        return float(last[key]) if last[key] != "" else math.nan

    return {"final_accuracy": num("accuracy"), "remaining_fraction": num("remaining_fraction"),
            "median_recovery": float(np.median(rec)) if rec else math.nan, "mi_knn": num("mi_knn"), "snr": num("snr")}


def cmd_sweep(cfg: ExperimentConfig, out: Path, force: bool, jobs: int) -> int:
    if (out / "runs").exists() and not force:
        raise ConfigError(f"{out / 'runs'} exists; pass --force to overwrite")
    for seed in cfg.seeds:
        splits_for(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "teachers").mkdir(exist_ok=True)
    cells, results = [], []
    for seed in cfg.seeds:
        tpath = out / "teachers" / f"seed{seed}.ckpt"
        try:
            teacher, _, _ = _train_teacher_for(cfg, seed)
            save_checkpoint(teacher, tpath)
        except SdpLabError as exc:
            results += [CellResult(m, l, seed, "failed", f"teacher: {type(exc).__name__}: {exc}")
                        for m in cfg.methods for l in cfg.loss_modes]
            continue
        for m in cfg.methods:
            for l in cfg.loss_modes:
                run_dir = out / "runs" / f"{m}__{l}__seed{seed}"
                cells.append((cfg, seed, m, l, str(tpath), str(run_dir)))
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results += list(pool.map(_cell, cells))
    else:
        results += [_cell(c) for c in cells]
    write_aggregate(out, cfg, results)
    failed = [r for r in results if r.status != "ok"]
    for r in failed:
        print(f"cell {r.method}/{r.mode}/seed{r.seed} failed: {r.error}", file=sys.stderr)
    print(f"sweep: {len(results) - len(failed)}/{len(results)} cells ok -> {out / 'aggregate.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


def write_aggregate(out: Path, cfg: ExperimentConfig, results: list[CellResult]):
    order = {(m, l, s): i for i, (m, l, s) in enumerate(
        (m, l, s) for m in cfg.methods for l in cfg.loss_modes for s in cfg.seeds)}
    results = sorted(results, key=lambda r: order.get((r.method, r.mode, r.seed), len(order)))
    stats = ("final_accuracy", "remaining_fraction", "median_recovery", "mi_knn", "snr")
    per_cell: dict[tuple, list[dict]] = {}
    with open(out / "aggregate.csv", "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(AGGREGATE_COLUMNS)
        for r in results:
            vals = {}
            if r.status == "ok":
                vals = cell_summary(out / "runs" / f"{r.method}__{r.mode}__seed{r.seed}" / "metrics.csv")
                per_cell.setdefault((r.method, r.mode), []).append(vals)
            wr.writerow(["cell", r.method, r.mode, r.seed, r.status] + [fmt(vals.get(k)) for k in stats]
                        + [r.error])
        for m in cfg.methods:
            for l in cfg.loss_modes:
                rows = per_cell.get((m, l))
                if not rows:
                    continue
                arr = {k: np.array([v[k] for v in rows]) for k in stats}
                with np.errstate(invalid="ignore"):  # all-unrecovered cells give inf mean, nan std
                    mean = [fmt(float(np.mean(arr[k]))) for k in stats]
                    std = [fmt(float(np.std(arr[k]))) for k in stats]
                wr.writerow(["mean", m, l, "all", "ok"] + mean + [""])
                wr.writerow(["std", m, l, "all", "ok"] + std + [""])


def read_metrics(paths) -> list[dict]:
    rows = []
    for p in paths:
        if not Path(p).exists():
            raise ReportError(f"no such metrics file: {p}")
        with open(p, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            if not header:
                raise ReportError(f"{p} is empty")
            missing = [c for c in METRIC_COLUMNS if c not in header]
            if missing:
                raise ReportError(f"{p} is missing columns: {', '.join(missing)}")
            got = list(reader)
        if not got:
            raise ReportError(f"{p} has a header but no rows")
        rows += got
    return rows


def build_charts(rows: list[dict]) -> dict[str, str]:
    acc, rec, mi, snr = {}, {}, {}, {}
    for r in rows:
        run = r["run_id"]
        if r["split"] in ("baseline", "step_end"):
            acc.setdefault(run, []).append((r["remaining_fraction"], r["accuracy"]))
            if r["mi_knn"]:
                mi.setdefault(f"mi_knn {run}", []).append((r["step"], r["mi_knn"]))
            if r["snr"]:
                snr.setdefault(f"snr {run}", []).append((r["step"], r["snr"]))
        if r["split"] == "step_end" and r["recovery_epochs"] != "":
            rec.setdefault(run, []).append((r["step"], r["recovery_epochs"]))
    if not acc:
        raise ReportError("metrics hold no baseline or step_end rows to plot")
    return {
        "accuracy_vs_remaining.svg": report.line_chart(
            "Dev accuracy vs remaining weights", "remaining fraction", "dev accuracy", acc),
        "recovery.svg": report.bar_chart(
            "Epochs to recover 95% of pre-prune accuracy (-1: not recovered)", "prune step",
            "recovery epochs", rec),
        "mi_snr.svg": report.line_chart(
            "Student-teacher MI (kNN) and class SNR per step", "prune step", "nats / ratio", {**mi, **snr}),
    }


def cmd_report(csv_paths: list[str], out: Path | None) -> int:
    rows = read_metrics(csv_paths)
    charts = build_charts(rows)  # everything is rendered before any file is written
    out = out or Path(csv_paths[0]).parent
    out.mkdir(parents=True, exist_ok=True)
    for name, svg in charts.items():
        with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(svg)
    print(f"wrote {', '.join(charts)} to {out}")
    return EXIT_OK


# --------------------------------------------------------------------- entry point

def _setup_logging():
    level = os.environ.get("SDPLAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="override the config's seed list with a single seed")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweep")
    p = argparse.ArgumentParser(prog="sdplab", description="Iterative pruning with self-distillation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset CSV and manifest")
    sub.add_parser("train-teacher", parents=[common], help="train and checkpoint the teacher")
    sub.add_parser("prune-run", parents=[common], help="one iterative prune run from a teacher checkpoint")
    sub.add_parser("sweep", parents=[common], help="method x loss mode x seed grid with aggregate CSV")
    rp = sub.add_parser("report", parents=[common], help="SVG charts from metrics CSVs")
    rp.add_argument("csv", nargs="+", help="metrics CSV files")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return cfg, Path(args.out or cfg.out)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.csv, Path(args.out) if args.out else None)
        cfg, out = _resolve(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out, args.force)
        if args.command == "train-teacher":
            return cmd_train_teacher(cfg, out, args.force)
        if args.command == "prune-run":
            return cmd_prune_run(cfg, out, args.force)
        return cmd_sweep(cfg, out, args.force, args.jobs)
    except ConfigError as exc:
        print(f"ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SdpLabError, OSError, ValueError, RuntimeError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
