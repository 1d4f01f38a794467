"""INI experiment configuration: schema, defaults and validate-before-run checks."""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field

from .analysis import MiEstimatorConfig
from .dataset import SplitSpec
from .errors import ConfigError
from .losses import LossWeights
from .pruning import METHODS
from .trainer import LOSS_MODES, ScheduleConfig, TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [v for v in text.replace(",", " ").split()]


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "kind": (str, "blobs"),
        "num_classes": (int, 4),
        "samples_per_class": (int, 500),
        "dim": (int, 16),
        "center_spread": (float, 1.0),
        "cluster_std": (float, 1.0),
        "noise_std": (float, 0.05),
        "path": (str, ""),
        "label_column": (str, "label"),
        "train_fraction": (float, 0.6),
        "dev_fraction": (float, 0.2),
        "test_fraction": (float, 0.2),
    },
    "network": {
        "widths": (_int_list, [16, 64, 64, 4]),
        "activation": (str, "relu"),
    },
    "teacher": {
        "epochs": (int, 100),
        "lr": (float, 0.05),
        "momentum": (float, 0.9),
        "clip_norm": (float, 1.0),
        "batch_size": (int, 64),
        "patience": (int, 5),
        "min_delta": (float, 1e-4),
        "label_smoothing": (float, 0.0),
        "l2": (float, 1e-4),
    },
    "prune": {
        "method": (str, "mbp"),
        "num_prune_steps": (int, 15),
        "fraction_per_step": (float, 0.10),
        "epochs_per_step": (int, 10),
        "schedule": (str, "uniform"),
        "final_density": (float, 0.2),
        "lr": (float, 0.05),
        "momentum": (float, 0.9),
        "clip_norm": (float, 1.0),
        "batch_size": (int, 64),
        "l1": (float, 1e-4),
        "l2": (float, 1e-4),
        "lambda_l0": (float, 1e-4),
        "lambda_fdm": (float, 1.0),
        "cache_teacher": (_bool, False),
    },
    "loss": {
        "mode": (str, "sdp_kld"),
        "alpha": (float, 0.5),
        "beta": (float, 2e-5),
        "beta_cos": (float, 0.05),
        "lambda_offdiag": (float, 5e-3),
        "temperature": (float, 0.9),
        "kld_coefficient_mode": (str, "alpha_tau2"),
    },
    "analysis": {
        "enabled": (_bool, True),
        "k": (int, 5),
        "bins": (int, 256),
        "smoothing": (float, 1.0),
        "kde_sigma2": (float, 1.0),
        "snr_sqrt": (_bool, True),
    },
    "run": {
        "seeds": (_int_list, [0]),
        "out": (str, "sdplab_out"),
        "teacher": (str, ""),
        "methods": (_str_list, ["random", "mbp"]),
        "loss_modes": (_str_list, ["ce", "sdp_kld"]),
    },
}

DATASET_KINDS = ("blobs", "spirals", "csv")


@dataclass
class ExperimentConfig:
    dataset: dict
    widths: list[int]
    split: SplitSpec
    teacher: TrainConfig
    student: TrainConfig
    schedule: ScheduleConfig
    loss: LossWeights
    method: str
    loss_mode: str
    analysis_enabled: bool
    mi: MiEstimatorConfig
    kde_sigma2: float
    snr_sqrt: bool
    seeds: list[int]
    out: str
    teacher_path: str
    methods: list[str]
    loss_modes: list[str]
    source: str = ""
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, seeds=[seed], split=replace(self.split, seed=seed))


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, plus (section, None) for headers."""
    where, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), n)
            continue
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and fully validate an INI config; every problem raises ConfigError with a location."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    where = _line_index(text)

    def loc(section, key=None):
        line = where.get((section, key)) or where.get((section, None))
        return f"{source}:{line}" if line else source

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{loc(section)}: unknown section [{section}]; known: {sorted(SCHEMA)}")
    for section, keys in SCHEMA.items():
        got = parser[section] if parser.has_section(section) else {}
        for key in got:
            if key not in keys:
                raise ConfigError(f"{loc(section, key)}: unknown key {key!r} in [{section}]")
        values[section] = {}
        for key, (conv, default) in keys.items():
            if key in got:
                try:
                    values[section][key] = conv(got[key])
                except ValueError as exc:
                    raise ConfigError(f"{loc(section, key)}: [{section}] {key} = {got[key]!r}: {exc}") from None
            else:
                values[section][key] = default

    def build(section, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{loc(section)}: [{section}] {exc}") from None

    d, t, p, l, a, r = (values[s] for s in ("dataset", "teacher", "prune", "loss", "analysis", "run"))
    if d["kind"] not in DATASET_KINDS:
        raise ConfigError(f"{loc('dataset', 'kind')}: dataset kind must be one of {DATASET_KINDS}")
    if d["kind"] == "csv" and not d["path"]:
        raise ConfigError(f"{loc('dataset', 'kind')}: kind = csv needs a path")
    if d["kind"] == "blobs":
        if d["num_classes"] < 2 or d["samples_per_class"] < 1 or d["dim"] < 1:
            raise ConfigError(f"{loc('dataset')}: blobs need num_classes >= 2, samples_per_class >= 1, dim >= 1")
        if d["cluster_std"] < 0 or d["center_spread"] < 0:
            raise ConfigError(f"{loc('dataset')}: center_spread and cluster_std must be non-negative")
    if d["kind"] == "spirals" and (d["samples_per_class"] < 2 or d["noise_std"] < 0):
        raise ConfigError(f"{loc('dataset')}: spirals need samples_per_class >= 2 and noise_std >= 0")
    seeds = r["seeds"]
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f"{loc('run', 'seeds')}: seeds must be a non-empty list of non-negative integers")
    split = build("dataset", lambda: SplitSpec(d["train_fraction"], d["dev_fraction"], d["test_fraction"], seeds[0]))

    widths = values["network"]["widths"]
    if len(widths) < 2 or min(widths) < 1:
        raise ConfigError(f"{loc('network', 'widths')}: widths need at least two positive entries")
    if values["network"]["activation"] != "relu":
        raise ConfigError(f"{loc('network', 'activation')}: only relu is supported")
    expect = {"blobs": (d["dim"], d["num_classes"]), "spirals": (2, 2)}.get(d["kind"])
    if expect and (widths[0], widths[-1]) != expect:
        raise ConfigError(f"{loc('network', 'widths')}: widths must start at input dim {expect[0]} "
                          f"and end at {expect[1]} classes, got {widths}")

    teacher = build("teacher", lambda: TrainConfig(
        epochs=t["epochs"], lr=t["lr"], momentum=t["momentum"], clip_norm=t["clip_norm"],
        batch_size=t["batch_size"], patience=t["patience"], min_delta=t["min_delta"],
        label_smoothing=t["label_smoothing"], l2=t["l2"], l1=0.0))
    student = build("prune", lambda: TrainConfig(
        lr=p["lr"], momentum=p["momentum"], clip_norm=p["clip_norm"], batch_size=p["batch_size"],
        l1=p["l1"], l2=p["l2"], lambda_l0=p["lambda_l0"], lambda_fdm=p["lambda_fdm"],
        cache_teacher=p["cache_teacher"]))
    schedule = build("prune", lambda: ScheduleConfig(p["num_prune_steps"], p["fraction_per_step"],
                                                     p["epochs_per_step"], p["schedule"], p["final_density"]))
    if not 0 <= t["momentum"] < 1 or not 0 <= p["momentum"] < 1:
        raise ConfigError(f"{loc('teacher')}: momentum must lie in [0, 1)")
    weights = build("loss", lambda: LossWeights(l["alpha"], l["beta"], l["beta_cos"], l["lambda_offdiag"],
                                                l["temperature"], 0.0, l["kld_coefficient_mode"]))
    mi = build("analysis", lambda: MiEstimatorConfig(a["k"], a["bins"], a["smoothing"]))
    if a["kde_sigma2"] <= 0:
        raise ConfigError(f"{loc('analysis', 'kde_sigma2')}: kde_sigma2 must be positive")
    for m in [p["method"]] + r["methods"]:
        if m not in METHODS:
            raise ConfigError(f"{loc('prune', 'method')}: unknown pruning method {m!r}; choose from {METHODS}")
    for m in [l["mode"]] + r["loss_modes"]:
        if m not in LOSS_MODES:
            raise ConfigError(f"{loc('loss', 'mode')}: unknown loss mode {m!r}; choose from {LOSS_MODES}")

    return ExperimentConfig(
        dataset=d, widths=widths, split=split, teacher=teacher, student=student, schedule=schedule,
        loss=weights, method=p["method"], loss_mode=l["mode"], analysis_enabled=a["enabled"], mi=mi,
        kde_sigma2=a["kde_sigma2"], snr_sqrt=a["snr_sqrt"], seeds=seeds, out=r["out"],
        teacher_path=r["teacher"], methods=r["methods"], loss_modes=r["loss_modes"], source=source,
        raw=values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
