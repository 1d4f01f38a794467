"""Teacher training and the iterative prune / self-distilled retrain loop."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from .dataset import LabeledDataset, minibatches
from .errors import DivergenceError
from .network import (NetworkState, OptimizerState, backward, count_remaining, forward,
                      global_norm, sgd_step, snapshot_teacher)
from .analysis import mask_overlap
from .pruning import (PruneContext, PruneEvent, build_mask_layerwise, frobenius_distortion,
                      hc_expected_l0_grad, hc_sample, hc_test_mask, init_gates, METHODS, prune_step,
                      score_magnitude)
from .tensor_core import Rng

log = logging.getLogger(__name__)

LOSS_MODES = ("ce", "sdp_kld", "sdp_cc", "sdp_cos")
RECOVERY_THRESHOLD = 0.95


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch_size: int = 64
    patience: int = 5
    min_delta: float = 1e-4
    label_smoothing: float = 0.0
    l2: float = 1e-4
    l1: float = 1e-4
    lambda_l0: float = 1e-4
    lambda_fdm: float = 1.0
    cache_teacher: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.patience < 1:
            raise ValueError("need epochs >= 1, batch_size >= 2, patience >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if min(self.l1, self.l2, self.lambda_l0, self.lambda_fdm, self.min_delta) < 0:
            raise ValueError("regularization coefficients must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


@dataclass(frozen=True)
class ScheduleConfig:
    num_prune_steps: int = 15
    fraction_per_step: float = 0.10
    epochs_per_step: int = 10
    kind: str = "uniform"
    final_density: float = 0.2

    def __post_init__(self):
        if self.num_prune_steps < 1 or self.epochs_per_step < 1:
            raise ValueError("need at least one prune step and one epoch per step")
        if not 0.0 < self.fraction_per_step < 1.0 or not 0.0 < self.final_density < 1.0:
            raise ValueError("fractions must lie in (0, 1)")
        if self.kind not in ("uniform", "cubic"):
            raise ValueError(f"schedule kind must be 'uniform' or 'cubic', got {self.kind!r}")


def cubic_density(schedule: ScheduleConfig, t: int) -> float:
    """Target remaining density after t of T steps: s_f + (1 - s_f)(1 - t/T)^3."""
    s_f, T = schedule.final_density, schedule.num_prune_steps
    return s_f + (1.0 - s_f) * (1.0 - t / T) ** 3


def step_fraction(schedule: ScheduleConfig, step_index: int) -> float:
    """Fraction of the currently remaining weights to remove at 0-based ``step_index``."""
    if not 0 <= step_index < schedule.num_prune_steps:
        raise IndexError(f"step {step_index} outside 0..{schedule.num_prune_steps - 1}")
    if schedule.kind == "uniform":
        return schedule.fraction_per_step
    return 1.0 - cubic_density(schedule, step_index + 1) / cubic_density(schedule, step_index)


def evaluate(net: NetworkState, data: LabeledDataset, gates: list | None = None) -> tuple[float, float]:
    tr = forward(net, data.inputs, gates)
    pred = np.argmax(tr.logits, axis=1)
    loss, _ = L.cross_entropy(tr.logits, data.labels)
    return float(np.mean(pred == data.labels)), loss


@dataclass
class EpochRecord:
    step: int
    epoch: int
    remaining_fraction: float
    train_loss: dict
    dev_accuracy: float
    dev_loss: float
    train_accuracy: float | None = None


@dataclass
class StepRecord:
    step: int
    fraction: float
    remaining_fraction: float
    pre_prune_accuracy: float
    post_prune_accuracy: float
    final_accuracy: float
    recovery_epochs: int | None
    event: PruneEvent | None
    metrics: dict = field(default_factory=dict)
    retrained: bool = True  # False for the last prune, which no training follows


@dataclass
class RunRecord:
    method: str
    loss_mode: str
    epochs_per_step: int
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    baseline_metrics: dict = field(default_factory=dict)
    baseline_accuracy: float | None = None
    teacher_queries: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.steps[-1].final_accuracy

    def median_recovery(self, first_step: int = 1, last_step: int | None = None) -> float:
        """Median recovery epochs over 1-based steps; unrecovered steps count as infinite.

        Steps with no retraining after them carry no recovery measurement and are left out.
        """
        vals = [np.inf if s.recovery_epochs is None else s.recovery_epochs for s in self.steps
                if s.retrained and s.step >= first_step and (last_step is None or s.step <= last_step)]
        if not vals:
            return float("nan")
        return float(np.median(vals))


def recovery_epochs(pre_accuracy: float, post_accuracy: float, epoch_accuracies, threshold=RECOVERY_THRESHOLD):
    """Epochs of retraining until dev accuracy is back to ``threshold`` x pre-prune accuracy.

    0 if pruning never dropped below the target, None if it is not reached.
    """
    target = threshold * pre_accuracy
    if post_accuracy >= target:
        return 0
    for e, acc in enumerate(epoch_accuracies, start=1):
        if acc >= target:
            return e
    return None


class TeacherOracle:
    """Frozen teacher outputs per batch, optionally cached for the whole training split."""

    def __init__(self, teacher: NetworkState, train: LabeledDataset | None = None, cache: bool = False):
        self.teacher = teacher
        self.queries = 0
        self._cache = None
        if cache and train is not None:
            tr = forward(teacher, train.inputs)
            self._cache = (tr.logits, tr.penultimate)

    def __call__(self, batch) -> tuple[np.ndarray, np.ndarray]:
        self.queries += 1
        if self._cache is not None:
            return self._cache[0][batch.indices], self._cache[1][batch.indices]
        tr = forward(self.teacher, batch.inputs)
        return tr.logits, tr.penultimate


def _objective(mode, trace, batch, oracle, weights, smoothing):
    if mode == "ce":
        ce, g = L.cross_entropy(trace.logits, batch.labels, smoothing)
        return L.ObjectiveResult(ce, g, None, {"ce": ce})
    t_logits, t_feat = oracle(batch)
    if mode == "sdp_kld":
        return L.sdp_kld_objective(trace.logits, t_logits, batch.labels, weights)
    if mode == "sdp_cc":
        return L.sdp_cc_objective(trace.logits, t_logits, trace.penultimate, t_feat, batch.labels,
                                  weights, skip_dead=True)
    if mode == "sdp_cos":
        return L.sdp_cos_objective(trace.logits, trace.penultimate, t_feat, batch.labels, weights, safe=True)
    raise ValueError(f"unknown loss mode {mode!r}; choose from {LOSS_MODES}")


class _Runner:
    """Mutable per-run training state (student, optimizer, optional L0 gates)."""

    def __init__(self, net, config: TrainConfig, weights: L.LossWeights, mode: str, method: str,
                 oracle: TeacherOracle | None, rng: Rng, smoothing: float = 0.0):
        self.net = net
        self.config = config
        self.weights = weights
        self.mode = mode
        self.method = method
        self.oracle = oracle
        self.rng = rng
        self.opt = OptimizerState(config.lr, config.momentum, config.clip_norm)
        self.gates = init_gates(net) if method == "l0" else None
        self.gate_velocity = {i: np.zeros_like(g.log_alpha) for i, g in (self.gates or {}).items()}
        self.smoothing = smoothing

    def eval_gates(self):
        if self.gates is None:
            return None
        return [hc_test_mask(self.gates[i]) if i in self.gates else None for i in range(len(self.net.layers))]

    def evaluate(self, data):
        return evaluate(self.net, data, self.eval_gates())

    def train_epoch(self, data: LabeledDataset, rng: Rng) -> dict:
        sums: dict[str, float] = {}
        n_batches = 0
        for b, batch in enumerate(minibatches(data, self.config.batch_size, rng)):
            gate_list, factors = None, None
            if self.gates is not None:
                draws = {i: hc_sample(g, rng.child("gate", b)) for i, g in self.gates.items()}
                gate_list = [draws[i][0] if i in draws else None for i in range(len(self.net.layers))]
                factors = {i: d[1] for i, d in draws.items()}
            tr = forward(self.net, batch.inputs, gate_list)
            res = _objective(self.mode, tr, batch, self.oracle, self.weights, self.smoothing)
            hidden = {len(self.net.layers) - 2: res.feature_grad} if res.feature_grad is not None else None
            grads = backward(self.net, tr, res.logit_grad, hidden)
            l1 = self.config.l1 if self.method == "l1_mbp" else 0.0
            pen, pen_grads = L.weight_penalty(self.net, l1=l1, l2=self.config.l2)
            for g, pg in zip(grads, pen_grads):
                g.weights = g.weights + pg
            total = res.total + pen
            if not np.isfinite(total):
                raise DivergenceError(
                    f"loss became non-finite (batch {b}, parts {res.parts}, grad norm {global_norm(grads):.3g})")
            if self.gates is not None:
                self._gate_step(grads, factors)
            sgd_step(self.net, self.opt, grads)
            sums["total"] = sums.get("total", 0.0) + total
            for k, v in res.parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        return {k: v / max(n_batches, 1) for k, v in sums.items()}

    def _gate_step(self, grads, factors):
        for i, gate in self.gates.items():
            layer = self.net.layers[i]
            g = grads[i].effective * layer.weights * layer.mask * factors[i]
            g = g + self.config.lambda_l0 * hc_expected_l0_grad(gate)
            v = self.gate_velocity[i]
            v *= self.opt.momentum
            v += np.clip(g, -1.0, 1.0)
            gate.log_alpha -= self.opt.lr * v


def train_teacher(train: LabeledDataset, dev: LabeledDataset, net: NetworkState, config: TrainConfig,
                  rng: Rng) -> tuple[NetworkState, list[EpochRecord]]:
    """Cross-entropy training (optionally label-smoothed) with dev-accuracy early stopping."""
    if any(np.any(l.mask == 0) for l in net.layers):
        raise ValueError("teacher training expects an unmasked network")
    runner = _Runner(net, config, L.LossWeights(), "ce", "none", None, rng, config.label_smoothing)
    history = []
    best, stale = -np.inf, 0
    for epoch in range(1, config.epochs + 1):
        parts = runner.train_epoch(train, rng.child("teacher_epoch", epoch))
        acc, dloss = evaluate(net, dev)
        tr_acc, _ = evaluate(net, train)
        history.append(EpochRecord(0, epoch, 1.0, parts, acc, dloss, tr_acc))
        log.debug("teacher epoch %d: loss %.4f dev acc %.4f", epoch, parts["total"], acc)
        if acc > best + config.min_delta:
            best, stale = acc, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return snapshot_teacher(net), history


def student_from_teacher(teacher: NetworkState) -> NetworkState:
    student = copy.deepcopy(teacher)
    student.role = "student"
    student.frozen = False
    student.version = 0
    return student


def _prune_stats(net: NetworkState, before: dict, mbp_masks: dict) -> dict:
    """Distortion of one prune step and Jaccard overlap of its removals with layerwise MBP's."""
    sq = 0.0
    ours, theirs = [], []
    for i, (w, old) in before.items():
        new = net.layers[i].mask
        sq += frobenius_distortion(w, new) ** 2
        # 0 marks a weight removed in this step, so cumulative history does not inflate the overlap
        ours.append(1.0 - (old - new))
        theirs.append(1.0 - (old - mbp_masks.get(i, old)))
    return {"overlap_vs_mbp": mask_overlap(ours, theirs)[1], "frob_distortion_total": float(np.sqrt(sq))}


def iterative_prune(teacher: NetworkState, train: LabeledDataset, dev: LabeledDataset, method: str,
                    loss_mode: str, schedule: ScheduleConfig, config: TrainConfig,
                    weights: L.LossWeights, rng: Rng,
                    analyzer: Callable[[int, NetworkState, NetworkState, list | None], dict] | None = None,
                    on_step: Callable[[RunRecord, StepRecord | None], None] | None = None,
                    ) -> tuple[RunRecord, NetworkState]:
    """Train then prune a copy of ``teacher``, ``schedule.num_prune_steps`` times.

    Each step trains ``epochs_per_step`` epochs under ``loss_mode``, records dev
    accuracy, applies the method's mask at the step fraction and records the
    post-prune accuracy.  A prune's recovery is read off the next step's training
    epochs; the last prune has none, so its record is marked ``retrained=False``.
    ``analyzer`` adds representation metrics at step 0 and right after each prune;
    ``on_step`` is called once the baseline (``None``) and each step record are complete.
    """
    if method not in METHODS:
        raise ValueError(f"unknown pruning method {method!r}; choose from {METHODS}")
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {loss_mode!r}; choose from {LOSS_MODES}")
    student = student_from_teacher(teacher)
    oracle = TeacherOracle(teacher, train, config.cache_teacher)
    runner = _Runner(student, config, weights, loss_mode, method, oracle, rng)
    record = RunRecord(method, loss_mode, schedule.epochs_per_step)
    if analyzer is not None:
        record.baseline_metrics = analyzer(0, student, teacher, runner.eval_gates())
    record.baseline_accuracy = runner.evaluate(dev)[0]
    if on_step is not None:
        on_step(record, None)
    ctx = PruneContext(teacher=teacher, train=train, rng=None, gates=runner.gates,
                       lambda_fdm=config.lambda_fdm, batch_size=config.batch_size)
    remaining = 1.0
    pending: StepRecord | None = None

    def complete(s: StepRecord):
        record.steps.append(s)
        if on_step is not None:
            on_step(record, s)
        log.info("%s/%s step %d: remaining %.3f acc %.4f -> %.4f -> %.4f (recovery %s)", method, loss_mode,
                 s.step, s.remaining_fraction, s.pre_prune_accuracy, s.post_prune_accuracy, s.final_accuracy,
                 s.recovery_epochs if s.retrained else "n/a")

    for t in range(schedule.num_prune_steps):
        step = t + 1
        accs = []
        for epoch in range(1, schedule.epochs_per_step + 1):
            parts = runner.train_epoch(train, rng.child("epoch", step, epoch))
            acc, dloss = runner.evaluate(dev)
            tr_acc, _ = runner.evaluate(train)
            accs.append(acc)
            record.epochs.append(EpochRecord(step, epoch, remaining, parts, acc, dloss, tr_acc))
        if pending is not None:
            pending.recovery_epochs = recovery_epochs(pending.pre_prune_accuracy, pending.post_prune_accuracy, accs)
            pending.final_accuracy = accs[-1]
            pending.retrained = True
            complete(pending)
        pre_acc = accs[-1]
        frac = step_fraction(schedule, t)
        ctx.rng = rng.child("prune", step)
        before = {i: (student.layers[i].weights.copy(), student.layers[i].mask.copy())
                  for i in student.prunable_indices()}
        mbp = build_mask_layerwise(student, score_magnitude(student), frac).masks
        event = prune_step(student, method, frac, step, ctx)
        metrics = _prune_stats(student, before, mbp)
        for w in event.warnings:
            log.warning("step %d: %s", step, w)
        remaining = count_remaining(student)[2]
        post_acc, _ = runner.evaluate(dev)
        if analyzer is not None:
            metrics.update(analyzer(step, student, teacher, runner.eval_gates()))
        pending = StepRecord(step, frac, remaining, pre_acc, post_acc, post_acc, None, event, metrics,
                             retrained=False)
    if pending is not None:
        complete(pending)
    record.teacher_queries = oracle.queries
    return record, student
