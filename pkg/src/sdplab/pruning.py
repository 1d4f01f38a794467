"""Importance scores, mask construction and hard-concrete gate machinery.

Scores are "low = prune first".  Already-pruned positions score ``+inf`` so they
are never selected again; ties go to the lower flat index.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabeledDataset, minibatches
from .errors import NonFiniteError, ShapeError
from .losses import cross_entropy
from .network import NetworkState, apply_masks, backward, forward
from .tensor_core import Rng, argsort_by_key

log = logging.getLogger(__name__)

LAYERWISE_METHODS = ("mbp", "l1_mbp", "gradient", "taylor", "lookahead", "fdm_sdp", "l0")
GLOBAL_METHODS = ("global_mbp", "lamp")
METHODS = ("random",) + LAYERWISE_METHODS + GLOBAL_METHODS


@dataclass
class ImportanceScores:
    method: str
    scores: dict[int, np.ndarray]


@dataclass
class MaskUpdate:
    masks: dict[int, np.ndarray]
    removed: dict[int, int]
    warnings: list[str] = field(default_factory=list)


@dataclass
class PruneEvent:
    step: int
    method: str
    fraction: float
    removed: dict[int, int]
    warnings: list[str] = field(default_factory=list)


def _num_to_prune(fraction: float, live: int) -> int:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"prune fraction must lie in (0, 1), got {fraction}")
    # the tiny offset keeps e.g. 0.29 * 100 from flooring to 28
    return int(math.floor(fraction * live + 1e-9))


def _finalize(net: NetworkState, raw: dict[int, np.ndarray], method: str) -> ImportanceScores:
    out = {}
    for i, s in raw.items():
        s = np.array(s, dtype=np.float64)
        live = net.layers[i].mask == 1
        if not np.all(np.isfinite(s[live])):
            raise NonFiniteError(f"{method}: non-finite score in layer {i}")
        s[~live] = np.inf
        out[i] = s
    return ImportanceScores(method, out)


def score_magnitude(net: NetworkState) -> ImportanceScores:
    return _finalize(net, {i: np.abs(net.layers[i].weights) for i in net.prunable_indices()}, "mbp")


def accumulate_gradients(net: NetworkState, data: LabeledDataset, batch_size: int = 64
                         ) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """One in-order pass of cross-entropy gradients: (signed sum, sum of absolute values) per layer."""
    signed = {i: np.zeros(net.layers[i].shape) for i in net.prunable_indices()}
    absolute = {i: np.zeros(net.layers[i].shape) for i in net.prunable_indices()}
    for batch in minibatches(data, batch_size, rng=None):
        tr = forward(net, batch.inputs)
        _, g = cross_entropy(tr.logits, batch.labels)
        grads = backward(net, tr, g)
        for i in signed:
            if not np.all(np.isfinite(grads[i].weights)):
                raise NonFiniteError("non-finite gradient while accumulating scores")
            signed[i] += grads[i].weights
            absolute[i] += np.abs(grads[i].weights)
    return signed, absolute


def score_gradient(net: NetworkState, data: LabeledDataset, batch_size: int = 64) -> ImportanceScores:
    _, absolute = accumulate_gradients(net, data, batch_size)
    return _finalize(net, absolute, "gradient")


def score_taylor(net: NetworkState, data: LabeledDataset, batch_size: int = 64) -> ImportanceScores:
    signed, _ = accumulate_gradients(net, data, batch_size)
    return taylor_from_gradients(net, signed)


def taylor_from_gradients(net: NetworkState, grads: dict[int, np.ndarray]) -> ImportanceScores:
    return _finalize(net, {i: np.abs(g * net.layers[i].weights) for i, g in grads.items()}, "taylor")


def score_lookahead(net: NetworkState) -> ImportanceScores:
    """|W_l[i,j]| * ||row j of W_{l-1}|| * ||column i of W_{l+1}||; absent neighbours give 1."""
    raw = {}
    eff = [l.effective for l in net.layers]
    for i in net.prunable_indices():
        s = np.abs(eff[i])
        if i > 0:
            s = s * np.linalg.norm(eff[i - 1], axis=1)[None, :]
        if i + 1 < len(eff):
            s = s * np.linalg.norm(eff[i + 1], axis=0)[:, None]
        raw[i] = s
    return _finalize(net, raw, "lookahead")


def lamp_layer_scores(w: np.ndarray, live: np.ndarray) -> np.ndarray:
    """w_u^2 / sum_{v >= u} w_v^2 over live weights sorted ascending by w^2."""
    flat = np.ravel(w) ** 2
    live_idx = np.flatnonzero(np.ravel(live))
    out = np.full(flat.shape, np.inf)
    if live_idx.size == 0:
        return out.reshape(np.shape(w))
    vals = flat[live_idx]
    order = argsort_by_key(vals)
    sorted_vals = vals[order]
    tail = np.cumsum(sorted_vals[::-1])[::-1]
    sc = np.divide(sorted_vals, tail, out=np.zeros_like(sorted_vals), where=tail > 0)
    out[live_idx[order]] = sc
    return out.reshape(np.shape(w))


def score_lamp(net: NetworkState) -> ImportanceScores:
    raw = {i: lamp_layer_scores(net.layers[i].weights, net.layers[i].mask == 1)
           for i in net.prunable_indices()}
    return _finalize(net, raw, "lamp")


def fdm_sdp_layer_scores(w: np.ndarray, w_teacher: np.ndarray, lambda_fdm: float) -> np.ndarray:
    """Increase of ||W - M.W||^2 + lambda ||W_T - M.W||^2 when a single weight is removed."""
    w = np.asarray(w, dtype=np.float64)
    wt = np.asarray(w_teacher, dtype=np.float64)
    if w.shape != wt.shape:
        raise ShapeError(f"student {w.shape} and teacher {wt.shape} layers differ")
    return w ** 2 + lambda_fdm * (wt ** 2 - (wt - w) ** 2)


def score_fdm_sdp(student: NetworkState, teacher: NetworkState, lambda_fdm: float = 1.0) -> ImportanceScores:
    if len(student.layers) != len(teacher.layers):
        raise ShapeError("student and teacher have different depths")
    raw = {i: fdm_sdp_layer_scores(student.layers[i].weights, teacher.layers[i].effective, lambda_fdm)
           for i in student.prunable_indices()}
    return _finalize(student, raw, "fdm_sdp")


def _select_lowest(scores: np.ndarray, live: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k lowest-scoring live entries, ties to the lower index."""
    live_idx = np.flatnonzero(live)
    order = argsort_by_key(scores[live_idx])
    return live_idx[order[:k]]


def build_mask_layerwise(net: NetworkState, scores: ImportanceScores, fraction: float) -> MaskUpdate:
    masks, removed, warnings = {}, {}, []
    for i, s in scores.scores.items():
        layer = net.layers[i]
        live = np.ravel(layer.mask == 1)
        n_live = int(live.sum())
        if n_live < 2:
            warnings.append(f"layer {i}: only {n_live} live weights, skipped")
            continue
        k = _num_to_prune(fraction, n_live)
        m = layer.mask.copy().ravel()
        m[_select_lowest(np.ravel(s), live, k)] = 0.0
        masks[i] = m.reshape(layer.shape)
        removed[i] = k
    for w in warnings:
        log.warning(w)
    return MaskUpdate(masks, removed, warnings)


def build_mask_global(net: NetworkState, scores: ImportanceScores, fraction: float) -> MaskUpdate:
    keys = sorted(scores.scores)
    flat_scores = np.concatenate([np.ravel(scores.scores[i]) for i in keys])
    live = np.concatenate([np.ravel(net.layers[i].mask == 1) for i in keys])
    k = _num_to_prune(fraction, int(live.sum()))
    chosen = _select_lowest(flat_scores, live, k)
    return _split_global_choice(net, keys, chosen)


def _split_global_choice(net, keys, chosen) -> MaskUpdate:
    masks, removed, offset = {}, {}, 0
    chosen = np.sort(chosen)
    for i in keys:
        size = net.layers[i].mask.size
        sel = chosen[(chosen >= offset) & (chosen < offset + size)] - offset
        m = net.layers[i].mask.copy().ravel()
        m[sel] = 0.0
        masks[i] = m.reshape(net.layers[i].shape)
        removed[i] = int(sel.size)
        offset += size
    return MaskUpdate(masks, removed)


def build_mask_random(rng: Rng, net: NetworkState, fraction: float) -> MaskUpdate:
    """Uniform sample without replacement among all live prunable weights."""
    keys = net.prunable_indices()
    live = np.concatenate([np.ravel(net.layers[i].mask == 1) for i in keys])
    live_idx = np.flatnonzero(live)
    k = _num_to_prune(fraction, live_idx.size)
    chosen = live_idx[rng.choice(live_idx.size, k)]
    return _split_global_choice(net, keys, chosen)


def apply_update(net: NetworkState, update: MaskUpdate, step: int, method: str, fraction: float) -> PruneEvent:
    before = [int(l.mask.sum()) for l in net.layers]
    apply_masks(net, update.masks)
    after = [int(l.mask.sum()) for l in net.layers]
    removed = {i: before[i] - after[i] for i in update.masks}
    return PruneEvent(step, method, fraction, removed, list(update.warnings))


def frobenius_distortion(w, m) -> float:
    """||W - M.W||_F, i.e. the norm of the removed weights."""
    w = np.asarray(w, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if w.shape != m.shape:
        raise ShapeError(f"weights {w.shape} and mask {m.shape} differ")
    d = w - m * w
    return float(np.sqrt(np.sum(d * d)))


def first_order_loss_change(gradients, delta_theta, teacher_gradients=None, lam: float = 0.0) -> float:
    """g . dtheta + lambda g_T . dtheta summed over all parameter blocks."""
    total = sum(float(np.sum(np.asarray(g) * np.asarray(d))) for g, d in zip(gradients, delta_theta))
    if teacher_gradients is not None and lam:
        total += lam * sum(float(np.sum(np.asarray(g) * np.asarray(d)))
                           for g, d in zip(teacher_gradients, delta_theta))
    return total


def pruning_perturbation(net: NetworkState, masks: dict[int, np.ndarray]) -> list[np.ndarray]:
    """-w at positions the new masks remove, 0 elsewhere (one block per layer)."""
    out = []
    for i, layer in enumerate(net.layers):
        if i in masks:
            out.append(-layer.weights * (1 - masks[i]) * layer.mask)
        else:
            out.append(np.zeros(layer.shape))
    return out


# ----------------------------------------------------------------- hard concrete

@dataclass
class HardConcreteGate:
    log_alpha: np.ndarray
    temperature: float = 2.0 / 3.0
    lower: float = -0.1
    upper: float = 1.1

    def __post_init__(self):
        self.log_alpha = np.asarray(self.log_alpha, dtype=np.float64)
        if self.temperature <= 0 or self.lower >= 0 or self.upper <= 1:
            raise ValueError("hard concrete needs temperature > 0, lower < 0, upper > 1")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def hc_sample(gate: HardConcreteGate, rng: Rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One stochastic mask draw; returns (mask, gradient factor dM/dS, stretched value Z)."""
    shape = gate.log_alpha.shape
    u = rng.uniform(shape)
    bad = (u <= 0.0) | (u >= 1.0)
    while np.any(bad):
        u[bad] = rng.uniform(int(bad.sum()))
        bad = (u <= 0.0) | (u >= 1.0)
    s_bar = _sigmoid((np.log(u) - np.log1p(-u) + gate.log_alpha) / gate.temperature)
    r, l, b = gate.upper, gate.lower, gate.temperature
    z = (r - l) * s_bar + l
    m = np.minimum(1.0, np.maximum(0.0, z))
    f = (r - l) / b * s_bar * (1.0 - s_bar) * ((z >= 0) & (z <= 1))
    return m, f, z


def hc_expected_l0(gate: HardConcreteGate) -> float:
    return float(np.sum(hc_gate_open_probability(gate)))


def hc_gate_open_probability(gate: HardConcreteGate) -> np.ndarray:
    """P(mask > 0) per gate: sigmoid(S - b log(-l/r))."""
    return _sigmoid(gate.log_alpha - gate.temperature * math.log(-gate.lower / gate.upper))


def hc_expected_l0_grad(gate: HardConcreteGate) -> np.ndarray:
    p = hc_gate_open_probability(gate)
    return p * (1.0 - p)


def hc_test_mask(gate: HardConcreteGate) -> np.ndarray:
    r, l = gate.upper, gate.lower
    s = _sigmoid(gate.log_alpha)
    # r*s + l*(1-s) is (r-l)*s + l written so that S=0 lands on exactly 0.5
    return np.minimum(1.0, np.maximum(0.0, r * s + l * (1.0 - s)))


def init_gates(net: NetworkState, log_alpha: float = 3.0) -> dict[int, HardConcreteGate]:
    return {i: HardConcreteGate(np.full(net.layers[i].shape, float(log_alpha)))
            for i in net.prunable_indices()}


def score_l0(net: NetworkState, gates: dict[int, HardConcreteGate]) -> ImportanceScores:
    """Gates whose deterministic mask is 0 sort first; log-alpha orders the rest."""
    return _finalize(net, {i: gates[i].log_alpha for i in net.prunable_indices()}, "l0")


# ----------------------------------------------------------------- dispatch

@dataclass
class PruneContext:
    teacher: NetworkState | None = None
    train: LabeledDataset | None = None
    rng: Rng | None = None
    gates: dict | None = None
    lambda_fdm: float = 1.0
    batch_size: int = 64


def compute_scores(net: NetworkState, method: str, ctx: PruneContext) -> ImportanceScores | None:
    if method in ("mbp", "l1_mbp", "global_mbp"):
        sc = score_magnitude(net)
        sc.method = method
        return sc
    if method == "gradient":
        return score_gradient(net, ctx.train, ctx.batch_size)
    if method == "taylor":
        return score_taylor(net, ctx.train, ctx.batch_size)
    if method == "lookahead":
        return score_lookahead(net)
    if method == "lamp":
        return score_lamp(net)
    if method == "fdm_sdp":
        return score_fdm_sdp(net, ctx.teacher, ctx.lambda_fdm)
    if method == "l0":
        return score_l0(net, ctx.gates)
    if method == "random":
        return None
    raise ValueError(f"unknown pruning method {method!r}; choose from {METHODS}")


def build_update(net: NetworkState, method: str, fraction: float, ctx: PruneContext) -> MaskUpdate:
    if method == "random":
        return build_mask_random(ctx.rng, net, fraction)
    scores = compute_scores(net, method, ctx)
    if method in GLOBAL_METHODS:
        return build_mask_global(net, scores, fraction)
    return build_mask_layerwise(net, scores, fraction)


def prune_step(net: NetworkState, method: str, fraction: float, step: int, ctx: PruneContext) -> PruneEvent:
    update = build_update(net, method, fraction, ctx)
    return apply_update(net, update, step, method, fraction)
