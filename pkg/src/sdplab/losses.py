"""Training objectives with exact gradients.

Every loss returns ``(value, gradient)``; values are batch means unless noted,
gradients are with respect to the student quantity only (teacher outputs are
constants).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .network import NetworkState, log_softmax, softmax_with_temperature

log = logging.getLogger(__name__)

STANDARDIZE_EPS = 1e-5
KLD_COEFFICIENT_MODES = ("alpha_tau2", "alpha_squared")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 2e-5
    beta_cos: float = 0.05
    lambda_offdiag: float = 5e-3
    temperature: float = 0.9
    label_smoothing: float = 0.0
    kld_coefficient_mode: str = "alpha_tau2"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0 or self.beta_cos < 0 or self.lambda_offdiag < 0:
            raise ValueError("beta, beta_cos and lambda_offdiag must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.kld_coefficient_mode not in KLD_COEFFICIENT_MODES:
            raise ValueError(f"kld_coefficient_mode must be one of {KLD_COEFFICIENT_MODES}")

    @property
    def kld_coefficient(self) -> float:
        if self.kld_coefficient_mode == "alpha_tau2":
            return self.alpha * self.temperature ** 2
        return self.alpha ** 2


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def smoothed_targets(labels, num_classes: int, smoothing: float = 0.0) -> np.ndarray:
    labels = np.asarray(labels)
    y = np.zeros((len(labels), num_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return (1.0 - smoothing) * y + smoothing / num_classes


def cross_entropy(logits, labels, smoothing: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean of -sum_c y~_c log q_c; the logit gradient is (q - y~) / batch."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(labels)
    if labels.max() >= z.shape[1]:
        raise ValueError("label out of range")
    y = smoothed_targets(labels, z.shape[1], smoothing)
    logq = log_softmax(z)
    loss = -np.sum(y * logq) / len(z)
    grad = (np.exp(logq) - y) / len(z)
    return float(loss), grad


def kld_distillation(student_logits, teacher_logits, temperature: float) -> tuple[float, np.ndarray]:
    """Batch-mean KL(softmax(t/T) || softmax(s/T)) and its gradient w.r.t. the student logits."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    _check_same_shape(s, t, "kld_distillation")
    log_ps = log_softmax(s, temperature)
    log_pt = log_softmax(t, temperature)
    pt = np.exp(log_pt)
    loss = np.sum(pt * (log_pt - log_ps)) / len(s)
    grad = (np.exp(log_ps) - pt) / (temperature * len(s))
    return float(max(loss, 0.0)), grad


def kld_decomposition(teacher_probs, student_probs) -> tuple[float, float]:
    """Split KL(teacher || student) into sum y_T log y_T and sum y_T log y_S (batch means).

    The first term does not depend on the student, so only the second one carries
    gradient signal.
    """
    pt = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    ps = np.atleast_2d(np.asarray(student_probs, dtype=np.float64))
    _check_same_shape(pt, ps, "kld_decomposition")
    if np.any((ps == 0) & (pt > 0)):
        raise ValueError("student assigns zero probability where the teacher has mass (infinite KL)")
    live = pt > 0
    entropic = np.sum(np.where(live, pt * np.log(np.where(live, pt, 1.0)), 0.0)) / len(pt)
    kd = np.sum(np.where(live, pt * np.log(np.where(live, ps, 1.0)), 0.0)) / len(pt)
    return float(entropic), float(kd)


@dataclass
class _StdCache:
    xhat: np.ndarray
    sigma: np.ndarray


def _standardize(z, eps=STANDARDIZE_EPS):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("batch standardization needs a 2-D batch of at least 2 rows")
    centred = z - z.mean(axis=0)
    sigma = np.sqrt(np.mean(centred ** 2, axis=0) + eps)
    xhat = centred / sigma
    return xhat, _StdCache(xhat, sigma)


def batch_standardize(z, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Per-column zero mean and unit population std (divisor M, ``eps`` under the root)."""
    return _standardize(z, eps)[0]


def _standardize_backward(grad, cache: _StdCache):
    g = np.asarray(grad)
    xhat = cache.xhat
    return (g - g.mean(axis=0) - xhat * np.mean(g * xhat, axis=0)) / cache.sigma


def cross_correlation(z_s, z_t) -> np.ndarray:
    """C_ij = sum_m s_mi t_mj / (||s_:i|| ||t_:j||) for already standardized batches."""
    s = np.asarray(z_s, dtype=np.float64)
    t = np.asarray(z_t, dtype=np.float64)
    _check_same_shape(s, t, "cross_correlation")
    if s.shape[0] < 2:
        raise ValueError("cross-correlation needs at least 2 samples")
    ns = np.sqrt(np.sum(s * s, axis=0))
    nt = np.sqrt(np.sum(t * t, axis=0))
    if np.any(ns == 0) or np.any(nt == 0):
        raise ValueError("zero-norm feature column in cross-correlation input")
    return (s / ns).T @ (t / nt)


def cc_loss(c, lambda_offdiag: float) -> tuple[float, np.ndarray]:
    """sum_i (1 - C_ii)^2 + lambda sum_{i != j} C_ij^2 and its gradient w.r.t. C."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"correlation matrix must be square, got {c.shape}")
    diag = np.diag(c)
    off = c - np.diag(diag)
    loss = np.sum((1.0 - diag) ** 2) + lambda_offdiag * np.sum(off ** 2)
    grad = 2.0 * lambda_offdiag * off + np.diag(-2.0 * (1.0 - diag))
    return float(loss), grad


def live_feature_columns(z_s, z_t, tol: float = 1e-6) -> np.ndarray:
    """Columns with non-degenerate spread in both batches (dead ReLU units are excluded)."""
    return (np.std(z_s, axis=0) > tol) & (np.std(z_t, axis=0) > tol)


def cross_correlation_loss(z_s, z_t, lambda_offdiag: float, skip_dead: bool = False
                           ) -> tuple[float, np.ndarray]:
    """End-to-end loss on raw features: standardize both, correlate, score against identity.

    Returns the loss and dL/dz_s.  With ``skip_dead`` the loss is computed over the
    columns that are non-constant in both batches; a constant column has no
    defined correlation and contributes no gradient.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    _check_same_shape(z_s, z_t, "cross_correlation_loss")
    grad = np.zeros_like(z_s)
    if skip_dead:
        cols = live_feature_columns(z_s, z_t)
        if not cols.all():
            log.debug("cc loss: %d of %d feature columns are constant and skipped",
                      int((~cols).sum()), len(cols))
        if not cols.any():
            return 0.0, grad
        s_raw, t_raw = z_s[:, cols], z_t[:, cols]
    else:
        cols = slice(None)
        s_raw, t_raw = z_s, z_t
    s_hat, cache = _standardize(s_raw)
    t_hat = batch_standardize(t_raw)
    ns = np.sqrt(np.sum(s_hat ** 2, axis=0))
    nt = np.sqrt(np.sum(t_hat ** 2, axis=0))
    if np.any(ns == 0) or np.any(nt == 0):
        raise ValueError("zero-norm feature column in cross-correlation input")
    u = s_hat / ns
    v = t_hat / nt
    c = u.T @ v
    loss, dc = cc_loss(c, lambda_offdiag)
    du = v @ dc.T
    ds_hat = (du - u * np.sum(u * du, axis=0)) / ns
    grad[:, cols] = _standardize_backward(ds_hat, cache)
    return loss, grad


def cosine_sdp_loss(z_s, z_t) -> tuple[float, np.ndarray]:
    """Batch mean of 1 - cos(z_s, z_t) row-wise, gradient w.r.t. z_s."""
    s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    _check_same_shape(s, t, "cosine_sdp_loss")
    ns = np.linalg.norm(s, axis=1, keepdims=True)
    nt = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(ns == 0) or np.any(nt == 0):
        raise ValueError("zero-norm row in cosine loss")
    cos = np.sum(s * t, axis=1, keepdims=True) / (ns * nt)
    loss = float(np.mean(1.0 - cos))
    grad = -(t / (ns * nt) - cos * s / ns ** 2) / len(s)
    return loss, grad


def safe_cosine_sdp_loss(z_s, z_t) -> tuple[float, np.ndarray]:
    """Cosine loss over rows where both vectors are non-zero; zero rows count as loss 1, no gradient."""
    s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    ok = (np.linalg.norm(s, axis=1) > 0) & (np.linalg.norm(t, axis=1) > 0)
    grad = np.zeros_like(s)
    if not ok.any():
        return 1.0, grad
    loss, g = cosine_sdp_loss(s[ok], t[ok])
    frac = ok.mean()
    grad[ok] = g * frac
    return float(loss * frac + (1.0 - frac)), grad


@dataclass
class ObjectiveResult:
    total: float
    logit_grad: np.ndarray
    feature_grad: np.ndarray | None = None
    parts: dict = field(default_factory=dict)


def ce_objective(student_logits, labels, weights: LossWeights | None = None) -> ObjectiveResult:
    eps = weights.label_smoothing if weights else 0.0
    ce, g = cross_entropy(student_logits, labels, eps)
    return ObjectiveResult(ce, g, None, {"ce": ce})


def sdp_kld_objective(student_logits, teacher_logits, labels, weights: LossWeights) -> ObjectiveResult:
    """(1 - alpha) CE + alpha tau^2 KLD."""
    ce, g_ce = cross_entropy(student_logits, labels)
    kld, g_kld = kld_distillation(student_logits, teacher_logits, weights.temperature)
    a, tau2 = weights.alpha, weights.temperature ** 2
    total = (1 - a) * ce + a * tau2 * kld
    return ObjectiveResult(total, (1 - a) * g_ce + a * tau2 * g_kld, None, {"ce": ce, "kld": kld})


def sdp_cc_objective(student_logits, teacher_logits, z_s, z_t, labels, weights: LossWeights,
                     skip_dead: bool = False) -> ObjectiveResult:
    """(1 - alpha) CE + kappa KLD + beta CC, kappa per ``weights.kld_coefficient_mode``."""
    ce, g_ce = cross_entropy(student_logits, labels)
    kld, g_kld = kld_distillation(student_logits, teacher_logits, weights.temperature)
    cc, g_cc = cross_correlation_loss(z_s, z_t, weights.lambda_offdiag, skip_dead=skip_dead)
    a, kappa, beta = weights.alpha, weights.kld_coefficient, weights.beta
    total = (1 - a) * ce + kappa * kld + beta * cc
    return ObjectiveResult(total, (1 - a) * g_ce + kappa * g_kld, beta * g_cc,
                           {"ce": ce, "kld": kld, "cc": cc})


def sdp_cos_objective(student_logits, z_s, z_t, labels, weights: LossWeights,
                      safe: bool = False) -> ObjectiveResult:
    """alpha CE + beta_cos (1 - cos(z_s, z_t))."""
    ce, g_ce = cross_entropy(student_logits, labels)
    cos, g_cos = (safe_cosine_sdp_loss if safe else cosine_sdp_loss)(z_s, z_t)
    a, b = weights.alpha, weights.beta_cos
    return ObjectiveResult(a * ce + b * cos, a * g_ce, b * g_cos, {"ce": ce, "cos": cos})


def weight_penalty(net: NetworkState, l1: float = 0.0, l2: float = 0.0) -> tuple[float, list[np.ndarray]]:
    """l1 * sum|w| + l2/2 * sum w^2 over live weights of every layer (biases excluded)."""
    loss = 0.0
    grads = []
    for layer in net.layers:
        w = layer.weights * layer.mask
        loss += l1 * np.sum(np.abs(w)) + 0.5 * l2 * np.sum(w * w)
        grads.append((l1 * np.sign(w) + l2 * w) * layer.mask)
    return float(loss), grads
