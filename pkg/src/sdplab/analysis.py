"""Representation diagnostics: class SNR, mutual information, mask overlap, distances."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree
from scipy.special import digamma, logsumexp

from .errors import ShapeError
from .tensor_core import Rng

log = logging.getLogger(__name__)

SNR_STABILIZER = 1e-12


@dataclass(frozen=True)
class MiEstimatorConfig:
    k: int = 5
    bins: int = 256
    smoothing: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.bins < 2 or self.smoothing < 0:
            raise ValueError("need k >= 1, bins >= 2 and smoothing >= 0")


def signed_sqrt(z):
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.sqrt(np.abs(z))


def group_by_class(z, labels, num_classes: int | None = None, per_class: int | None = None) -> list[np.ndarray]:
    """Rows of ``z`` per class, truncated to a common count (the smallest class by default)."""
    labels = np.asarray(labels)
    num_classes = num_classes or int(labels.max()) + 1
    groups = [np.asarray(z)[labels == c] for c in range(num_classes)]
    n = min(len(g) for g in groups) if per_class is None else per_class
    return [g[:n] for g in groups]


def snr(groups: list[np.ndarray], use_sqrt: bool = True) -> float:
    """Average inter-class over intra-class l2 distance of (signed-square-rooted) rows.

    Inter-class pairs match sample n of class c with sample n of class i; every
    class must hold the same number of rows.
    """
    if len(groups) < 2:
        raise ValueError("SNR needs at least two classes")
    n = len(groups[0])
    if any(len(g) != n for g in groups):
        raise ValueError("SNR needs equal samples per class; subsample with group_by_class first")
    if n < 2:
        raise ValueError("SNR needs at least 2 samples per class")
    z = np.stack([np.asarray(g, dtype=np.float64) for g in groups])  # (C, N, D)
    if z.ndim == 2:
        z = z[..., None]
    if use_sqrt:
        z = signed_sqrt(z)
    c = z.shape[0]
    inter = 0.0
    for a in range(c):
        for b in range(c):
            if a != b:
                inter += np.linalg.norm(z[a] - z[b], axis=1).sum()
    intra = 0.0
    for a in range(c):
        d = np.linalg.norm(z[a][:, None, :] - z[a][None, :, :], axis=2)
        intra += d.sum()  # diagonal is zero
    num = inter / (n * (c - 1) ** 2)
    den = intra / (c * (n - 1) ** 2)
    return float(num / (den + SNR_STABILIZER))


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _has_duplicates(x):
    return len(np.unique(x, axis=0)) < len(x)


def mi_knn(z_s, z_t, config: MiEstimatorConfig = MiEstimatorConfig()) -> float:
    """Kraskov-Stoegbauer-Grassberger estimate (algorithm 1, max-norm) in nats, clipped at 0."""
    x, y = _as_2d(z_s), _as_2d(z_t)
    if len(x) != len(y):
        raise ShapeError("MI inputs need the same number of rows")
    n, k = len(x), config.k
    if n < k + 2:
        raise ValueError(f"need at least k + 2 = {k + 2} rows, got {n}")
    if _has_duplicates(x) or _has_duplicates(y):
        log.info("mi_knn: duplicate rows found, adding 1e-10 jitter")
        jitter = Rng(0).child("mi_knn_jitter")
        x = x + 1e-10 * jitter.normal(x.shape)
        y = y + 1e-10 * jitter.normal(y.shape)
    joint = np.hstack([x, y])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = np.nextafter(dist[:, k], 0)
    nx = cKDTree(x).query_ball_point(x, eps, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, eps, p=np.inf, return_length=True) - 1
    est = digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1))
    return float(max(est, 0.0))


def _histogram_bandwidth(n: int, smoothing: float, bins: int, span_std: float) -> float:
    """Kernel std in bins: ``smoothing`` x 0.4 x the 2-D Scott bandwidth, std * n^(-1/6).

    A fixed width of one bin leaves 256 x 256 cells far too sparse for a few
    thousand samples; scaling with n keeps the plug-in bias small.
    """
    return smoothing * 0.4 * n ** (-1.0 / 6.0) * span_std * bins


def mi_binned(a, b, config: MiEstimatorConfig = MiEstimatorConfig()) -> float:
    """Plug-in MI (nats) of a Gaussian-smoothed equal-width 2-D histogram.

    The kernel width is ``config.smoothing`` times a sample-size rule (see
    ``_histogram_bandwidth``); ``smoothing=0`` gives the raw plug-in estimate.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("mi_binned inputs must have equal length")
    n = len(a)
    if n < 10:
        raise ValueError("mi_binned needs at least 10 samples")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        log.info("mi_binned: constant series, returning 0")
        return 0.0
    hist, _, _ = np.histogram2d(a, b, bins=config.bins)
    if config.smoothing > 0:
        sa = _histogram_bandwidth(n, config.smoothing, config.bins, np.std(a) / np.ptp(a))
        sb = _histogram_bandwidth(n, config.smoothing, config.bins, np.std(b) / np.ptp(b))
        hist = gaussian_filter(hist, sigma=(sa, sb), mode="constant", truncate=4.0)
    p = hist / hist.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = np.sum(p[nz] * (np.log(p[nz]) - np.log((pa * pb)[nz])))
    return float(max(mi, 0.0))


def mi_binned_multivariate(z_s, z_t, config: MiEstimatorConfig = MiEstimatorConfig()) -> float:
    """Mean of ``mi_binned`` over matched columns (column i of z_s against column i of z_t)."""
    x, y = _as_2d(z_s), _as_2d(z_t)
    if x.shape != y.shape:
        raise ShapeError(f"representation shapes differ: {x.shape} vs {y.shape}")
    return float(np.mean([mi_binned(x[:, i], y[:, i], config) for i in range(x.shape[1])]))


def _kde_entropy(h, sigma2: float) -> float:
    h = _as_2d(h)
    sq = np.sum(h * h, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * h @ h.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    p = len(h)
    return float(-np.mean(logsumexp(-d2 / (2.0 * sigma2), axis=1) - np.log(p)))


def kde_mi_input_bound(h, sigma2: float) -> float:
    """Upper bound on I(T; X) for T = h + N(0, sigma2 I), in nats."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    h = _as_2d(h)
    if len(h) < 2:
        raise ValueError("need at least 2 rows")
    return _kde_entropy(h, sigma2) + 0.0


def kde_mi_label_bound(h, labels, sigma2: float) -> float:
    """Input bound minus the label-weighted within-class version of the same quantity."""
    h = _as_2d(h)
    labels = np.asarray(labels)
    total = kde_mi_input_bound(h, sigma2)
    cond = 0.0
    for lab in np.unique(labels):
        rows = h[labels == lab]
        if len(rows) == 1:
            log.info("kde_mi_label_bound: class %s has a single sample; its term is 0", lab)
            continue
        cond += len(rows) / len(h) * _kde_entropy(rows, sigma2)
    return float(total - cond)


def mask_overlap(masks_a, masks_b) -> tuple[list[float], float]:
    """Jaccard index of pruned (mask == 0) positions per layer and overall."""
    if len(masks_a) != len(masks_b):
        raise ShapeError("mask lists have different lengths")
    per, inter_all, union_all = [], 0, 0
    for ma, mb in zip(masks_a, masks_b):
        ma, mb = np.asarray(ma), np.asarray(mb)
        if ma.shape != mb.shape:
            raise ShapeError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
        pa, pb = ma == 0, mb == 0
        inter, union = int(np.sum(pa & pb)), int(np.sum(pa | pb))
        per.append(1.0 if union == 0 else inter / union)
        inter_all += inter
        union_all += union
    return per, (1.0 if union_all == 0 else inter_all / union_all)


def representation_distance(z_ref, z_pruned) -> float:
    z_ref = np.asarray(z_ref, dtype=np.float64)
    z_pruned = np.asarray(z_pruned, dtype=np.float64)
    if z_ref.shape != z_pruned.shape:
        raise ShapeError(f"representation shapes differ: {z_ref.shape} vs {z_pruned.shape}")
    d = z_ref - z_pruned
    return float(np.sqrt(np.sum(d * d)))
