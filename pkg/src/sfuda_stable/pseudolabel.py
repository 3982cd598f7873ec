"""Pseudo-label generation from softmax maps.

Maps are channels-last (H x W x C). Labels come back one-hot with abstaining
pixels left all-zero; ``*_indices`` helpers return class ids with -1 for
abstain, which is what the training loop consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ThresholdConfig

ABSTAIN = -1
EMPTY_CLASS = math.inf


@dataclass
class ClassThresholds:
    delta: np.ndarray  # per-class cutoff, +inf for classes with no support
    support_count: np.ndarray


@dataclass
class CoverageStats:
    counts: np.ndarray
    fractions: np.ndarray
    labeled: int
    total: int


def top_fraction_value(values, alpha: float) -> float:
    """The k-th largest entry with k = ceil(alpha * N).

    Returns +inf for an empty array so callers treat the class as unlabeled.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    n = values.size
    if n == 0:
        return EMPTY_CLASS
    # guard against alpha * n landing a hair above an integer (0.3 * 10)
    k = max(1, min(n, math.ceil(alpha * n - 1e-9)))
    return float(np.partition(values, n - k)[n - k])


def _validate_prob_map(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 2:
        raise ValueError(f"probability map needs a class axis, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError("non-finite probabilities")
    return p


def intra_class_thresholds(p, alpha: float) -> ClassThresholds:
    p = _validate_prob_map(p)
    num_classes = p.shape[-1]
    flat = p.reshape(-1, num_classes)
    assigned = flat.argmax(axis=1)
    confidence = flat[np.arange(flat.shape[0]), assigned]
    delta = np.full(num_classes, EMPTY_CLASS)
    support = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        members = confidence[assigned == c]
        support[c] = members.size
        delta[c] = top_fraction_value(members, alpha)
    return ClassThresholds(delta, support)


def _select(p: np.ndarray, alpha: float, lam: float | None) -> np.ndarray:
    num_classes = p.shape[-1]
    thresholds = intra_class_thresholds(p, alpha)
    assigned = p.argmax(axis=-1)
    confidence = np.take_along_axis(p, assigned[..., None], axis=-1)[..., 0]
    keep = confidence >= thresholds.delta[assigned]
    if lam is not None:
        keep &= confidence > lam
    return np.where(keep, assigned, ABSTAIN)


def _one_hot(indices: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros(indices.shape + (num_classes,), dtype=np.float64)
    rows = indices >= 0
    out[rows, indices[rows]] = 1.0
    return out


def ld_pseudo_label_indices(p, alpha: float) -> np.ndarray:
    return _select(_validate_prob_map(p), alpha, None)


def dtpl_pseudo_label_indices(p, cfg: ThresholdConfig) -> np.ndarray:
    cfg.validate()
    return _select(_validate_prob_map(p), cfg.alpha, cfg.lam)


def ld_pseudo_label(p, alpha: float) -> np.ndarray:
    """Label a pixel with its argmax class when it clears that class's top-alpha cutoff."""
    p = _validate_prob_map(p)
    return _one_hot(_select(p, alpha, None), p.shape[-1])


def dtpl_pseudo_label(p, cfg: ThresholdConfig) -> np.ndarray:
    """Double-threshold labels: the intra-class cutoff plus a global floor ``cfg.lam``."""
    p = _validate_prob_map(p)
    return _one_hot(dtpl_pseudo_label_indices(p, cfg), p.shape[-1])


def batch_pseudo_label_indices(probs, method: str, cfg: ThresholdConfig) -> np.ndarray:
    """Per-image labels for an N x C x H x W batch; thresholds are computed per image."""
    probs = np.asarray(probs)
    out = np.empty((probs.shape[0],) + probs.shape[2:], dtype=np.int64)
    for i, image_probs in enumerate(probs):
        hwc = np.moveaxis(image_probs, 0, -1)
        if method == "ld":
            out[i] = ld_pseudo_label_indices(hwc, cfg.alpha)
        elif method == "fairld":
            out[i] = dtpl_pseudo_label_indices(hwc, cfg)
        else:
            raise ValueError(f"method {method!r} does not produce pseudo labels")
    return out


def label_coverage_stats(y) -> CoverageStats:
    y = np.asarray(y)
    num_classes = y.shape[-1]
    flat = y.reshape(-1, num_classes)
    counts = flat.sum(axis=0).round().astype(np.int64)
    total = flat.shape[0]
    fractions = counts / total if total else np.zeros(num_classes)
    return CoverageStats(counts=counts, fractions=fractions, labeled=int(counts.sum()), total=total)
