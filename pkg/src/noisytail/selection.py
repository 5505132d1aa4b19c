"""Per-batch clean / confident-noisy selection from per-sample losses."""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass
class SelectionOutcome:
    threshold: float
    clean: np.ndarray  # batch positions with loss < threshold
    noisy: np.ndarray  # batch positions picked as confident noisy
    losses: np.ndarray

    def ids(self, batch_ids):
        batch_ids = np.asarray(batch_ids)
        return batch_ids[self.clean], batch_ids[self.noisy]


def between_class_variance(counts, centers):
    """Between-class variance for a split before each interior bin edge.

    Entry ``t - 1`` scores the split {bins < t} vs {bins >= t}, t = 1..bins-1.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    w0 = np.cumsum(counts)[:-1] / total
    w1 = 1.0 - w0
    m0 = np.cumsum(counts * centers)[:-1] / total
    mt = (counts * centers).sum() / total
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (mt * w0 - m0) ** 2 / (w0 * w1)
    return np.where((w0 > 0) & (w1 > 0), score, 0.0)


def otsu_threshold(losses, bins=256):
    """OTSU threshold of a 1-D sample via an equal-width histogram.

    Returns the left edge of the upper class's first bin at the split with
    the largest between-class variance (first such split on ties). An
    all-equal input (or one whose range underflows the bin width) returns
    its minimum.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.size < 2:
        raise ValueError("otsu_threshold needs at least two values")
    if not np.all(np.isfinite(losses)):
        raise ValueError("otsu_threshold needs finite values")
    lo, hi = losses.min(), losses.max()
    # a range too narrow for distinct bin edges counts as all-equal
    if lo == hi or not np.all(np.diff(np.linspace(lo, hi, bins + 1)) > 0):
        return float(lo)
    counts, edges = np.histogram(losses, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    score = between_class_variance(counts, centers)
    return float(edges[1 + int(np.argmax(score))])


def split_clean(losses, threshold):
    """Positions whose loss is strictly below ``threshold``."""
    return np.flatnonzero(np.asarray(losses) < threshold)


def pick_confident_noisy(losses, clean, kappa):
    """The ``floor(kappa * #non-clean)`` non-clean positions with largest loss.

    Ties go to the smaller position.
    """
    losses = np.asarray(losses, dtype=np.float64)
    rest = np.setdiff1d(np.arange(losses.size), clean)
    cap = int(np.floor(kappa * rest.size + 1e-9))
    if cap <= 0:
        return np.empty(0, dtype=np.int64)
    # stable sort on -loss keeps smaller positions first among equals
    order = rest[np.argsort(-losses[rest], kind="stable")]
    return np.sort(order[:cap])


def select(losses, kappa, bins=256):
    losses = np.asarray(losses, dtype=np.float64)
    eps = otsu_threshold(losses, bins)
    clean = split_clean(losses, eps)
    noisy = pick_confident_noisy(losses, clean, kappa)
    return SelectionOutcome(eps, clean, noisy, losses)
