"""Loss terms for training under label noise and class imbalance.

Functions take probability tensors of shape (n, K) and integer label arrays.
Per-sample terms return shape (n,) tensors; set-level terms return scalars.
Every log goes through :func:`tensor.log_prob`, which clamps to [1e-12, 1].
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclasses.dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    lam: float = 0.1
    kappa: float = 0.8

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be nonnegative")
        if not 0 < self.kappa < 1:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")


def _as_prob(p):
    return p if isinstance(p, Tensor) else Tensor(np.atleast_2d(np.asarray(p, dtype=np.float64)))


def _labels(y, n):
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y


def cross_entropy(p, y):
    """Per-sample ``-log p[y]``."""
    p = _as_prob(p)
    return -T.log_prob(T.gather(p, _labels(y, p.shape[0])))


def confident_class(p_weak, mode="argmax"):
    """Most confident class on the weak view (smallest index on ties).

    ``mode="argmin"`` reproduces the literal formula for fidelity experiments.
    """
    data = p_weak.data if isinstance(p_weak, Tensor) else np.atleast_2d(p_weak)
    if mode == "argmax":
        return np.argmax(data, axis=1)
    if mode == "argmin":
        return np.argmin(data, axis=1)
    raise ValueError(f"unknown target mode {mode!r}")


def matching_loss(p_weak, p_strong, y, alpha, target_mode="argmax"):
    """Per-sample cross-augmentation matching loss.

    CE(weak, y) + CE(strong, y) + alpha * CE(strong, y') with y' the weak
    view's most confident class. y' is treated as a constant.
    """
    p_weak, p_strong = _as_prob(p_weak), _as_prob(p_strong)
    y = _labels(y, p_weak.shape[0])
    y_conf = confident_class(p_weak, target_mode)
    loss = cross_entropy(p_weak, y) + cross_entropy(p_strong, y)
    if alpha:
        loss = loss + alpha * cross_entropy(p_strong, y_conf)
    return loss


def clean_loss(p_weak, p_strong, y, clean, alpha, target_mode="argmax", normalize=False):
    """Summed matching loss over the rows in ``clean`` (mean if ``normalize``)."""
    clean = np.asarray(clean, dtype=np.int64)
    if clean.size == 0:
        return Tensor(0.0)
    pw = T.take_rows(_as_prob(p_weak), clean)
    ps = T.take_rows(_as_prob(p_strong), clean)
    total = matching_loss(pw, ps, np.asarray(y)[clean], alpha, target_mode).sum()
    return total / clean.size if normalize else total


def leave_noise_out(p, y, noisy):
    """``-sum log(1 - p[y])`` over the rows in ``noisy``; pushes p[y] down."""
    noisy = np.asarray(noisy, dtype=np.int64)
    if noisy.size == 0:
        return Tensor(0.0)
    p = _as_prob(p)
    picked = T.gather(T.take_rows(p, noisy), np.asarray(y)[noisy])
    return -T.log_prob(1.0 - picked).sum()


lnor = leave_noise_out


def prior_penalty(p, q):
    """Per-sample ``-sum_k (1 - q[k]) log p[k]``."""
    p = _as_prob(p)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (p.shape[1],):
        raise ValueError(f"prior has shape {q.shape}, expected ({p.shape[1]},)")
    weight = Tensor(np.broadcast_to(1.0 - q, p.shape).copy())
    return -(T.log_prob(p) * weight).sum(axis=1)


def penalized_ce(p, y, q, lam):
    """Per-sample CE plus ``lam`` times the prior penalty."""
    loss = cross_entropy(p, y)
    return loss + lam * prior_penalty(p, q) if lam else loss


def smoothed_targets(y, q, lam, num_classes=None):
    """Soft labels equivalent to the prior penalty.

    Row i puts ``(1 + lam(1 - q[y_i])) / Z`` on its label and
    ``lam(1 - q[k]) / Z`` elsewhere, with ``Z = 1 + lam K - lam``.
    """
    q = np.asarray(q, dtype=np.float64)
    K = num_classes or q.size
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    z = 1.0 + lam * K - lam
    s = np.tile(lam * (1.0 - q) / z, (y.size, 1))
    s[np.arange(y.size), y] += 1.0 / z
    return s


def penalized_ce_smoothed(p, y, q, lam):
    """The same per-sample value rebuilt as ``Z * CE(p, s)`` from soft labels."""
    p = _as_prob(p)
    K = p.shape[1]
    s = Tensor(smoothed_targets(y, q, lam, K))
    return -(T.log_prob(p) * s).sum(axis=1) * (1.0 + lam * K - lam)


def total_loss(
    p_weak,
    p_strong,
    y,
    clean,
    noisy,
    q,
    q_hat,
    weights=LossWeights(),
    target_mode="argmax",
    use_lnor=True,
    use_prior=True,
):
    """Clean-set matching loss + leave-noise-out term + prior penalties.

    Weak views are penalized against ``q`` and strong views against ``q_hat``.
    Returns ``(L, parts)``; ``parts`` maps term names to floats.
    """
    clean = np.asarray(clean, dtype=np.int64)
    noisy = np.asarray(noisy, dtype=np.int64)
    l_c = clean_loss(p_weak, p_strong, y, clean, weights.alpha, target_mode)
    l_n = leave_noise_out(p_weak, y, noisy) if use_lnor else Tensor(0.0)
    l_v = Tensor(0.0)
    if use_prior and weights.lam and clean.size:
        v = prior_penalty(T.take_rows(p_weak, clean), q).sum() + prior_penalty(
            T.take_rows(p_strong, clean), q_hat
        ).sum()
        l_v = weights.lam * v
    total = l_c + l_n + l_v
    parts = {"clean": l_c.item(), "lnor": l_n.item(), "prior": l_v.item()}
    return total, parts
