"""Two-stage training loop.

Stage 1 (warm-up) fits weak views with prior-penalized cross entropy. Stage 2
forwards weak and strong views through their own branches, splits each batch
into clean / confident-noisy / ignored samples, and minimizes the combined
objective. Both stages use SGD with momentum under a cosine schedule that
restarts at the stage boundary.

The trainer only ever sees a :class:`~noisytail.data.TrainView`, so true
labels and the noise mask cannot leak into training.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import criteria
from . import tensor as T
from .augment import AugConfig, augment_batch
from .criteria import LossWeights
from .model import Network, export_weights, import_weights
from .selection import select

log = logging.getLogger(__name__)

WARMUP, MAIN = "warmup", "main"


class TrainingError(RuntimeError):
    """A training step produced a non-finite loss."""


@dataclasses.dataclass
class TrainConfig:
    epochs_warmup: int = 10
    epochs_main: int = 10
    batch_size: int = 128
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha: float = 2.0
    kappa: float = 0.8
    tau: float = 0.5
    lam: float = 0.1
    seed: int = 0
    arch: str = "cnn"
    widths: tuple = ()
    pool: str = "gap"
    # method switches; all off reproduces plain cross entropy
    caug_matching: bool = True
    lnor: bool = True
    opp: bool = True
    target_mode: str = "argmax"
    normalize: str = "mean"  # "mean": divide the batch loss by n; "sum": raw sums
    otsu_bins: int = 256
    # "weak": warm-up sees weak views only; "both": strong views also train
    # the strong branch with the same objective
    warmup_views: str = "weak"
    aug: AugConfig = dataclasses.field(default_factory=AugConfig)

    def __post_init__(self):
        if self.epochs_warmup < 0 or self.epochs_main < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.warmup_views not in ("weak", "both"):
            raise ValueError("warmup_views must be 'weak' or 'both'")
        if self.normalize not in ("mean", "sum"):
            raise ValueError("normalize must be 'mean' or 'sum'")
        self.loss_weights()  # validates alpha, lam, kappa

    def loss_weights(self):
        return LossWeights(self.alpha, self.lam if self.opp else 0.0, self.kappa)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["aug"]["pool"] = list(self.aug.pool)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        aug = dict(d.pop("aug", {}))
        if "pool" in aug:
            aug["pool"] = tuple(aug["pool"])
        d["widths"] = tuple(d.get("widths", ()))
        return cls(aug=AugConfig(**aug), **d)


@dataclasses.dataclass
class PriorState:
    q: np.ndarray
    q_hat: np.ndarray
    tau: float = 0.5

    @classmethod
    def from_counts(cls, counts, tau=0.5):
        counts = np.asarray(counts, dtype=np.float64)
        q = counts / counts.sum()
        return cls(q.copy(), q.copy(), tau)


def update_prior(state, batch_mean, which="q"):
    """Exponential moving average step ``prior <- (1 - tau) prior + tau mean``."""
    if which not in ("q", "q_hat"):
        raise ValueError(f"which must be 'q' or 'q_hat', got {which!r}")
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    new = (1.0 - state.tau) * getattr(state, which) + state.tau * batch_mean
    setattr(state, which, new)
    return state


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    """Heavy-ball SGD: ``v <- m v + g``, ``w <- w - lr v``."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def sgd_step(params, grads, velocity, lr, momentum=0.9):
    """Functional form of one SGD step on plain arrays; returns ``(params, velocity)``."""
    new_v = {k: momentum * velocity[k] + grads[k] for k in params}
    return {k: params[k] - lr * new_v[k] for k in params}, new_v


@dataclasses.dataclass
class BatchLog:
    stage: str
    epoch: int
    lr: float
    loss: float
    ids: np.ndarray
    clean_ids: np.ndarray
    noisy_ids: np.ndarray
    threshold: float
    skipped: bool


@dataclasses.dataclass
class EpochLog:
    stage: str
    epoch: int  # global epoch index, 0-based across both stages
    lr: float
    mean_loss: float
    batches: list
    skipped_batches: int

    @property
    def n_clean(self):
        return sum(len(b.clean_ids) for b in self.batches)

    @property
    def n_noisy(self):
        return sum(len(b.noisy_ids) for b in self.batches)

    @property
    def n_seen(self):
        return sum(len(b.ids) for b in self.batches)

    def clean_ids(self):
        return np.concatenate([b.clean_ids for b in self.batches]) if self.batches else np.empty(0, int)

    def noisy_ids(self):
        return np.concatenate([b.noisy_ids for b in self.batches]) if self.batches else np.empty(0, int)


def batch_positions(n, batch_size, seed, epoch):
    """Shuffled index batches; a trailing batch smaller than 2 is dropped."""
    order = np.random.default_rng([int(seed), 7919, int(epoch)]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


class Trainer:
    def __init__(self, config, view, net=None):
        self.config = config
        self.view = view
        K = view.num_classes
        self.net = net or Network(
            config.arch, K, view.images.shape[1:], config.widths or None, seed=config.seed, pool=config.pool
        )
        self.opt = SGD(self.net.parameters(), config.momentum, config.weight_decay)
        # priors start from given-label frequencies; true counts are unobservable
        self.prior = PriorState.from_counts(np.maximum(view.label_counts(), 0), config.tau)
        self.epochs_done = 0
        self.skipped_batches = 0
        self.weights = config.loss_weights()
        self._bpe = len(batch_positions(len(view), config.batch_size, config.seed, 0))

    @property
    def total_epochs(self):
        return self.config.epochs_warmup + self.config.epochs_main

    def stage_of(self, epoch):
        return WARMUP if epoch < self.config.epochs_warmup else MAIN

    def _lr(self, epoch, batch):
        cfg = self.config
        if epoch < cfg.epochs_warmup:
            local, span = epoch, cfg.epochs_warmup
        else:
            local, span = epoch - cfg.epochs_warmup, cfg.epochs_main
        return cosine_lr(local * self._bpe + batch, span * self._bpe, cfg.lr0)

    # -- steps ---------------------------------------------------------------

    def _finish(self, loss, lr, epoch, b, parts):
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at epoch {epoch}, batch {b}, lr {lr:.3g}, terms {parts}"
            )
        self.opt.zero_grad()
        loss.backward()
        self.opt.step(lr)
        return value

    def _warmup_batch(self, pos, epoch, b):
        cfg, view = self.config, self.view
        lr = self._lr(epoch, b)
        x = augment_batch(view.images[pos], view.ids[pos], epoch, cfg.seed, cfg.aug)
        y = view.labels[pos]
        p = self.net.forward(x, "weak", "train")
        per_sample = criteria.penalized_ce(p, y, self.prior.q, self.weights.lam)
        ps = None
        if cfg.warmup_views == "both":
            xs = augment_batch(view.images[pos], view.ids[pos], epoch, cfg.seed, cfg.aug, strong=True)
            ps = self.net.forward(xs, "strong", "train")
            per_sample = per_sample + criteria.penalized_ce(ps, y, self.prior.q_hat, self.weights.lam)
        loss = per_sample.mean() if cfg.normalize == "mean" else per_sample.sum()
        value = self._finish(loss, lr, epoch, b, {"penalized_ce": loss.item()})
        update_prior(self.prior, p.data.mean(axis=0), "q")
        if ps is not None:
            update_prior(self.prior, ps.data.mean(axis=0), "q_hat")
        ids = view.ids[pos]
        return BatchLog(WARMUP, epoch, lr, value, ids, ids, np.empty(0, np.int64), float("nan"), False)

    def _main_batch(self, pos, epoch, b):
        cfg, view, w = self.config, self.view, self.weights
        lr = self._lr(epoch, b)
        ids, y = view.ids[pos], view.labels[pos]
        n = len(pos)
        xw = augment_batch(view.images[pos], ids, epoch, cfg.seed, cfg.aug)
        pw = self.net.forward(xw, "weak", "train")

        if not cfg.caug_matching:
            return self._main_batch_ce(pos, epoch, b, lr, ids, y, pw)

        xs = augment_batch(view.images[pos], ids, epoch, cfg.seed, cfg.aug, strong=True)
        ps = self.net.forward(xs, "strong", "train")
        # selection scores are detached values of this forward: no gradient
        # flows through the threshold
        scores = criteria.matching_loss(pw.data, ps.data, y, w.alpha, cfg.target_mode).data
        sel = select(scores, w.kappa, cfg.otsu_bins)
        noisy = sel.noisy if cfg.lnor else np.empty(0, np.int64)
        if sel.clean.size == 0:
            self.skipped_batches += 1
            log.debug("epoch %d batch %d: empty clean set, update skipped", epoch, b)
            return BatchLog(MAIN, epoch, lr, float("nan"), ids, ids[:0], ids[noisy], sel.threshold, True)

        loss, parts = criteria.total_loss(
            pw, ps, y, sel.clean, noisy, self.prior.q, self.prior.q_hat, w,
            cfg.target_mode, use_lnor=cfg.lnor, use_prior=cfg.opp,
        )
        if cfg.normalize == "mean":
            loss = loss / n
        value = self._finish(loss, lr, epoch, b, parts)
        update_prior(self.prior, pw.data[sel.clean].mean(axis=0), "q")
        update_prior(self.prior, ps.data[sel.clean].mean(axis=0), "q_hat")
        return BatchLog(MAIN, epoch, lr, value, ids, ids[sel.clean], ids[noisy], sel.threshold, False)

    def _main_batch_ce(self, pos, epoch, b, lr, ids, y, pw):
        # without cross-augmentation matching every sample counts as clean and
        # only the weak view is trained
        cfg = self.config
        per_sample = criteria.penalized_ce(pw, y, self.prior.q, self.weights.lam)
        loss = per_sample.mean() if cfg.normalize == "mean" else per_sample.sum()
        value = self._finish(loss, lr, epoch, b, {"ce": loss.item()})
        update_prior(self.prior, pw.data.mean(axis=0), "q")
        return BatchLog(MAIN, epoch, lr, value, ids, ids, np.empty(0, np.int64), float("nan"), False)

    # -- epochs --------------------------------------------------------------

    def run_epoch(self):
        epoch = self.epochs_done
        if epoch >= self.total_epochs:
            raise RuntimeError("training already finished")
        stage = self.stage_of(epoch)
        step = self._warmup_batch if stage == WARMUP else self._main_batch
        skipped_before = self.skipped_batches
        logs = [
            step(pos, epoch, b)
            for b, pos in enumerate(batch_positions(len(self.view), self.config.batch_size, self.config.seed, epoch))
        ]
        self.epochs_done += 1
        losses = [l.loss for l in logs if not l.skipped]
        return EpochLog(
            stage,
            epoch,
            logs[-1].lr if logs else 0.0,
            float(np.mean(losses)) if losses else float("nan"),
            logs,
            self.skipped_batches - skipped_before,
        )

    def fit(self, on_epoch=None, stop_after=None):
        """Run remaining epochs; ``on_epoch(trainer, log)`` fires after each."""
        history = []
        while self.epochs_done < self.total_epochs:
            if stop_after is not None and len(history) >= stop_after:
                break
            rec = self.run_epoch()
            history.append(rec)
            if on_epoch is not None:
                on_epoch(self, rec)
        return history

    # -- checkpoints ---------------------------------------------------------
    #
    # <dir>/weights.bin     network weight stream (model.export_weights)
    # <dir>/optimizer.npz   SGD velocity per parameter name
    # <dir>/state.json      config, epochs completed, priors, skip counter
    #
    # Augmentation and shuffling streams are keyed by (seed, epoch), so the
    # epoch counter is the whole RNG state.

    def save_checkpoint(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "weights.bin").write_bytes(export_weights(self.net))
        with open(directory / "optimizer.npz", "wb") as fh:
            np.savez(fh, **self.opt.velocity)
        state = {
            "config": self.config.to_dict(),
            "epochs_done": self.epochs_done,
            "skipped_batches": self.skipped_batches,
            "q": self.prior.q.tolist(),
            "q_hat": self.prior.q_hat.tolist(),
            "tau": self.prior.tau,
        }
        tmp = directory / "state.json.tmp"
        tmp.write_text(json.dumps(state, indent=2, sort_keys=True))
        tmp.replace(directory / "state.json")

    @classmethod
    def from_checkpoint(cls, directory, view, config=None):
        directory = Path(directory)
        state = json.loads((directory / "state.json").read_text())
        config = config or TrainConfig.from_dict(state["config"])
        net = import_weights((directory / "weights.bin").read_bytes())
        trainer = cls(config, view, net)
        with np.load(directory / "optimizer.npz") as z:
            for name in trainer.opt.velocity:
                trainer.opt.velocity[name] = z[name].copy()
        trainer.epochs_done = int(state["epochs_done"])
        trainer.skipped_batches = int(state["skipped_batches"])
        trainer.prior = PriorState(np.array(state["q"]), np.array(state["q_hat"]), float(state["tau"]))
        return trainer


def warmup_stage(config, view, trainer=None, on_epoch=None):
    """Run only the warm-up epochs; returns ``(trainer, history)``."""
    trainer = trainer or Trainer(config, view)
    history = trainer.fit(on_epoch, stop_after=max(config.epochs_warmup - trainer.epochs_done, 0))
    return trainer, history


def main_stage(config, view, trainer=None, on_epoch=None):
    """Run the remaining (selection-driven) epochs; returns ``(trainer, history)``."""
    trainer = trainer or Trainer(config, view)
    if trainer.epochs_done < config.epochs_warmup:
        raise RuntimeError("warm-up has not finished")
    return trainer, trainer.fit(on_epoch)


def score_samples(net, view, config, epoch_key=10_000, batch_size=256):
    """Per-sample (CE on weak, matching loss) over a whole training view.

    Uses batch statistics of each branch without touching running stats, so
    scoring never changes the model.
    """
    ce, match = [], []
    order = np.arange(len(view))
    for i in range(0, len(view), batch_size):
        pos = order[i : i + batch_size]
        if len(pos) < 2:
            pos = order[max(0, i - 1) : i + batch_size]
        xw = augment_batch(view.images[pos], view.ids[pos], epoch_key, config.seed, config.aug)
        xs = augment_batch(view.images[pos], view.ids[pos], epoch_key, config.seed, config.aug, strong=True)
        pw = net.forward(xw, "weak", "train", track_stats=False).data
        ps = net.forward(xs, "strong", "train", track_stats=False).data
        y = view.labels[pos]
        c = criteria.cross_entropy(pw, y).data
        m = criteria.matching_loss(pw, ps, y, config.alpha, config.target_mode).data
        take = slice(len(pos) - len(order[i : i + batch_size]), None)
        ce.append(c[take])
        match.append(m[take])
    return np.concatenate(ce), np.concatenate(match)
