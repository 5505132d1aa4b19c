"""Accuracy, noise-detection quality, loss histograms and result files.

Everything here reads true labels or the noise mask, so none of it is ever
called from inside the trainer.

Run directory layout written by :func:`emit`::

    metrics.csv        one row per epoch, columns METRIC_COLUMNS + acc_class_<k>
    timings.csv        epoch, wall_seconds (kept apart so metrics.csv is
                       byte-reproducible)
    summary.json       final metrics, resolved config, config hash, seed
    histograms/*.csv   bin_left, bin_right, clean_head, clean_tail, noisy

Each CSV starts with ``#`` comment lines (schema, config hash) before its header.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

METRICS_SCHEMA = "noisytail-metrics/1"
METRIC_COLUMNS = (
    "epoch",
    "stage",
    "lr",
    "train_loss",
    "test_accuracy",
    "tail_accuracy",
    "clean_precision",
    "clean_recall",
    "selection_accuracy",
    "auroc_matching",
    "auroc_ce",
    "mean_clean",
    "mean_noisy",
    "skipped_batches",
)
HIST_PARTS = ("clean_head", "clean_tail", "noisy")


# -- accuracy ------------------------------------------------------------------


def predict(model, images, batch_size=512):
    """Eval-mode weak-branch class predictions (argmax, lowest index on ties)."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty test set")
    return np.argmax(model.predict_proba(images, batch_size), axis=1)


def accuracy(model, images, labels):
    labels = np.asarray(labels)
    return float(np.mean(predict(model, images) == labels))


def classwise_accuracy(model, images, labels, num_classes=None):
    """Per-true-class accuracy; classes absent from the test set give nan."""
    labels = np.asarray(labels)
    pred = predict(model, images)
    return classwise_from_predictions(pred, labels, num_classes or model.num_classes)


def classwise_from_predictions(pred, labels, num_classes):
    hits = np.bincount(labels, weights=(pred == labels).astype(float), minlength=num_classes)
    totals = np.bincount(labels, minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, hits / np.maximum(totals, 1), np.nan)


def tail_classes(train_counts, fraction=0.3):
    """Bottom ``fraction`` of classes by training count (at least one).

    Equal counts are ordered toward the larger class index, matching the
    head-first layout of the long-tail profile.
    """
    counts = np.asarray(train_counts)
    k = max(1, int(math.floor(fraction * len(counts) + 1e-9)))
    order = np.lexsort((-np.arange(len(counts)), counts))
    return np.sort(order[:k])


# -- noise detection -----------------------------------------------------------


def auroc(scores, positive):
    """Probability that a random positive outscores a random negative.

    Computed from average ranks, so ties count one half. Returns nan when
    either class is empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def noise_detection_metrics(scores=None, mask=None, clean=None):
    """Separation quality of per-sample scores and of a chosen clean set.

    ``mask`` marks noisy samples; ``clean`` is a boolean array marking the
    samples selected as clean. Without a mask every metric is ``None``
    (unavailable), never zero.
    """
    out = {"auroc": None, "precision": None, "recall": None, "accuracy": None}
    if mask is None:
        return out
    mask = np.asarray(mask, dtype=bool)
    if scores is not None:
        a = auroc(scores, mask)
        out["auroc"] = None if math.isnan(a) else a
    if clean is not None:
        clean = np.asarray(clean, dtype=bool)
        truly_clean = ~mask
        tp = int(np.sum(clean & truly_clean))
        out["precision"] = tp / int(clean.sum()) if clean.any() else None
        out["recall"] = tp / int(truly_clean.sum()) if truly_clean.any() else None
        out["accuracy"] = float(np.mean(clean == truly_clean))
    return out


# -- histograms ----------------------------------------------------------------


@dataclasses.dataclass
class LossHistogram:
    edges: np.ndarray
    counts: dict  # part name -> (bins,) int array

    def total(self):
        return sum(int(c.sum()) for c in self.counts.values())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("bin_left", "bin_right") + HIST_PARTS)
        for i in range(len(self.edges) - 1):
            w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1]))] + [int(self.counts[p][i]) for p in HIST_PARTS])
        return buf.getvalue()


def loss_histogram(losses, mask, labels, tail, bins=30):
    """Equal-width histogram of ``losses`` split into clean-head, clean-tail and noisy.

    ``labels`` are the given labels; a clean sample is "tail" when its label
    is in ``tail``.
    """
    if bins < 1:
        raise ValueError("bins must be positive")
    losses = np.asarray(losses, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    in_tail = np.isin(labels, tail)
    lo, hi = float(losses.min()), float(losses.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    parts = {
        "clean_head": ~mask & ~in_tail,
        "clean_tail": ~mask & in_tail,
        "noisy": mask,
    }
    counts = {name: np.histogram(losses[sel], bins=edges)[0] for name, sel in parts.items()}
    return LossHistogram(edges, counts)


def overlap_coefficient(a, b):
    """Shared mass of two histograms after normalizing each to sum 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.sum() == 0 or b.sum() == 0:
        return float("nan")
    return float(np.minimum(a / a.sum(), b / b.sum()).sum())


# -- records and emission ------------------------------------------------------


@dataclasses.dataclass
class MetricsRecord:
    epoch: int
    stage: str
    lr: float
    train_loss: float
    test_accuracy: float
    tail_accuracy: float
    per_class_accuracy: np.ndarray
    clean_precision: float = float("nan")
    clean_recall: float = float("nan")
    selection_accuracy: float = float("nan")
    auroc_matching: float = float("nan")
    auroc_ce: float = float("nan")
    mean_clean: float = float("nan")
    mean_noisy: float = float("nan")
    skipped_batches: int = 0

    def row(self):
        vals = [getattr(self, c) for c in METRIC_COLUMNS]
        vals += list(self.per_class_accuracy)
        return [_fmt(v) for v in vals]

    @classmethod
    def from_row(cls, row, num_classes):
        fixed = dict(zip(METRIC_COLUMNS, row))
        kw = {c: float(fixed[c]) for c in METRIC_COLUMNS if c not in ("epoch", "stage", "skipped_batches")}
        return cls(
            epoch=int(fixed["epoch"]),
            stage=fixed["stage"],
            skipped_batches=int(fixed["skipped_batches"]),
            per_class_accuracy=np.array([float(v) for v in row[len(METRIC_COLUMNS) :]]),
            **kw,
        )


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_header(num_classes):
    return list(METRIC_COLUMNS) + [f"acc_class_{k}" for k in range(num_classes)]


def _hash_line(config_hash):
    return f"# config_hash: {config_hash}\n" if config_hash else ""


def metrics_csv(records, num_classes, config_hash=None):
    buf = io.StringIO()
    buf.write(f"# schema: {METRICS_SCHEMA}\n")
    buf.write(_hash_line(config_hash))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(num_classes))
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_metrics(path):
    """Parse a metrics.csv back into records."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != f"# schema: {METRICS_SCHEMA}":
        raise ValueError(f"{path}: missing or unknown schema line")
    rows = list(csv.reader(l for l in lines[1:] if not l.startswith("#")))
    header, body = rows[0], rows[1:]
    k = len(header) - len(METRIC_COLUMNS)
    return [MetricsRecord.from_row(r, k) for r in body]


def write_atomic(path, text):
    """Write through a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if math.isnan(f) else f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def summary_json(summary):
    return json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n"


def emit(run_dir, records, num_classes, summary=None, histograms=None, timings=None, config_hash=None):
    """Write the run's result files. Same inputs give byte-identical files.

    With ``config_hash`` given, every CSV opens with a ``# config_hash:`` line.
    """
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create run directory {run_dir}: {exc.strerror or exc}") from exc
    tag = _hash_line(config_hash)
    write_atomic(run_dir / "metrics.csv", metrics_csv(records, num_classes, config_hash))
    if timings is not None:
        write_atomic(run_dir / "timings.csv", tag + "epoch,wall_seconds\n" + "".join(f"{e},{t:.3f}\n" for e, t in timings))
    if histograms:
        (run_dir / "histograms").mkdir(exist_ok=True)
        for name, hist in sorted(histograms.items()):
            write_atomic(run_dir / "histograms" / f"{name}.csv", tag + hist.to_csv())
    if summary is not None:
        write_atomic(run_dir / "summary.json", summary_json(summary))
