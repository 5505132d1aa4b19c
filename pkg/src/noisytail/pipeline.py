"""End-to-end runs: build a dataset, train per seed, evaluate, sweep, report.

This is the only layer that holds both the trainer and the ground truth. The
trainer gets a :class:`~noisytail.data.TrainView`; accuracy, selection quality
and loss separation are computed here from the bundle, after each epoch.

Dataset directory (``synth``)::

    train.npz / train.json   training bundle (noisy given labels)
    test.npz / test.json     balanced clean test bundle
    config.txt               the resolved configuration used to build it

Run directory (``train``)::

    summary.json             mean and stdev over seeds, config, config hash
    seed-<s>/                metrics.csv, timings.csv, summary.json,
                             histograms/, checkpoint/
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import statistics
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import eval_report as R
from .model import WeightsError, import_weights
from .trainer import MAIN, WARMUP, Trainer, score_samples

log = logging.getLogger(__name__)

SUMMARY_SCHEMA = "noisytail-summary/1"
HEADLINE = ("test_accuracy", "tail_accuracy", "auroc_matching", "auroc_ce", "clean_precision", "clean_recall")


# -- datasets ------------------------------------------------------------------


def build_dataset(cfg):
    """Source -> optional subset -> balanced test split -> long tail -> noise."""
    if cfg.source == "blobs":
        full = D.make_blobs(
            cfg.blobs_classes,
            cfg.blobs_per_class + cfg.test_per_class,
            dim=cfg.blobs_dim,
            spread=cfg.blobs_spread,
            seed=cfg.data_seed,
        )
    else:
        full = D.load_idx(cfg.idx_images, cfg.idx_labels)
    if cfg.subset and cfg.subset < len(full):
        rng = np.random.default_rng([cfg.data_seed, 1])
        full = full.subset(np.sort(rng.choice(len(full), cfg.subset, replace=False)))
    train, test = D.stratified_split(full, cfg.test_per_class, seed=cfg.data_seed)
    if cfg.rho < 1:
        train = D.apply_longtail(train, cfg.rho, seed=cfg.data_seed)
    train = D.inject_noise(train, cfg.noise_kind, cfg.eta, seed=cfg.data_seed)
    return train, test


def write_dataset(cfg, train, test):
    out = Path(cfg.data)
    D.save_bundle(train, out / "train")
    D.save_bundle(test, out / "test")
    (out / "config.txt").write_text(cfg.to_text())
    return out


def read_dataset(data_dir):
    data_dir = Path(data_dir)
    if not (data_dir / "train.json").exists():
        raise FileNotFoundError(f"no dataset at {data_dir} (run synth first)")
    return D.load_bundle(data_dir / "train"), D.load_bundle(data_dir / "test")


def synth(cfg):
    train, test = build_dataset(cfg)
    return write_dataset(cfg, train, test), train, test


# -- one training run ----------------------------------------------------------


class RunObserver:
    """Computes a MetricsRecord after each epoch from ground truth the trainer never sees."""

    def __init__(self, cfg, train, test, tc):
        self.cfg = cfg
        self.train = train
        self.test = test
        self.tc = tc
        self.view = train.training_view()
        self.mask = train.noise_mask
        self.tail = R.tail_classes(train.class_counts)
        self.histograms = {}
        self.overlaps = {}

    def record(self, trainer, rec):
        K = self.train.num_classes
        pred = np.argmax(trainer.net.predict_proba(self.test.images), axis=1)
        per_class = R.classwise_from_predictions(pred, self.test.true_labels, K)
        r = R.MetricsRecord(
            epoch=rec.epoch,
            stage=rec.stage,
            lr=rec.lr,
            train_loss=rec.mean_loss,
            test_accuracy=float(np.mean(pred == self.test.true_labels)),
            tail_accuracy=float(np.nanmean(per_class[self.tail])),
            per_class_accuracy=per_class,
            skipped_batches=rec.skipped_batches,
        )
        if rec.stage == MAIN and rec.batches:
            seen = np.isin(self.train.ids, np.concatenate([b.ids for b in rec.batches]))
            clean = np.isin(self.train.ids, rec.clean_ids())
            m = R.noise_detection_metrics(None, self.mask[seen], clean[seen])
            r.clean_precision = _nan(m["precision"])
            r.clean_recall = _nan(m["recall"])
            r.selection_accuracy = _nan(m["accuracy"])
            r.mean_clean = rec.n_clean / len(rec.batches)
            r.mean_noisy = rec.n_noisy / len(rec.batches)
        if self.cfg.track_separation and (self.cfg.eta > 0 or self.cfg.noise_kind != "none"):
            ce, match = score_samples(trainer.net, self.view, self.tc, epoch_key=10_000 + rec.epoch)
            r.auroc_ce = R.auroc(ce, self.mask)
            r.auroc_matching = R.auroc(match, self.mask)
            last_warmup = rec.stage == WARMUP and rec.epoch == self.tc.epochs_warmup - 1
            last = rec.epoch == self.tc.epochs_warmup + self.tc.epochs_main - 1
            for tag, flag in (("warmup", last_warmup), ("final", last)):
                if flag:
                    self._histograms(tag, ce, match)
        return r

    def _histograms(self, tag, ce, match):
        labels = self.view.labels
        for name, losses in (("ce", ce), ("matching", match)):
            h = R.loss_histogram(losses, self.mask, labels, self.tail, self.cfg.hist_bins)
            self.histograms[f"{tag}_{name}"] = h
            self.overlaps[f"{tag}_{name}"] = R.overlap_coefficient(h.counts["noisy"], h.counts["clean_tail"])


def _nan(v):
    return float("nan") if v is None else float(v)


def _record_dict(r):
    d = {c: getattr(r, c) for c in R.METRIC_COLUMNS}
    d["per_class_accuracy"] = r.per_class_accuracy
    return d


def run_seed(cfg, seed, run_dir, train=None, test=None, resume=False, stop_after=None):
    """Train one seed into ``run_dir``; returns the per-seed summary dict."""
    run_dir = Path(run_dir)
    if train is None:
        train, test = read_dataset(cfg.data)
    tc = cfg.train_config(seed)
    view = train.training_view()
    ckpt = run_dir / "checkpoint"
    records, timings = [], []
    obs = RunObserver(cfg, train, test, tc)
    if resume and (ckpt / "state.json").exists():
        trainer = Trainer.from_checkpoint(ckpt, view, tc)
        records = R.read_metrics(run_dir / "metrics.csv")[: trainer.epochs_done]
        timings = _read_timings(run_dir / "timings.csv")[: trainer.epochs_done]
        prior = _read_json(run_dir / "summary.json")
        obs.overlaps.update(prior.get("overlap", {}))
    else:
        trainer = Trainer(tc, view)
    hash_ = C.config_hash(cfg)
    t0 = time.perf_counter()

    def summary():
        final = records[-1] if records else None
        return {
            "schema": SUMMARY_SCHEMA,
            "config": cfg.to_dict(),
            "config_hash": hash_,
            "seed": int(seed),
            "epochs_done": trainer.epochs_done,
            "complete": trainer.epochs_done == trainer.total_epochs,
            "final": _record_dict(final) if final else None,
            "overlap": obs.overlaps,
            "tail_classes": obs.tail,
            "train_class_counts": train.class_counts,
            "noise_fraction": float(np.mean(train.noise_mask)),
        }

    def on_epoch(t, rec):
        records.append(obs.record(t, rec))
        timings.append((rec.epoch, time.perf_counter() - t0))
        t.save_checkpoint(ckpt)
        R.emit(run_dir, records, train.num_classes, summary(), obs.histograms, timings, hash_)
        log.info(
            "seed %s epoch %d [%s] loss %.4f acc %.4f tail %.4f",
            seed, rec.epoch, rec.stage, rec.mean_loss, records[-1].test_accuracy, records[-1].tail_accuracy,
        )

    trainer.fit(on_epoch, stop_after=stop_after)
    out = summary()
    R.emit(run_dir, records, train.num_classes, out, obs.histograms, timings, hash_)
    return out


def _read_timings(path):
    if not Path(path).exists():
        return []
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    rows = list(csv.reader(lines))[1:]
    return [(int(e), float(t)) for e, t in rows]


def _read_json(path):
    path = Path(path)
    return json.loads(path.read_text()) if path.exists() else {}


def aggregate(summaries):
    """Mean and sample stdev of the headline metrics over per-seed summaries."""
    out = {}
    for key in HEADLINE:
        vals = [s["final"][key] for s in summaries if s.get("final") and _finite(s["final"].get(key))]
        if not vals:
            out[key] = {"mean": None, "stdev": None, "n": 0}
            continue
        out[key] = {
            "mean": statistics.fmean(vals),
            "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0,
            "n": len(vals),
        }
    return out


def _finite(v):
    return v is not None and not (isinstance(v, float) and math.isnan(v))


def train_run(cfg, resume=False, stop_after=None):
    """Train every seed in ``cfg.seeds`` under ``cfg.out``; returns the aggregate summary."""
    train, test = read_dataset(cfg.data)
    out = Path(cfg.out)
    per_seed = [
        run_seed(cfg, s, out / f"seed-{s}", train, test, resume=resume, stop_after=stop_after) for s in cfg.seeds
    ]
    summary = {
        "schema": SUMMARY_SCHEMA,
        "config": cfg.to_dict(),
        "config_hash": C.config_hash(cfg),
        "seeds": list(cfg.seeds),
        "complete": all(s["complete"] for s in per_seed),
        "metrics": aggregate(per_seed),
    }
    R.write_atomic(out / "summary.json", R.summary_json(summary))
    return summary


# -- evaluation ----------------------------------------------------------------


def evaluate(run_dir, data_dir=None):
    """Reload a run's checkpoint and score it on the test set."""
    run_dir = Path(run_dir)
    weights = run_dir / "checkpoint" / "weights.bin"
    if not weights.exists():
        raise FileNotFoundError(f"no checkpoint at {weights}")
    summary = _read_json(run_dir / "summary.json")
    if data_dir is None:
        data_dir = summary.get("config", {}).get("data")
    if data_dir is None:
        raise FileNotFoundError(f"{run_dir}: no dataset given and none recorded in summary.json")
    train, test = read_dataset(data_dir)
    net = import_weights(weights.read_bytes())
    if net.num_classes != test.num_classes or tuple(net.input_shape) != tuple(test.image_shape):
        raise WeightsError(
            f"checkpoint expects {net.num_classes} classes of shape {net.input_shape}, "
            f"dataset has {test.num_classes} of shape {test.image_shape}"
        )
    pred = R.predict(net, test.images)
    per_class = R.classwise_from_predictions(pred, test.true_labels, test.num_classes)
    tail = R.tail_classes(train.class_counts)
    result = {
        "test_accuracy": float(np.mean(pred == test.true_labels)),
        "tail_accuracy": float(np.nanmean(per_class[tail])),
        "per_class_accuracy": per_class,
        "n_test": len(test),
    }
    if summary:
        summary["eval"] = result
        R.write_atomic(run_dir / "summary.json", R.summary_json(summary))
    return result


# -- sweeps and reports --------------------------------------------------------


SWEEP_COLUMNS = ("cell", "seed", "status", "config_hash") + HEADLINE + ("error",)


def parse_grid(items):
    """``["alpha=1,2", "lam=0.05,0.1"]`` -> {"alpha": [1.0, 2.0], "lam": [0.05, 0.1]}."""
    grid = {}
    for item in items:
        if "=" not in item:
            raise C.ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        key, vals = (s.strip() for s in item.split("=", 1))
        values = [C.parse_value(key, v) for v in vals.split(";" if C.FIELDS.get(key) and isinstance(C.FIELDS[key].default, tuple) else ",")]
        if not values:
            raise C.ConfigError(f"grid key {key!r} has no values")
        grid[key] = values
    return grid


def sweep(cfg, grid):
    """Run every grid cell for every seed; failures are recorded, not raised."""
    keys = sorted(grid)
    out = Path(cfg.out)
    rows = []
    train, test = read_dataset(cfg.data)
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = "_".join(f"{k}={C.format_value(v)}" for k, v in zip(keys, combo)) or "base"
        try:
            cell_cfg = dataclasses.replace(cfg, out=str(out / cell), **dict(zip(keys, combo)))
        except ValueError as exc:
            rows += [_sweep_row(cell, s, keys, combo, None, exc) for s in cfg.seeds]
            continue
        for s in cell_cfg.seeds:
            try:
                res = run_seed(cell_cfg, s, Path(cell_cfg.out) / f"seed-{s}", train, test)
                rows.append(_sweep_row(cell, s, keys, combo, res, None, cell_cfg.hash()))
            except Exception as exc:  # noqa: BLE001 - one bad cell must not end the sweep
                log.warning("sweep cell %s seed %s failed: %s", cell, s, exc)
                rows.append(_sweep_row(cell, s, keys, combo, None, exc))
    header = list(SWEEP_COLUMNS[:4]) + keys + list(SWEEP_COLUMNS[4:])
    buf = io.StringIO()
    w = csv.DictWriter(buf, header, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.mkdir(parents=True, exist_ok=True)
    R.write_atomic(out / "sweep.csv", buf.getvalue())
    return rows


def _sweep_row(cell, seed, keys, combo, result, error, config_hash=""):
    row = {"cell": cell, "seed": seed, "status": "ok" if error is None else "error", "config_hash": config_hash}
    row.update({k: C.format_value(v) for k, v in zip(keys, combo)})
    final = (result or {}).get("final") or {}
    for key in HEADLINE:
        v = final.get(key)
        row[key] = "" if v is None else repr(float(v))
    row["error"] = "" if error is None else f"{type(error).__name__}: {error}"
    return row


def report(run_dirs):
    """One row per run directory from its summary.json (aggregate or single seed)."""
    rows = []
    for d in run_dirs:
        s = _read_json(Path(d) / "summary.json")
        if not s:
            raise FileNotFoundError(f"no summary.json in {d}")
        row = {"run": str(d), "config_hash": s.get("config_hash", ""), "complete": s.get("complete")}
        if "metrics" in s:
            for key in HEADLINE:
                m = s["metrics"][key]
                row[key] = m["mean"]
                row[key + "_sd"] = m["stdev"]
        else:
            for key in HEADLINE:
                row[key] = (s.get("final") or {}).get(key)
        rows.append(row)
    return rows


def format_report(rows):
    cols = ["run"] + [k for k in HEADLINE]
    lines = ["\t".join(cols)]
    for r in rows:
        cells = [r["run"]]
        for k in HEADLINE:
            v, sd = r.get(k), r.get(k + "_sd")
            if v is None:
                cells.append("n/a")
            elif sd is not None:
                cells.append(f"{v:.4f}±{sd:.4f}")
            else:
                cells.append(f"{v:.4f}")
        lines.append("\t".join(cells))
    return "\n".join(lines)
