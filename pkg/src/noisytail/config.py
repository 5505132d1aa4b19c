"""Run configuration: one flat set of keys shared by config files and CLI flags.

File format: one ``key = value`` per line, ``#`` starts a comment, blank lines
are ignored. Lists are comma-separated. Booleans accept true/false, yes/no,
on/off, 1/0. Resolution order is defaults, then file, then flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .augment import POOL, AugConfig
from .data import NOISE_KINDS, ConfigError
from .trainer import TrainConfig


@dataclasses.dataclass
class RunConfig:
    # data source and synthesis
    source: str = "blobs"
    idx_images: str = ""
    idx_labels: str = ""
    subset: int = 0
    blobs_classes: int = 10
    blobs_per_class: int = 200
    blobs_dim: int = 64
    blobs_spread: float = 0.5
    test_per_class: int = 100
    rho: float = 0.1
    eta: float = 0.2
    noise_kind: str = "class_independent"
    data_seed: int = 0
    data: str = "data"
    # training
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
    arch: str = "mlp"
    widths: tuple = ()
    pool: str = "gap"
    caug_matching: bool = True
    lnor: bool = True
    opp: bool = True
    target_mode: str = "argmax"
    normalize: str = "mean"
    otsu_bins: int = 256
    warmup_views: str = "weak"
    # augmentation
    aug_pad: int = 2
    aug_flips: bool = False
    aug_ops: tuple = POOL
    aug_n_ops: int = 1
    aug_magnitude: float = 0.5
    aug_cutout: int = 4
    # run bookkeeping
    seeds: tuple = (0,)
    out: str = "runs/default"
    track_separation: bool = True
    hist_bins: int = 30

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.source not in ("blobs", "idx"):
            raise ConfigError(f"source must be 'blobs' or 'idx', got {self.source!r}")
        if self.source == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("source=idx needs idx_images and idx_labels")
        if not 0 < self.rho <= 1:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0 <= self.eta <= 1:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}, got {self.noise_kind!r}")
        if self.subset < 0 or self.test_per_class < 1:
            raise ConfigError("subset must be >= 0 and test_per_class >= 1")
        if not self.seeds:
            raise ConfigError("seeds must name at least one seed")
        if self.hist_bins < 2:
            raise ConfigError("hist_bins must be at least 2")
        unknown = set(self.aug_ops) - set(POOL)
        if unknown:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}; choose from {POOL}")
        if not 0 <= self.aug_n_ops <= len(self.aug_ops):
            raise ConfigError("aug_n_ops must lie between 0 and the number of aug_ops")
        try:
            self.train_config(self.seeds[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def aug_config(self):
        return AugConfig(
            pad=self.aug_pad,
            flips_enabled=self.aug_flips,
            pool=tuple(self.aug_ops),
            n_ops=self.aug_n_ops,
            magnitude=self.aug_magnitude,
            cutout=self.aug_cutout,
        )

    def train_config(self, seed):
        names = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "aug"}
        kw = {n: getattr(self, n) for n in names}
        return TrainConfig(seed=int(seed), aug=self.aug_config(), **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def hash(self):
        return config_hash(self)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

KEY_HELP = {
    "source": "dataset source: blobs or idx",
    "idx_images": "IDX image file (optionally .gz) when source=idx",
    "idx_labels": "IDX label file (optionally .gz) when source=idx",
    "subset": "random subset size drawn before splitting (0 keeps everything)",
    "blobs_classes": "number of blob classes",
    "blobs_per_class": "blob training samples per class (test samples are drawn on top)",
    "blobs_dim": "blob dimension (a perfect square gives square images)",
    "blobs_spread": "per-pixel noise of blob samples",
    "test_per_class": "balanced test samples held out per class",
    "rho": "imbalance ratio, min/max class count, in (0, 1]",
    "eta": "label noise rate in [0, 1]",
    "noise_kind": "none, class_independent or class_dependent",
    "data_seed": "seed for subset, split, long-tail resampling and noise",
    "data": "dataset directory written by synth and read by train/eval",
    "epochs_warmup": "warm-up epochs",
    "epochs_main": "selection-stage epochs",
    "batch_size": "mini-batch size",
    "lr0": "initial learning rate of each cosine stage",
    "momentum": "SGD momentum",
    "weight_decay": "L2 weight decay",
    "alpha": "weight of the confident-class term in the matching loss",
    "kappa": "confident-noisy fraction of the non-clean samples, in (0, 1)",
    "tau": "EMA rate of the prior estimates",
    "lam": "prior-penalty weight",
    "arch": "cnn or mlp",
    "widths": "layer widths (cnn: two channel counts; mlp: hidden sizes)",
    "pool": "cnn pooling: gap or avgflat",
    "caug_matching": "select clean samples with the cross-augmentation matching loss",
    "lnor": "leave-noise-out penalty on confident-noisy samples",
    "opp": "online prior penalty",
    "target_mode": "confident class from the weak view: argmax or argmin",
    "normalize": "batch loss reduction: mean or sum",
    "otsu_bins": "histogram bins for the OTSU threshold",
    "warmup_views": "weak, or both to also train the strong branch during warm-up",
    "aug_pad": "reflect padding for random crops",
    "aug_flips": "random horizontal flips in the weak view",
    "aug_ops": "strong-view operation pool",
    "aug_n_ops": "operations applied per strong view",
    "aug_magnitude": "strong-view magnitude scale",
    "aug_cutout": "cutout square side (0 disables)",
    "seeds": "training seeds; several give mean and stdev",
    "out": "run output directory",
    "track_separation": "score every training sample each epoch for AUROC columns",
    "hist_bins": "bins of the loss histograms",
}

METHODS = {
    "ce": dict(caug_matching=False, lnor=False, opp=False),
    "caug": dict(caug_matching=True, lnor=False, opp=False),
    "caug_lnor": dict(caug_matching=True, lnor=True, opp=False),
    "full": dict(caug_matching=True, lnor=True, opp=True),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_value(key, text):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if key in ("widths", "seeds"):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_text(text, origin="<config>"):
    """Parse key = value lines into a dict of typed values."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return out


def load_file(path):
    path = Path(path)
    return parse_text(path.read_text(), str(path))


def resolve(file_values=None, flag_values=None, method=None):
    """Defaults < file < method preset < explicit flags."""
    values = {}
    values.update(file_values or {})
    if method is not None:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
        values.update(METHODS[method])
    values.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    unknown = set(values) - set(FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**values)


# where files live does not change what a run computes
_UNHASHED = ("out", "data")


def config_hash(cfg):
    d = {k: v for k, v in cfg.to_dict().items() if k not in _UNHASHED}
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def from_dict(d):
    d = {k: tuple(v) if isinstance(FIELDS[k].default, tuple) else v for k, v in d.items()}
    return RunConfig(**d)
