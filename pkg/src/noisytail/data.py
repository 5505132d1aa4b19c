"""Datasets: IDX loading, synthetic blobs, long-tail resampling, label noise.

A :class:`DatasetBundle` keeps images and both label columns side by side.
``true_labels`` and the noise mask are evaluation-only; the trainer receives a
:class:`TrainView` that carries neither.
"""

from __future__ import annotations

import dataclasses
import gzip
import json
import struct
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NOISE_KINDS = ("none", "class_independent", "class_dependent")
BUNDLE_FORMAT = "noisytail-bundle/1"


class IDXError(ValueError):
    """Malformed IDX input."""


class ConfigError(ValueError):
    """Invalid synthesis parameters."""


@dataclasses.dataclass
class DatasetBundle:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    given_labels: np.ndarray  # (N,) int64
    true_labels: np.ndarray  # (N,) int64
    ids: np.ndarray  # (N,) int64, stable across resampling and noise
    num_classes: int
    rho: float = 1.0
    eta: float = 0.0
    noise_kind: str = "none"
    seed: int | None = None

    def __len__(self):
        return len(self.given_labels)

    @property
    def noise_mask(self):
        return self.given_labels != self.true_labels

    @property
    def class_counts(self):
        """Per-class sample counts by true label."""
        return np.bincount(self.true_labels, minlength=self.num_classes)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return dataclasses.replace(
            self,
            images=self.images[positions],
            given_labels=self.given_labels[positions],
            true_labels=self.true_labels[positions],
            ids=self.ids[positions],
        )

    def training_view(self):
        return TrainView(self.images, self.given_labels.copy(), self.ids.copy(), self.num_classes)

    def sidecar(self):
        return {
            "format": BUNDLE_FORMAT,
            "K": int(self.num_classes),
            "class_counts": [int(c) for c in self.class_counts],
            "rho": float(self.rho),
            "eta": float(self.eta),
            "noise_kind": self.noise_kind,
            "seed": self.seed,
            "n_samples": len(self),
            "image_shape": [int(s) for s in self.image_shape],
        }


@dataclasses.dataclass(frozen=True)
class TrainView:
    """What the trainer is allowed to see: images, given labels, ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def label_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


# -- IDX ------------------------------------------------------------------------


def _open_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, what):
    if len(raw) < 4:
        raise IDXError(f"{what}: magic: file shorter than 4 bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXError(f"{what}: magic: expected 0x{expected_magic:08x}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError(f"{what}: dimensions: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise IDXError(f"{what}: data: expected {expected} bytes for dims {dims}, found {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path):
    return _parse_idx(_open_bytes(path), IDX_IMAGES_MAGIC, "images")


def read_idx_labels(path):
    return _parse_idx(_open_bytes(path), IDX_LABELS_MAGIC, "labels")


def write_idx(path, array):
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def load_idx(images_path, labels_path, num_classes=10):
    """Load an IDX image/label pair (optionally gzipped) into a clean bundle."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.ndim != 3:
        raise IDXError(f"images: dimensions: expected 3, got {images.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise IDXError(
            f"count: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= num_classes:
        raise IDXError(f"labels: value {labels.max()} outside [0, {num_classes})")
    labels = labels.astype(np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    rho = float(counts.min() / counts.max()) if counts.max() else 1.0
    return DatasetBundle(
        images=images[..., None].astype(np.float64) / 255.0,
        given_labels=labels.copy(),
        true_labels=labels.copy(),
        ids=np.arange(len(labels), dtype=np.int64),
        num_classes=num_classes,
        rho=rho,
    )


# -- synthetic blobs ---------------------------------------------------------


def _smooth_field(rng, side, grid=3):
    coarse = rng.standard_normal((grid, grid))
    pos = np.linspace(0, grid - 1, side)
    i0 = np.minimum(pos.astype(int), grid - 2)
    t = pos - i0
    rows = coarse[i0] * (1 - t)[:, None] + coarse[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t) + rows[:, i0 + 1] * t


def make_blobs(num_classes, n_per_class, dim=64, spread=0.5, seed=0, separation=3.0, background=-1.5):
    """Isotropic Gaussian classes squashed into [0, 1] with a sigmoid.

    Samples are laid out as square single-channel images when ``dim`` is a
    perfect square (``(1, dim, 1)`` otherwise). Class centers are smooth,
    left-right symmetric patterns on a dark background, so flips, small
    rotations and inversion never turn one class into another.
    """
    if num_classes < 2 or n_per_class < 1 or spread <= 0:
        raise ConfigError("make_blobs needs num_classes >= 2, n_per_class >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    side = int(round(np.sqrt(dim)))
    square = side * side == dim
    shape = (side, side, 1) if square else (1, dim, 1)
    centers = []
    for _ in range(num_classes):
        if square:
            field = _smooth_field(rng, side)
            field = (field + field[:, ::-1]).reshape(-1)
        else:
            field = rng.standard_normal(dim)
        field = field - field.mean()
        field = field / (np.sqrt(np.mean(field**2)) + 1e-12)
        centers.append(background + separation * field)
    centers = np.stack(centers)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    raw = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    images = (1.0 / (1.0 + np.exp(-raw))).reshape((len(labels),) + shape)
    order = rng.permutation(len(labels))
    return DatasetBundle(
        images=images[order],
        given_labels=labels[order].copy(),
        true_labels=labels[order].copy(),
        ids=np.arange(len(labels), dtype=np.int64),
        num_classes=num_classes,
        seed=seed,
    )


# -- long tail -------------------------------------------------------------------


def longtail_counts(n_max, num_classes, rho):
    """``round(n_max * rho ** (k / (K - 1)))`` for k = 0..K-1."""
    k = np.arange(num_classes)
    return np.array([int(np.floor(n_max * rho ** (i / (num_classes - 1)) + 0.5)) for i in k])


def apply_longtail(bundle, rho, seed=0):
    """Subsample classes to an exponential profile with min/max ratio ``rho``.

    Class 0 is the head. Samples are kept uniformly without replacement and the
    result is shuffled deterministically.
    """
    if not 0 < rho <= 1:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    K = bundle.num_classes
    have = bundle.class_counts
    n_max = int(have.max())
    target = longtail_counts(n_max, K, rho)
    if target.min() < 1:
        raise ConfigError(f"rho={rho} leaves an empty class (counts {target.tolist()})")
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(K):
        idx = np.flatnonzero(bundle.true_labels == k)
        take = min(int(target[k]), len(idx))
        keep.append(np.sort(rng.choice(idx, size=take, replace=False)))
    keep = np.concatenate(keep)
    keep = keep[rng.permutation(len(keep))]
    out = bundle.subset(keep)
    counts = out.class_counts
    out.rho = float(counts.min() / counts.max())
    return out


# -- label noise -------------------------------------------------------------


def _check_clean(bundle, eta):
    if not 0 <= eta <= 1:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    if np.any(bundle.noise_mask):
        raise ConfigError("labels are already corrupted")


def inject_noise_ci(bundle, eta, seed=0):
    """Flip each label with probability ``eta`` to a uniform *other* class."""
    _check_clean(bundle, eta)
    rng = np.random.default_rng(seed)
    K, n = bundle.num_classes, len(bundle)
    flip = rng.random(n) < eta
    # offset in 1..K-1 guarantees a different class
    offset = rng.integers(1, K, size=n)
    given = bundle.true_labels.copy()
    given[flip] = (given[flip] + offset[flip]) % K
    return dataclasses.replace(
        bundle, given_labels=given, eta=float(eta), noise_kind="class_independent", seed=seed
    )


def inject_noise_cd(bundle, eta, seed=0):
    """Flip class k to (k + 1) mod K with probability ``eta``."""
    _check_clean(bundle, eta)
    rng = np.random.default_rng(seed)
    flip = rng.random(len(bundle)) < eta
    given = bundle.true_labels.copy()
    given[flip] = (given[flip] + 1) % bundle.num_classes
    return dataclasses.replace(
        bundle, given_labels=given, eta=float(eta), noise_kind="class_dependent", seed=seed
    )


def inject_noise(bundle, kind, eta, seed=0):
    if kind == "class_independent":
        return inject_noise_ci(bundle, eta, seed)
    if kind == "class_dependent":
        return inject_noise_cd(bundle, eta, seed)
    if kind == "none":
        return bundle
    raise ConfigError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


def stratified_split(bundle, n_test_per_class, seed=0):
    """Split off a class-balanced test set; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    test = []
    for k in range(bundle.num_classes):
        idx = np.flatnonzero(bundle.true_labels == k)
        if len(idx) <= n_test_per_class:
            raise ConfigError(f"class {k} has only {len(idx)} samples")
        test.append(rng.choice(idx, size=n_test_per_class, replace=False))
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(len(bundle)), test)
    return bundle.subset(train), bundle.subset(test)


# -- serialization -------------------------------------------------------------
#
# <stem>.npz   arrays: images (float64), given_labels, true_labels, ids (int64)
# <stem>.json  sidecar: {format, K, class_counts, rho, eta, noise_kind, seed,
#              n_samples, image_shape}


def save_bundle(bundle, stem):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "images": bundle.images,
        "given_labels": bundle.given_labels,
        "true_labels": bundle.true_labels,
        "ids": bundle.ids,
    }
    # np.savez writes zip entries with fixed timestamps, so bytes are reproducible
    with open(stem.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **arrays)
    stem.with_suffix(".json").write_text(json.dumps(bundle.sidecar(), indent=2, sort_keys=True) + "\n")


def load_bundle(stem):
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("format") != BUNDLE_FORMAT:
        raise IDXError(f"{stem}: unsupported bundle format {meta.get('format')!r}")
    with np.load(stem.with_suffix(".npz")) as z:
        bundle = DatasetBundle(
            images=z["images"],
            given_labels=z["given_labels"],
            true_labels=z["true_labels"],
            ids=z["ids"],
            num_classes=int(meta["K"]),
            rho=float(meta["rho"]),
            eta=float(meta["eta"]),
            noise_kind=meta["noise_kind"],
            seed=meta["seed"],
        )
    if len(bundle) != meta["n_samples"]:
        raise IDXError(f"{stem}: sidecar says {meta['n_samples']} samples, arrays hold {len(bundle)}")
    return bundle
