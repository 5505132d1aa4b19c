"""Weak and strong views of training images.

Weak: reflect-pad, random crop back to size, optional horizontal flip.
Strong: the weak view, then two transforms drawn from a fixed pool, then a
cutout patch. Every random choice comes from a generator keyed on
(seed, epoch, sample id, view), so results do not depend on batch order.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

POOL = ("rotate", "shear", "contrast", "brightness", "invert")
WEAK, STRONG = 0, 1


@dataclasses.dataclass(frozen=True)
class AugConfig:
    pad: int = 4
    flips_enabled: bool = False
    pool: tuple = POOL
    n_ops: int = 2
    # scales every pool range; 0 makes each transform the identity
    magnitude: float = 1.0
    max_rotate_deg: float = 30.0
    max_shear: float = 0.3
    contrast_range: float = 0.5
    max_brightness: float = 0.3
    cutout: int = 8


@dataclasses.dataclass
class AugPair:
    weak: np.ndarray
    strong: np.ndarray
    source_id: int


def sample_stream(seed, epoch, sample_id, view):
    return np.random.default_rng([int(seed), int(epoch), int(sample_id), int(view)])


def pad_crop(image, top, left, pad):
    h, w = image.shape[:2]
    if pad == 0:
        return image.copy()
    mode = "reflect" if min(h, w) > pad else "symmetric"
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode=mode)
    return padded[top : top + h, left : left + w].copy()


def weak_augment(image, rng, cfg=AugConfig()):
    pad = cfg.pad
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    out = pad_crop(image, top, left, pad)
    if cfg.flips_enabled and rng.random() < 0.5:
        out = out[:, ::-1].copy()
    return out


def _affine(image, matrix):
    h, w = image.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.affine_transform(
            image[..., c], matrix, offset=offset, order=1, mode="constant", cval=0.0
        )
    return out


def rotate(image, degrees):
    t = np.deg2rad(degrees)
    m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return _affine(image, m)


def shear(image, amount):
    return _affine(image, np.array([[1.0, 0.0], [amount, 1.0]]))


def contrast(image, factor):
    mean = image.mean()
    return mean + factor * (image - mean)


def brightness(image, shift):
    return image + shift


def invert(image, strength=1.0):
    return image + strength * (1.0 - 2.0 * image)


def _apply_op(name, image, rng, cfg):
    m = cfg.magnitude
    if name == "rotate":
        return rotate(image, rng.uniform(-1, 1) * cfg.max_rotate_deg * m)
    if name == "shear":
        return shear(image, rng.uniform(-1, 1) * cfg.max_shear * m)
    if name == "contrast":
        return contrast(image, 1.0 + rng.uniform(-1, 1) * cfg.contrast_range * m)
    if name == "brightness":
        return brightness(image, rng.uniform(-1, 1) * cfg.max_brightness * m)
    if name == "invert":
        # inversion has no natural magnitude; a partial one collapses toward
        # flat gray at strength 0.5, so it is all or nothing
        return invert(image, 1.0 if m > 0 else 0.0)
    raise ValueError(f"unknown augmentation {name!r}")


def cutout_box(shape, size, rng):
    h, w = shape[:2]
    size_h, size_w = min(size, h), min(size, w)
    top = int(rng.integers(0, h - size_h + 1))
    left = int(rng.integers(0, w - size_w + 1))
    return top, left, size_h, size_w


def strong_augment(image, rng, cfg=AugConfig(), return_box=False):
    out = weak_augment(image, rng, cfg)
    if cfg.n_ops and cfg.pool:
        ops = rng.choice(len(cfg.pool), size=min(cfg.n_ops, len(cfg.pool)), replace=False)
        for i in ops:
            out = _apply_op(cfg.pool[i], out, rng, cfg)
    box = None
    if cfg.cutout > 0:
        top, left, sh, sw = box = cutout_box(out.shape, cfg.cutout, rng)
        out[top : top + sh, left : left + sw] = 0.0
    out = np.clip(out, 0.0, 1.0)
    return (out, box) if return_box else out


def augment_pair(image, sample_id, epoch, seed, cfg=AugConfig()):
    weak = weak_augment(image, sample_stream(seed, epoch, sample_id, WEAK), cfg)
    strong = strong_augment(image, sample_stream(seed, epoch, sample_id, STRONG), cfg)
    return AugPair(weak, strong, int(sample_id))


def augment_batch(images, ids, epoch, seed, cfg=AugConfig(), strong=False):
    """Augment a stack of (H, W, C) images; one independent stream per sample."""
    view = STRONG if strong else WEAK
    fn = strong_augment if strong else weak_augment
    return np.stack(
        [fn(img, sample_stream(seed, epoch, i, view), cfg) for img, i in zip(images, ids)]
    )
