"""
Long-tailed noisy data and small-loss selection
================================================

Build a skewed, mislabeled training set, then watch the OTSU split pull
low-loss samples out of a batch.
"""

import numpy as np

from noisytail import data, selection

# ten Gaussian blob classes, then an exponential long tail with rho = 0.1
full = data.make_blobs(10, 300, dim=64, seed=0)
tailed = data.apply_longtail(full, rho=0.1, seed=0)
print("class counts:", tailed.class_counts.tolist())

# flip 20% of the given labels uniformly to some other class
noisy = data.inject_noise(tailed, "class_independent", 0.2, seed=0)
print(f"noise fraction: {noisy.noise_mask.mean():.3f}")

# the trainer only ever sees this view: no true labels, no mask
view = noisy.training_view()
print("view carries:", sorted(vars(view)))

# a fake batch of per-sample losses: clean samples low, noisy ones high
rng = np.random.default_rng(1)
mask = noisy.noise_mask[:128]
losses = np.where(mask, rng.normal(3.0, 0.6, 128), rng.exponential(0.4, 128))
out = selection.select(losses, kappa=0.8)
print(f"threshold {out.threshold:.3f}: {len(out.clean)} clean, {len(out.noisy)} confident noisy")
print(f"noisy among selected clean: {mask[out.clean].mean():.3f}")
print(f"noisy among confident noisy: {mask[out.noisy].mean():.3f}")
