"""
Two views, one network
======================

Weak and strong augmentations of the same digit pass through shared weights
but separate batch-norm branches. Only the weak branch survives to test time.
"""

import numpy as np

from noisytail import augment, criteria
from noisytail.model import Network

rng = np.random.default_rng(0)
digit = np.zeros((28, 28, 1))
digit[6:22, 12:16] = 1.0

pair = augment.augment_pair(digit, sample_id=0, epoch=0, seed=0)
print("weak L1 from source:  ", np.abs(pair.weak - digit).sum().round(1))
print("strong L1 from source:", np.abs(pair.strong - digit).sum().round(1))

net = Network("cnn", num_classes=10, input_shape=(28, 28, 1))
batch = np.stack([augment.augment_pair(digit + 0.1 * rng.random(digit.shape), i, 0, 0).weak for i in range(8)])
strong = augment.augment_batch(batch, np.arange(8), epoch=0, seed=0, strong=True)

hat_before = net.bns["bn1"].running_mu_hat.copy()
p_weak = net(batch, "weak", "train")
print("strong stats untouched by weak traffic:", np.array_equal(hat_before, net.bns["bn1"].running_mu_hat))
p_strong = net(strong, "strong", "train")

# matching loss: CE of both views on the given label, plus alpha times CE of
# the strong view on the weak view's most confident class
y = np.zeros(8, dtype=int)
print("matching loss per sample:", criteria.matching_loss(p_weak, p_strong, y, alpha=2.0).data.round(3))

try:
    net(batch, "strong", "eval")
except ValueError as exc:
    print("eval on the strong branch:", exc)
