"""Small classifiers whose normalization layers keep two branches.

Weak and strong views share every convolution and linear weight but each
passes through its own batch-norm statistics and affine parameters. Only the
weak branch is used in eval mode.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from . import tensor as T
from .tensor import Tensor

BRANCHES = ("weak", "strong")
WEIGHTS_MAGIC = b"NTWB"
WEIGHTS_VERSION = 1


class WeightsError(ValueError):
    """Unreadable or mismatched weight stream."""


class DualBatchNorm:
    """Per-channel batch norm with separate weak/strong statistics and affines."""

    def __init__(self, channels, xi=1e-5, momentum=0.1):
        self.channels = channels
        self.xi = xi
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.gamma_hat = Tensor(np.ones(channels), requires_grad=True)
        self.beta_hat = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mu = np.zeros(channels)
        self.running_sigma = np.ones(channels)
        self.running_mu_hat = np.zeros(channels)
        self.running_sigma_hat = np.ones(channels)

    def _fields(self, branch):
        if branch == "weak":
            return self.gamma, self.beta, "running_mu", "running_sigma"
        return self.gamma_hat, self.beta_hat, "running_mu_hat", "running_sigma_hat"

    def __call__(self, x, branch, train, track_stats=True):
        gamma, beta, mu_name, sigma_name = self._fields(branch)
        if not train:
            return T.batch_norm_eval(x, gamma, beta, getattr(self, mu_name), getattr(self, sigma_name))
        out, mu, sigma = T.batch_norm_train(x, gamma, beta, self.xi)
        if not track_stats:
            return out
        m = self.momentum
        setattr(self, mu_name, (1 - m) * getattr(self, mu_name) + m * mu)
        setattr(self, sigma_name, (1 - m) * getattr(self, sigma_name) + m * sigma)
        return out

    def params(self, prefix):
        return {
            f"{prefix}.gamma": self.gamma,
            f"{prefix}.beta": self.beta,
            f"{prefix}.gamma_hat": self.gamma_hat,
            f"{prefix}.beta_hat": self.beta_hat,
        }

    def buffers(self, prefix):
        return {
            f"{prefix}.{name}": getattr(self, name)
            for name in ("running_mu", "running_sigma", "running_mu_hat", "running_sigma_hat")
        }

    def set_buffer(self, name, value):
        setattr(self, name, np.array(value, dtype=np.float64))


class Network:
    """``cnn`` or ``mlp`` classifier over (n, H, W, C) image batches.

    cnn: conv3x3(w0) -> DualBN -> relu -> conv3x3(w1, stride 2) -> DualBN
         -> relu -> pool -> linear(K)
    mlp: flatten -> linear(w0) -> DualBN -> relu -> ... -> linear(K)

    The cnn pool is ``"gap"`` (global average) or ``"avgflat"`` (2x2 average
    pooling, then flatten), which keeps coarse spatial layout.
    """

    def __init__(self, arch, num_classes, input_shape, widths=None, seed=0, xi=1e-5, bn_momentum=0.1, pool="gap"):
        if arch not in ("cnn", "mlp"):
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.widths = tuple(widths) if widths else ((16, 32) if arch == "cnn" else (256,))
        self.xi = xi
        self.bn_momentum = bn_momentum
        if pool not in ("gap", "avgflat"):
            raise ValueError(f"unknown pool {pool!r}")
        self.pool = pool
        rng = np.random.default_rng(seed)
        self.weights = {}
        self.bns = {}
        h, w, c = self.input_shape
        if arch == "cnn":
            if len(self.widths) != 2:
                raise ValueError("cnn takes exactly two channel widths")
            c1, c2 = self.widths
            self.weights["conv1.weight"] = _kaiming(rng, (c1, c, 3, 3), c * 9)
            self.bns["bn1"] = DualBatchNorm(c1, xi, bn_momentum)
            self.weights["conv2.weight"] = _kaiming(rng, (c2, c1, 3, 3), c1 * 9)
            self.bns["bn2"] = DualBatchNorm(c2, xi, bn_momentum)
            oh, ow = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            fan = c2 if pool == "gap" else c2 * (oh // 2) * (ow // 2)
        else:
            fan = h * w * c
            for i, width in enumerate(self.widths, 1):
                self.weights[f"fc{i}.weight"] = _kaiming(rng, (fan, width), fan)
                self.weights[f"fc{i}.bias"] = Tensor(np.zeros(width), requires_grad=True)
                self.bns[f"bn{i}"] = DualBatchNorm(width, xi, bn_momentum)
                fan = width
        self.weights["head.weight"] = _kaiming(rng, (fan, self.num_classes), fan)
        self.weights["head.bias"] = Tensor(np.zeros(self.num_classes), requires_grad=True)

    # -- parameters -------------------------------------------------------

    def parameters(self):
        """Learnable tensors by name, in a fixed order."""
        out = dict(self.weights)
        for name, bn in self.bns.items():
            out.update(bn.params(name))
        return dict(sorted(out.items()))

    def buffers(self):
        out = {}
        for name, bn in self.bns.items():
            out.update(bn.buffers(name))
        return dict(sorted(out.items()))

    def state_arrays(self):
        state = {k: v.data for k, v in self.parameters().items()}
        state.update(self.buffers())
        return dict(sorted(state.items()))

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def describe(self):
        return {
            "arch": self.arch,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "widths": list(self.widths),
            "xi": self.xi,
            "bn_momentum": self.bn_momentum,
            "pool": self.pool,
        }

    # -- forward ----------------------------------------------------------

    def logits(self, images, branch="weak", mode="train", track_stats=True):
        if branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "eval" and branch != "weak":
            raise ValueError("eval mode uses the weak branch only")
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValueError(f"expected a nonempty (n, H, W, C) batch, got {images.shape}")
        if tuple(images.shape[1:]) != self.input_shape:
            raise ValueError(f"expected images of shape {self.input_shape}, got {images.shape[1:]}")
        train = mode == "train"
        W = self.weights
        if self.arch == "cnn":
            x = Tensor(images.transpose(0, 3, 1, 2))
            x = T.conv2d(x, W["conv1.weight"], stride=1, pad=1)
            x = T.relu(self.bns["bn1"](x, branch, train, track_stats))
            x = T.conv2d(x, W["conv2.weight"], stride=2, pad=1)
            x = T.relu(self.bns["bn2"](x, branch, train, track_stats))
            x = T.global_avg_pool(x) if self.pool == "gap" else T.reshape(T.avg_pool2(x), (x.shape[0], -1))
        else:
            x = Tensor(images.reshape(images.shape[0], -1))
            for i in range(1, len(self.widths) + 1):
                x = T.add_bias(T.matmul(x, W[f"fc{i}.weight"]), W[f"fc{i}.bias"])
                x = T.relu(self.bns[f"bn{i}"](x, branch, train, track_stats))
        return T.add_bias(T.matmul(x, W["head.weight"]), W["head.bias"])

    def forward(self, images, branch="weak", mode="train", track_stats=True):
        """Class probabilities, one softmax row per image.

        Train mode normalizes with batch statistics and, unless
        ``track_stats`` is false, folds them into the branch's running stats.
        """
        return T.softmax(self.logits(images, branch, mode, track_stats), axis=1)

    __call__ = forward

    def predict_proba(self, images, batch_size=512):
        """Eval-mode weak-branch probabilities as a plain array."""
        out = [
            self.forward(images[i : i + batch_size], "weak", "eval").data
            for i in range(0, len(images), batch_size)
        ]
        return np.concatenate(out)

    # -- serialization ----------------------------------------------------

    def to_bytes(self):
        return export_weights(self)

    @classmethod
    def from_bytes(cls, blob):
        header, arrays = _read_weights(blob)
        spec = header["spec"]
        net = cls(
            spec["arch"],
            spec["num_classes"],
            spec["input_shape"],
            spec["widths"],
            xi=spec["xi"],
            bn_momentum=spec["bn_momentum"],
            pool=spec.get("pool", "gap"),
        )
        _assign(net, arrays)
        return net


def _kaiming(rng, shape, fan_in):
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


# Weight stream layout (all integers big-endian):
#   4 bytes   magic "NTWB"
#   uint16    format version
#   uint32    header length L
#   L bytes   UTF-8 JSON: {"spec": Network.describe(), "tensors": [[name, shape], ...]}
#   payload   each tensor's float64 little-endian bytes, in header order


def export_weights(net):
    state = net.state_arrays()
    header = {
        "spec": net.describe(),
        "tensors": [[name, list(arr.shape)] for name, arr in state.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack(">HI", WEIGHTS_VERSION, len(hbytes)))
    buf.write(hbytes)
    for arr in state.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def _read_weights(blob):
    blob = bytes(blob)
    if len(blob) < 10 or blob[:4] != WEIGHTS_MAGIC:
        raise WeightsError("not a weight stream (bad magic)")
    version, hlen = struct.unpack(">HI", blob[4:10])
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"weight format version {version}, expected {WEIGHTS_VERSION}")
    if len(blob) < 10 + hlen:
        raise WeightsError("weight stream truncated inside the header")
    try:
        header = json.loads(blob[10 : 10 + hlen])
    except ValueError as exc:
        raise WeightsError(f"corrupt weight header: {exc}") from None
    pos = 10 + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(blob):
            raise WeightsError(f"weight stream truncated in tensor {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise WeightsError(f"{len(blob) - pos} trailing bytes after the last tensor")
    return header, arrays


def _assign(net, arrays):
    params = net.parameters()
    buffers = net.buffers()
    expected = set(params) | set(buffers)
    for name in sorted(expected | set(arrays)):
        if name not in arrays:
            raise WeightsError(f"layer {name!r} missing from the weight stream")
        if name not in expected:
            raise WeightsError(f"layer {name!r} does not exist in this network")
        target = params[name].data if name in params else buffers[name]
        if target.shape != arrays[name].shape:
            raise WeightsError(f"layer {name!r}: shape {arrays[name].shape}, network expects {target.shape}")
    for name, arr in arrays.items():
        if name in params:
            params[name].data = arr.copy()
        else:
            layer, field = name.split(".", 1)
            net.bns[layer].set_buffer(field, arr)


def import_weights(blob, net=None):
    """Decode a weight stream. With ``net`` given, load into it (shapes checked)."""
    if net is None:
        return Network.from_bytes(blob)
    _, arrays = _read_weights(blob)
    _assign(net, arrays)
    return net
