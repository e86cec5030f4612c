"""Minimal dense/convolutional network engine in float64 numpy.

Architecture: three blocks of Conv(3x3, valid) -> MaxPool(2x2) -> BatchNorm,
then Flatten and a Dense softmax classifier. Forward, exact reverse-mode
gradients, and momentum SGD; nothing more.

Training is single-threaded and deterministic for a fixed seed. A trained
model is immutable during inference and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LOSS_CLAMP = 1e-12

CHECKPOINT_MAGIC = b"RPMM"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    """Backward invoked without a cached forward pass."""


class DegenerateBatchError(ValueError):
    """Batch statistics need at least two samples."""


class StratificationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


# --- functional layer math ------------------------------------------------


def conv2d_forward(x, w, b):
    """Valid cross-correlation, stride 1.

    x: (N, C, H, W), w: (F, C, KH, KW), b: (F,). Returns (out, cols) where
    cols is the (N, C*KH*KW, OH*OW) patch matrix reused by the backward pass.
    """
    N, C, H, W = x.shape
    F, wc, KH, KW = w.shape
    if wc != C:
        raise ShapeError(f"kernel expects {wc} input channels, got {C}")
    if H < KH or W < KW:
        raise ShapeError(f"input {H}x{W} smaller than kernel {KH}x{KW}")
    OH, OW = H - KH + 1, W - KW + 1
    cols = np.empty((N, C, KH, KW, OH, OW), dtype=np.float64)
    for i in range(KH):
        for j in range(KW):
            cols[:, :, i, j] = x[:, :, i : i + OH, j : j + OW]
    cols = cols.reshape(N, C * KH * KW, OH * OW)
    out = np.matmul(w.reshape(F, -1), cols).reshape(N, F, OH, OW)
    return out + b[None, :, None, None], cols


def conv2d_backward(dout, cols, w, x_shape):
    N, F, OH, OW = dout.shape
    C, KH, KW = w.shape[1], w.shape[2], w.shape[3]
    dout2 = dout.reshape(N, F, OH * OW)
    db = dout.sum(axis=(0, 2, 3))
    flat_out = dout2.transpose(1, 0, 2).reshape(F, N * OH * OW)
    flat_cols = cols.transpose(1, 0, 2).reshape(C * KH * KW, N * OH * OW)
    dw = (flat_out @ flat_cols.T).reshape(w.shape)
    dcols = np.matmul(w.reshape(F, -1).T, dout2).reshape(N, C, KH, KW, OH, OW)
    dx = np.zeros(x_shape, dtype=np.float64)
    for i in range(KH):
        for j in range(KW):
            dx[:, :, i : i + OH, j : j + OW] += dcols[:, :, i, j]
    return dx, dw, db


def maxpool_forward(x):
    """2x2 non-overlapping max; odd trailing row/column is truncated.

    Returns (out, argmax indices) for the backward pass.
    """
    N, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    if H2 < 1 or W2 < 1:
        raise ShapeError(f"spatial dims {H}x{W} too small to pool")
    blocks = (
        x[:, :, : H2 * 2, : W2 * 2]
        .reshape(N, C, H2, 2, W2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(N, C, H2, W2, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx, x_shape):
    N, C, H, W = x_shape
    H2, W2 = H // 2, W // 2
    dblocks = np.zeros((N, C, H2, W2, 4), dtype=np.float64)
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=np.float64)
    dx[:, :, : H2 * 2, : W2 * 2] = (
        dblocks.reshape(N, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H2 * 2, W2 * 2)
    )
    return dx


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel normalization over (N, H, W).

    Train mode normalizes by batch statistics (biased variance) and returns
    updated running statistics; eval mode uses the running statistics.
    Returns (out, cache, running_mean, running_var).
    """
    if train:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch statistics need batch size >= 2")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean = BN_MOMENTUM * running_mean + (1 - BN_MOMENTUM) * mu
        running_var = BN_MOMENTUM * running_var + (1 - BN_MOMENTUM) * var
    else:
        mu, var = running_mean, running_var
    ivar = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, ivar), running_mean, running_var


def batchnorm_backward(dout, gamma, cache):
    xhat, ivar = cache
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    dx = (ivar[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax(logits):
    """Max-subtracted softmax; finite for any finite logits."""
    logits = np.asarray(logits, dtype=np.float64)
    with np.errstate(over="ignore"):
        # the shifted value may overflow to -inf for absurd logit gaps,
        # which exp() maps to exactly 0 as intended
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dense_softmax_forward(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    return softmax(x @ w + b)


def cross_entropy_loss(probs, label):
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return -np.log(max(float(probs[..., label]), LOSS_CLAMP))


def batch_cross_entropy(probs, labels):
    """Mean clamped cross-entropy over a batch."""
    picked = np.maximum(probs[np.arange(len(labels)), labels], LOSS_CLAMP)
    return float(-np.log(picked).mean())


# --- layers and model -----------------------------------------------------


class ConvLayer:
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=3, rng=None):
        scale = np.sqrt(2.0 / (in_channels * kernel * kernel))
        rng = rng or np.random.default_rng(0)
        self.w = rng.normal(0.0, scale, (out_channels, in_channels, kernel, kernel))
        self.b = np.zeros(out_channels, dtype=np.float64)
        self._cache = None

    def forward(self, x, train):
        out, cols = conv2d_forward(x, self.w, self.b)
        if train:
            self._cache = (cols, x.shape)
        return out

    def backward(self, dout):
        if self._cache is None:
            raise StateError("conv backward before forward")
        cols, x_shape = self._cache
        dx, dw, db = conv2d_backward(dout, cols, self.w, x_shape)
        return dx, [dw, db]

    def params(self):
        return [self.w, self.b]

    def persisted(self):
        return [("w", self.w), ("b", self.b)]

    def describe(self):
        return {"kind": self.kind, "w": list(self.w.shape), "b": list(self.b.shape)}


class PoolLayer:
    kind = "pool"

    def __init__(self):
        self._cache = None

    def forward(self, x, train):
        out, idx = maxpool_forward(x)
        if train:
            self._cache = (idx, x.shape)
        return out

    def backward(self, dout):
        if self._cache is None:
            raise StateError("pool backward before forward")
        idx, x_shape = self._cache
        return maxpool_backward(dout, idx, x_shape), []

    def params(self):
        return []

    def persisted(self):
        return []

    def describe(self):
        return {"kind": self.kind}


class NormLayer:
    kind = "norm"

    def __init__(self, channels):
        self.gamma = np.ones(channels, dtype=np.float64)
        self.beta = np.zeros(channels, dtype=np.float64)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self._cache = None

    def forward(self, x, train):
        out, cache, rm, rv = batchnorm_forward(
            x, self.gamma, self.beta, self.running_mean, self.running_var, train
        )
        if train:
            self.running_mean, self.running_var = rm, rv
            self._cache = cache
        return out

    def backward(self, dout):
        if self._cache is None:
            raise StateError("norm backward before forward")
        dx, dgamma, dbeta = batchnorm_backward(dout, self.gamma, self._cache)
        return dx, [dgamma, dbeta]

    def params(self):
        return [self.gamma, self.beta]

    def persisted(self):
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def describe(self):
        return {"kind": self.kind, "channels": len(self.gamma)}


class FlattenLayer:
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x, train):
        if train:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        if self._shape is None:
            raise StateError("flatten backward before forward")
        return dout.reshape(self._shape), []

    def params(self):
        return []

    def persisted(self):
        return []

    def describe(self):
        return {"kind": self.kind}


class DenseLayer:
    """Final linear map; softmax is applied by the model head."""

    kind = "dense"

    def __init__(self, in_features, n_classes, rng=None):
        rng = rng or np.random.default_rng(0)
        self.w = rng.normal(0.0, 1.0 / np.sqrt(in_features), (in_features, n_classes))
        self.b = np.zeros(n_classes, dtype=np.float64)
        self._cache = None

    def forward(self, x, train):
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeError(f"flattened width {x.shape[-1]} != dense input {self.w.shape[0]}")
        if train:
            self._cache = x
        return x @ self.w + self.b

    def backward(self, dout):
        if self._cache is None:
            raise StateError("dense backward before forward")
        x = self._cache
        dw = x.T @ dout
        db = dout.sum(axis=0)
        return dout @ self.w.T, [dw, db]

    def params(self):
        return [self.w, self.b]

    def persisted(self):
        return [("w", self.w), ("b", self.b)]

    def describe(self):
        return {"kind": self.kind, "w": list(self.w.shape), "b": list(self.b.shape)}


def chain_shapes(input_shape, widths, kernel=3):
    """Propagate (C, H, W) through conv/pool blocks; returns shape after each block."""
    c, h, w = input_shape
    shapes = []
    for width in widths:
        h, w = h - (kernel - 1), w - (kernel - 1)
        if h < 2 or w < 2:
            raise ShapeError(f"input too small for {len(widths)} blocks: reached {h}x{w} before pooling")
        h, w = h // 2, w // 2
        c = width
        shapes.append((c, h, w))
    return shapes


class Model:
    """Conv/Pool/Norm blocks, flatten, dense softmax classifier."""

    def __init__(self, layers, input_shape, n_classes):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self._probs = None
        self._train_pass = False

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        for layer in self.layers:
            x = layer.forward(x, train)
        probs = softmax(x)
        if train:
            self._probs = probs
            self._train_pass = True
        return probs[0] if single else probs

    def backward(self, labels):
        """Gradients of mean cross-entropy over the cached training batch."""
        if not self._train_pass or self._probs is None:
            raise StateError("backward called before a training forward pass")
        labels = np.asarray(labels)
        n = len(labels)
        dlogits = self._probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        grads = []
        d = dlogits
        for layer in reversed(self.layers):
            d, layer_grads = layer.backward(d)
            grads = layer_grads + grads
        self._train_pass = False
        return grads

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def describe(self):
        return {
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "layers": [layer.describe() for layer in self.layers],
        }


def build_model(n_classes, input_shape=(1, 40, 98), widths=(8, 16, 32), kernel=3, seed=0):
    rng = np.random.default_rng([seed, 0])
    shapes = chain_shapes(input_shape, widths, kernel)
    layers = []
    in_c = input_shape[0]
    for width, shape in zip(widths, shapes):
        layers.append(ConvLayer(in_c, width, kernel, rng))
        layers.append(PoolLayer())
        layers.append(NormLayer(width))
        in_c = width
    layers.append(FlattenLayer())
    c, h, w = shapes[-1]
    layers.append(DenseLayer(c * h * w, n_classes, rng))
    return Model(layers, input_shape, n_classes)


# --- optimizer ------------------------------------------------------------


def sgd_step(params, grads, velocities, learning_rate, momentum):
    """In-place momentum update: v = m*v - lr*g; p += v."""
    if len(params) != len(grads) or len(params) != len(velocities):
        raise ShapeError("params, grads and velocities must align")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= momentum
        v -= learning_rate * g
        p += v


class SgdOptimizer:
    def __init__(self, model: Model, config: TrainConfig):
        self.model = model
        self.config = config
        self.velocities = [np.zeros_like(p) for p in model.parameters()]

    def step(self, grads):
        sgd_step(self.model.parameters(), grads, self.velocities, self.config.learning_rate, self.config.momentum)


def train_classifier(model: Model, inputs, labels, config: TrainConfig):
    """Plain epoch loop over shuffled mini-batches. Returns per-epoch mean loss."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    opt = SgdOptimizer(model, config)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(inputs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            if len(batch_idx) < 2:
                continue  # batch statistics need >= 2 samples
            xb, yb = inputs[batch_idx], labels[batch_idx]
            probs = model.forward(xb, train=True)
            losses.append(batch_cross_entropy(probs, yb))
            opt.step(model.backward(yb))
        history.append(float(np.mean(losses)))
    return history


# --- dataset helpers -------------------------------------------------------


def split_dataset(dataset, train_fraction, seed, labels=None):
    """Deterministic stratified partition into (train, validation) lists.

    Items supply their own integer label via ``.label`` unless ``labels``
    is given explicitly. Each label is split as close to the fraction as
    rounding allows.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    items = list(dataset)
    if labels is None:
        labels = [item.label for item in items]
    labels = list(labels)
    if len(labels) != len(items):
        raise ValueError("labels must align with dataset")
    by_label = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(lab, []).append(i)
    for lab, idxs in by_label.items():
        if len(idxs) < 2:
            raise StratificationError(f"label {lab} has {len(idxs)} sample(s); need >= 2 to stratify")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for lab in sorted(by_label):
        idxs = np.array(by_label[lab])
        idxs = idxs[rng.permutation(len(idxs))]
        n_train = int(round(train_fraction * len(idxs)))
        train_idx.extend(idxs[:n_train])
        val_idx.extend(idxs[n_train:])
    train_idx = [int(i) for i in np.array(train_idx)[rng.permutation(len(train_idx))]]
    val_idx = [int(i) for i in np.array(val_idx)[rng.permutation(len(val_idx))]]
    return [items[i] for i in train_idx], [items[i] for i in val_idx]


def evaluate_accuracy(model: Model, inputs, labels, batch_size=256):
    """Argmax-prediction match rate in eval mode."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = 0
    for start in range(0, len(inputs), batch_size):
        probs = model.forward(inputs[start : start + batch_size], train=False)
        hits += int((probs.argmax(axis=-1) == labels[start : start + batch_size]).sum())
    return hits / len(inputs)


# --- checkpoint I/O --------------------------------------------------------


def _persisted_arrays(model: Model):
    for layer in model.layers:
        for _, arr in layer.persisted():
            yield arr


def save_model(model: Model, path, labels=None):
    """Write magic, version, architecture descriptor, then parameters as
    big-endian float64 in declaration order."""
    desc = model.describe()
    if labels is not None:
        desc["labels"] = list(labels)
    desc_bytes = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack(">I", len(desc_bytes)))
        fh.write(desc_bytes)
        for arr in _persisted_arrays(model):
            fh.write(arr.astype(">f8").tobytes())


def _model_from_descriptor(desc):
    try:
        input_shape = tuple(desc["input_shape"])
        n_classes = int(desc["n_classes"])
        layer_descs = desc["layers"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"descriptor missing fields: {exc}") from exc
    layers = []
    for ld in layer_descs:
        kind = ld.get("kind")
        if kind == "conv":
            f, c, kh, kw = ld["w"]
            layer = ConvLayer(c, f, kh)
        elif kind == "pool":
            layer = PoolLayer()
        elif kind == "norm":
            layer = NormLayer(ld["channels"])
        elif kind == "flatten":
            layer = FlattenLayer()
        elif kind == "dense":
            layer = DenseLayer(ld["w"][0], ld["w"][1])
        else:
            raise CheckpointError(f"unknown layer kind {kind!r}")
        layers.append(layer)
    model = Model(layers, input_shape, n_classes)
    for ld, layer in zip(layer_descs, model.layers):
        made = layer.describe()
        if made != ld:
            raise CheckpointError(f"descriptor mismatch: {ld} vs {made}")
    try:
        probe = model.forward(np.zeros((1,) + tuple(input_shape)))
    except (ShapeError, ValueError) as exc:
        raise CheckpointError(f"descriptor layers do not chain: {exc}") from exc
    if probe.shape[-1] != n_classes:
        raise CheckpointError(f"head emits {probe.shape[-1]} classes, descriptor claims {n_classes}")
    return model


def load_model(path):
    """Read a checkpoint; returns (model, labels or None).

    Rejects bad magic/version, malformed descriptors, and parameter blobs
    whose size disagrees with the descriptor.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    if blob[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]}")
    (desc_len,) = struct.unpack_from(">I", blob, 5)
    try:
        desc = json.loads(blob[9 : 9 + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable descriptor: {exc}") from exc
    model = _model_from_descriptor(desc)
    arrays = list(_persisted_arrays(model))
    expected = sum(a.size for a in arrays) * 8
    payload = blob[9 + desc_len :]
    if len(payload) != expected:
        raise CheckpointError(f"parameter blob holds {len(payload)} bytes, descriptor implies {expected}")
    offset = 0
    for arr in arrays:
        n = arr.size * 8
        arr[...] = np.frombuffer(payload[offset : offset + n], dtype=">f8").reshape(arr.shape)
        offset += n
    # sanity: eval-mode variance must be positive
    for layer in model.layers:
        if isinstance(layer, NormLayer) and np.any(layer.running_var <= 0):
            raise CheckpointError("checkpoint has non-positive running variance")
    return model, desc.get("labels")
