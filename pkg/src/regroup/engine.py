"""Minimal feed-forward network engine.

Supports conv2d / linear / relu / maxpool2d / flatten layers, forward passes
with pre-activation capture at the parametric (conv2d, linear) layers, input
gradients for attack generation, and a basic SGD trainer used to produce
desk-scale model fixtures.

Conventions:
  - single samples are C x H x W float arrays without a batch axis; batched
    helpers take N x C x H x W
  - all computation is float64; persistence (dataio) stores weights in f32
  - conv weights are (out, in, kH, kW), linear weights are (out, in),
    both row-major
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import ClassVar, Optional

import numpy as np

from .errors import ValidationError

# ---------------------------------------------------------------------------
# layer specs


@dataclass
class Conv2d:
    kind: ClassVar[str] = "conv2d"
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    weights: np.ndarray = None  # (out, in, kH, kW)
    bias: np.ndarray = None  # (out,)

    def validate(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw) < 1:
            raise ValidationError("conv2d: channel/kernel extents must be >= 1")
        if self.stride < 1:
            raise ValidationError("conv2d: stride must be >= 1")
        if self.padding < 0:
            raise ValidationError("conv2d: padding must be >= 0")
        expect_w = (self.out_channels, self.in_channels, kh, kw)
        if self.weights is None or self.weights.shape != expect_w:
            raise ValidationError(
                f"conv2d: weights shape {None if self.weights is None else self.weights.shape}"
                f" != {expect_w}")
        if self.bias is None or self.bias.shape != (self.out_channels,):
            raise ValidationError("conv2d: bias shape mismatch")


@dataclass
class Linear:
    kind: ClassVar[str] = "linear"
    in_dim: int
    out_dim: int
    weights: np.ndarray = None  # (out, in)
    bias: np.ndarray = None  # (out,)

    def validate(self):
        if min(self.in_dim, self.out_dim) < 1:
            raise ValidationError("linear: dims must be >= 1")
        if self.weights is None or self.weights.shape != (self.out_dim, self.in_dim):
            raise ValidationError(
                f"linear: weights shape {None if self.weights is None else self.weights.shape}"
                f" != {(self.out_dim, self.in_dim)}")
        if self.bias is None or self.bias.shape != (self.out_dim,):
            raise ValidationError("linear: bias shape mismatch")


@dataclass
class ReLU:
    kind: ClassVar[str] = "relu"

    def validate(self):
        pass


@dataclass
class MaxPool2d:
    kind: ClassVar[str] = "maxpool2d"
    window: tuple[int, int]
    stride: int = 1

    def validate(self):
        wh, ww = self.window
        if min(wh, ww) < 1:
            raise ValidationError("maxpool2d: window extents must be >= 1")
        if self.stride < 1:
            raise ValidationError("maxpool2d: stride must be >= 1")


@dataclass
class Flatten:
    kind: ClassVar[str] = "flatten"

    def validate(self):
        pass


LayerSpec = Conv2d | Linear | ReLU | MaxPool2d | Flatten

#: layers whose pre-activation output is captured and voted on
VOTABLE_KINDS = ("conv2d", "linear")


def layer_output_shape(layer: LayerSpec, shape: tuple) -> tuple:
    """Propagate a (C,H,W) or (d,) shape through one layer; raises on mismatch."""
    if layer.kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ValidationError(
                f"conv2d: input shape {shape} incompatible with {layer.in_channels} in-channels")
        kh, kw = layer.kernel
        _, h, w = shape
        ho = (h + 2 * layer.padding - kh) // layer.stride + 1
        wo = (w + 2 * layer.padding - kw) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ValidationError(f"conv2d: kernel {layer.kernel} larger than padded input {shape}")
        return (layer.out_channels, ho, wo)
    if layer.kind == "linear":
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise ValidationError(
                f"linear: input shape {shape} incompatible with in-dim {layer.in_dim}")
        return (layer.out_dim,)
    if layer.kind == "relu":
        return shape
    if layer.kind == "maxpool2d":
        if len(shape) != 3:
            raise ValidationError(f"maxpool2d: expected C,H,W input, got {shape}")
        wh, ww = layer.window
        _, h, w = shape
        if h < wh or w < ww:
            raise ValidationError(f"maxpool2d: window {layer.window} larger than input {shape}")
        return (shape[0], (h - wh) // layer.stride + 1, (w - ww) // layer.stride + 1)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    raise ValidationError(f"unknown layer kind {layer.kind!r}")


@dataclass
class NetworkModel:
    """Ordered layer sequence plus input geometry and class count."""

    layers: list
    input_shape: tuple[int, int, int]  # C, H, W
    num_classes: int

    @property
    def votable_layers(self) -> list[int]:
        """Positions of the parametric (conv2d / linear) layers, in order."""
        return [i for i, l in enumerate(self.layers) if l.kind in VOTABLE_KINDS]

    @property
    def n_votable(self) -> int:
        return len(self.votable_layers)

    def validate(self):
        if not self.layers:
            raise ValidationError("model has no layers")
        shape = tuple(self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValidationError(f"bad input shape {shape}")
        for i, layer in enumerate(self.layers):
            try:
                layer.validate()
                shape = layer_output_shape(layer, shape)
            except ValidationError as e:
                raise ValidationError(f"layer {i} ({layer.kind}): {e}") from None
        last = self.layers[-1]
        if last.kind != "linear" or shape != (self.num_classes,):
            raise ValidationError(
                f"final layer must be linear with out-dim {self.num_classes}, got {shape}")

    def copy(self) -> "NetworkModel":
        return copy.deepcopy(self)


@dataclass
class FeatureTrace:
    """Per-votable-layer pre-activation tensors plus final logits/softmax."""

    preacts: list  # one array per votable layer, in layer order
    logits: np.ndarray  # (M,)
    softmax: np.ndarray  # (M,) PMF


# ---------------------------------------------------------------------------
# numerics helpers


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy; logits (N,M), labels (N,)."""
    ls = log_softmax(logits)
    return -ls[np.arange(len(labels)), labels]


# ---------------------------------------------------------------------------
# per-layer forward / backward (batched)


def _conv2d_batch(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ValidationError(f"conv2d: input has {c} channels, expected {layer.in_channels}")
    kh, kw = layer.kernel
    s, p = layer.stride, layer.padding
    if h + 2 * p < kh or w + 2 * p < kw:
        raise ValidationError(f"conv2d: kernel {layer.kernel} larger than padded input {(h, w)}")
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.einsum("nchwij,ocij->nohw", win, layer.weights, optimize=True)
    return out + layer.bias[None, :, None, None]


def _conv2d_backward(delta, x_unpadded, layer, want_weights):
    """Gradients of a conv2d layer: returns (dx, dw, db); dw/db None unless asked."""
    kh, kw = layer.kernel
    s, p = layer.stride, layer.padding
    n, _, h, w = x_unpadded.shape
    ho, wo = delta.shape[2], delta.shape[3]
    xpad = np.pad(x_unpadded, ((0, 0), (0, 0), (p, p), (p, p))) if p else x_unpadded

    gpad = np.zeros_like(xpad)
    dw = np.zeros_like(layer.weights) if want_weights else None
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + s * (ho - 1) + 1, s)
            cols = slice(j, j + s * (wo - 1) + 1, s)
            gpad[:, :, rows, cols] += np.einsum(
                "nohw,oc->nchw", delta, layer.weights[:, :, i, j], optimize=True)
            if want_weights:
                dw[:, :, i, j] = np.einsum(
                    "nohw,nchw->oc", delta, xpad[:, :, rows, cols], optimize=True)
    dx = gpad[:, :, p:p + h, p:p + w] if p else gpad
    db = delta.sum(axis=(0, 2, 3)) if want_weights else None
    return dx, dw, db


def _maxpool_batch(x: np.ndarray, layer: MaxPool2d):
    wh, ww = layer.window
    s = layer.stride
    if x.shape[2] < wh or x.shape[3] < ww:
        raise ValidationError(f"maxpool2d: window {layer.window} larger than input {x.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, wh * ww)
    # argmax returns the first maximal element in row-major window order
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(delta, idx, x_shape, layer):
    wh, ww = layer.window
    s = layer.stride
    n, c, ho, wo = idx.shape
    ni, ci, hi, wi = np.indices(idx.shape)
    rows = hi * s + idx // ww
    cols = wi * s + idx % ww
    dx = np.zeros(x_shape)
    np.add.at(dx, (ni, ci, rows, cols), delta)
    return dx


# ---------------------------------------------------------------------------
# whole-network forward / backward


def _forward_batch(model: NetworkModel, x: np.ndarray, keep_cache=False, capture=False):
    """Run the network on a batch.

    Returns (logits, caches, preacts): caches hold per-layer inputs / pool
    indices for backprop when keep_cache; preacts lists the conv/linear
    outputs (before any later activation) when capture.
    """
    out = np.asarray(x, dtype=np.float64)
    caches = [] if keep_cache else None
    preacts = [] if capture else None
    for i, layer in enumerate(model.layers):
        try:
            if layer.kind == "conv2d":
                inp = out
                out = _conv2d_batch(inp, layer)
                if keep_cache:
                    caches.append(inp)
            elif layer.kind == "linear":
                inp = out
                if inp.ndim != 2 or inp.shape[1] != layer.in_dim:
                    raise ValidationError(
                        f"linear: input shape {inp.shape[1:]} incompatible with in-dim {layer.in_dim}")
                out = inp @ layer.weights.T + layer.bias
                if keep_cache:
                    caches.append(inp)
            elif layer.kind == "relu":
                inp = out
                out = np.maximum(inp, 0.0)
                if keep_cache:
                    caches.append(inp)
            elif layer.kind == "maxpool2d":
                inp = out
                out, idx = _maxpool_batch(inp, layer)
                if keep_cache:
                    caches.append((inp.shape, idx))
            elif layer.kind == "flatten":
                inp = out
                out = inp.reshape(inp.shape[0], -1)
                if keep_cache:
                    caches.append(inp.shape)
            else:
                raise ValidationError(f"unknown layer kind {layer.kind!r}")
        except ValidationError as e:
            raise ValidationError(f"layer {i} ({layer.kind}): {e}") from None
        if capture and layer.kind in VOTABLE_KINDS:
            preacts.append(out)
    return out, caches, preacts


def _backward_batch(model, caches, dlogits, want_weights=False):
    """Reverse accumulation through all layers.

    Returns (d_input, grads) where grads[i] is (dw, db) for parametric layers
    when want_weights, else None.
    """
    delta = dlogits
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        cache = caches[i]
        if layer.kind == "conv2d":
            delta, dw, db = _conv2d_backward(delta, cache, layer, want_weights)
            if want_weights:
                grads[i] = (dw, db)
        elif layer.kind == "linear":
            if want_weights:
                grads[i] = (delta.T @ cache, delta.sum(axis=0))
            delta = delta @ layer.weights
        elif layer.kind == "relu":
            delta = delta * (cache > 0.0)
        elif layer.kind == "maxpool2d":
            x_shape, idx = cache
            delta = _maxpool_backward(delta, idx, x_shape, layer)
        elif layer.kind == "flatten":
            delta = delta.reshape(cache)
    return delta, grads


# ---------------------------------------------------------------------------
# public operations


def conv2d_forward(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    """Cross-correlation with zero padding and stride on one C x H x W sample."""
    return _conv2d_batch(np.asarray(x, dtype=np.float64)[None], layer)[0]


def linear_forward(x: np.ndarray, layer: Linear) -> np.ndarray:
    """y = Wx + b for one input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.in_dim,):
        raise ValidationError(f"linear: input shape {x.shape} incompatible with in-dim {layer.in_dim}")
    return layer.weights @ x + layer.bias


def forward_logits(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    """Logits for a batch (N,C,H,W) -> (N,M)."""
    out, _, _ = _forward_batch(model, x)
    return out


def forward_with_trace(model: NetworkModel, x: np.ndarray) -> FeatureTrace:
    """Forward one sample, capturing pre-activation responses at every
    parametric layer plus the final logits and softmax PMF."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(model.input_shape):
        raise ValidationError(
            f"input shape {x.shape} does not match model input {tuple(model.input_shape)}")
    logits, _, preacts = _forward_batch(model, x[None], capture=True)
    for ordinal, (pos, pre) in enumerate(zip(model.votable_layers, preacts)):
        if not np.isfinite(pre).all():
            raise ValidationError(f"non-finite activation at layer {pos} (votable #{ordinal})")
    return FeatureTrace(
        preacts=[p[0] for p in preacts],
        logits=logits[0],
        softmax=softmax(logits[0]),
    )


def input_gradient(model: NetworkModel, x: np.ndarray, label: int) -> np.ndarray:
    """Gradient of softmax cross-entropy w.r.t. the input, for the given class.

    Reverse accumulation through all layers; maxpool routes the gradient to
    the first maximal element (row-major); relu gates on strict positivity of
    the stored pre-activation.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= label < model.num_classes:
        raise ValidationError(f"label {label} out of range [0, {model.num_classes})")
    logits, caches, _ = _forward_batch(model, x[None], keep_cache=True)
    dlogits = softmax(logits)
    dlogits[0, label] -= 1.0
    dx, _ = _backward_batch(model, caches, dlogits)
    return dx[0]


def train_sgd(model: NetworkModel, images: np.ndarray, labels: np.ndarray,
              epochs: int, learning_rate: float, batch_size: int, seed: int) -> NetworkModel:
    """Minibatch SGD on softmax cross-entropy.

    Deterministic given the seed: shuffling uses a dedicated PRNG and all
    reductions run in fixed order. Returns a trained copy; the input model is
    untouched. Raises if the loss goes non-finite.
    """
    if len(images) == 0:
        raise ValidationError("empty training set")
    if len(images) != len(labels):
        raise ValidationError("images/labels length mismatch")
    work = model.copy()
    if epochs == 0:
        return work
    rng = np.random.default_rng(np.random.SeedSequence([0x5D6D, seed]))
    n = len(images)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            xb, yb = images[sel], labels[sel]
            logits, caches, _ = _forward_batch(work, xb, keep_cache=True)
            loss = cross_entropy(logits, yb).mean()
            if not np.isfinite(loss):
                raise ValidationError(
                    f"training diverged: non-finite loss at epoch {epoch}, batch {start // batch_size}")
            dlogits = softmax(logits)
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)
            _, grads = _backward_batch(work, caches, dlogits, want_weights=True)
            for layer, grad in zip(work.layers, grads):
                if grad is not None:
                    dw, db = grad
                    layer.weights -= learning_rate * dw
                    layer.bias -= learning_rate * db
    return work


def accuracy(model: NetworkModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 softmax accuracy over a dataset."""
    hits = 0
    for start in range(0, len(images), batch_size):
        logits = forward_logits(model, images[start:start + batch_size])
        hits += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return hits / len(images)


# ---------------------------------------------------------------------------
# fixture architectures


def he_init_conv(in_ch, out_ch, kernel, rng):
    kh, kw = kernel
    scale = np.sqrt(2.0 / (in_ch * kh * kw))
    return rng.standard_normal((out_ch, in_ch, kh, kw)) * scale


def he_init_linear(in_dim, out_dim, rng):
    scale = np.sqrt(2.0 / in_dim)
    return rng.standard_normal((out_dim, in_dim)) * scale


def small_cnn(input_shape=(1, 28, 28), num_classes=10, seed=0) -> NetworkModel:
    """The desk-scale fixture: two strided conv blocks and two linear layers
    (four votable layers)."""
    rng = np.random.default_rng(np.random.SeedSequence([0x1417, seed]))
    c, h, w = input_shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2  # stride-2, pad-2, kernel-5 halves each dim
    h4, w4 = (h2 + 1) // 2, (w2 + 1) // 2
    flat = 16 * h4 * w4
    layers = [
        Conv2d(c, 8, (5, 5), stride=2, padding=2,
               weights=he_init_conv(c, 8, (5, 5), rng), bias=np.zeros(8)),
        ReLU(),
        Conv2d(8, 16, (5, 5), stride=2, padding=2,
               weights=he_init_conv(8, 16, (5, 5), rng), bias=np.zeros(16)),
        ReLU(),
        Flatten(),
        Linear(flat, 64, weights=he_init_linear(flat, 64, rng), bias=np.zeros(64)),
        ReLU(),
        Linear(64, num_classes, weights=he_init_linear(64, num_classes, rng),
               bias=np.zeros(num_classes)),
    ]
    model = NetworkModel(layers, tuple(input_shape), num_classes)
    model.validate()
    return model


ARCHITECTURES = {"small-cnn": small_cnn}
