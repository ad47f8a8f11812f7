"""Dense tensor layers with hand-derived forward and backward passes.

Activations use NHWC layout ``(batch, height, width, channels)``. Conv kernels
are stored as ``(F, F, in_channels, out_channels)`` and dense weights as
``(in_dim, out_dim)`` so that ``y = x @ W``. There are no bias vectors.
All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError

TRAINABLE = ("dense", "conv2d")
KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    filter_size: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in TRAINABLE and (self.in_dim < 1 or self.out_dim < 1):
            raise ConfigError(f"{self.kind} layer needs positive in/out dims")
        if self.kind in ("conv2d", "maxpool2d") and self.filter_size < 1:
            raise ConfigError(f"{self.kind} layer needs a positive filter_size")
        if self.stride < 1:
            raise ConfigError("stride must be positive")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.in_dim, self.out_dim)
        if self.kind == "conv2d":
            F = self.filter_size
            return (F, F, self.in_dim, self.out_dim)
        raise ConfigError(f"{self.kind} layer has no weights")

    @property
    def fan_in(self) -> int:
        if self.kind == "conv2d":
            return self.filter_size * self.filter_size * self.in_dim
        return self.in_dim

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.trainable:
            d.update(in_dim=self.in_dim, out_dim=self.out_dim)
        if self.kind in ("conv2d", "maxpool2d"):
            d.update(filter_size=self.filter_size, stride=self.stride)
        return d


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)


def conv2d(in_channels: int, out_channels: int, filter_size: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", in_dim=in_channels, out_dim=out_channels,
                     filter_size=filter_size, stride=stride)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(size: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", filter_size=size, stride=stride or size)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def layer_from_dict(d: dict) -> LayerSpec:
    kind = d.get("kind")
    kwargs = {k: int(v) for k, v in d.items() if k != "kind"}
    if kind == "maxpool2d" and "stride" not in kwargs:
        kwargs["stride"] = kwargs.get("filter_size", 1)
    return LayerSpec(kind, **kwargs)


def trainable_layers(net: Sequence[LayerSpec]) -> list[int]:
    """Positions in ``net`` of the layers that own a weight tensor."""
    return [i for i, layer in enumerate(net) if layer.trainable]


def infer_shapes(net: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-example output shape after every layer; raises ConfigError on mismatch."""
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for idx, layer in enumerate(net):
        where = f"layer {idx} ({layer.kind})"
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.in_dim:
                raise ConfigError(f"{where}: expects input ({layer.in_dim},), got {shape}")
            shape = (layer.out_dim,)
        elif layer.kind in ("conv2d", "maxpool2d"):
            if len(shape) != 3:
                raise ConfigError(f"{where}: expects (H, W, C) input, got {shape}")
            H, W, C = shape
            if layer.kind == "conv2d" and C != layer.in_dim:
                raise ConfigError(f"{where}: expects {layer.in_dim} input channels, got {C}")
            F, s = layer.filter_size, layer.stride
            if H < F or W < F:
                raise ConfigError(f"{where}: spatial size {H}x{W} smaller than filter {F}")
            Ho, Wo = (H - F) // s + 1, (W - F) // s + 1
            shape = (Ho, Wo, layer.out_dim if layer.kind == "conv2d" else C)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    return shapes


def init_weights(net: Sequence[LayerSpec], rng: np.random.Generator) -> list[np.ndarray]:
    """He-uniform kernels, bound sqrt(6 / fan_in)."""
    weights = []
    for layer in net:
        if layer.trainable:
            bound = math.sqrt(6.0 / layer.fan_in)
            weights.append(rng.uniform(-bound, bound, size=layer.weight_shape))
    return weights


# ---------------------------------------------------------------- primitives

def _windows(x: np.ndarray, F: int, stride: int) -> np.ndarray:
    # (N, Ho, Wo, C, F, F)
    return sliding_window_view(x, (F, F), axis=(1, 2))[:, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    win = _windows(x, w.shape[0], stride)
    return np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2]))


def conv2d_backward(x: np.ndarray, w: np.ndarray, stride: int, dout: np.ndarray):
    F = w.shape[0]
    win = _windows(x, F, stride)
    dw = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2]))  # (C, F, F, O)
    dw = dw.transpose(1, 2, 0, 3)
    Ho, Wo = dout.shape[1], dout.shape[2]
    dx = np.zeros_like(x)
    for a in range(F):
        for b in range(F):
            dx[:, a:a + stride * (Ho - 1) + 1:stride, b:b + stride * (Wo - 1) + 1:stride, :] += (
                dout @ w[a, b].T
            )
    return dw, dx


def maxpool_forward(x: np.ndarray, size: int, stride: int):
    win = _windows(x, size, stride)
    flat = win.reshape(win.shape[:4] + (size * size,))
    arg = np.argmax(flat, axis=-1)  # first index wins on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(x_shape, size: int, stride: int, arg: np.ndarray, dout: np.ndarray):
    dx = np.zeros(x_shape)
    Ho, Wo = dout.shape[1], dout.shape[2]
    for k in range(size * size):
        a, b = divmod(k, size)
        dx[:, a:a + stride * (Ho - 1) + 1:stride, b:b + stride * (Wo - 1) + 1:stride, :] += np.where(
            arg == k, dout, 0.0
        )
    return dx


# ---------------------------------------------------------------- network

@dataclass
class Cache:
    net: tuple
    weights: list
    inputs: list = field(default_factory=list)
    aux: list = field(default_factory=list)
    output_shape: tuple = ()


def forward(net: Sequence[LayerSpec], weights: Sequence[np.ndarray], batch: np.ndarray):
    """Run ``batch`` through ``net``. Returns ``(logits, cache)``.

    ``weights`` holds one dense kernel per trainable layer, in order.
    """
    n_trainable = sum(layer.trainable for layer in net)
    if len(weights) != n_trainable:
        raise ConfigError(f"net has {n_trainable} trainable layers but {len(weights)} weights given")
    x = np.asarray(batch, dtype=np.float64)
    cache = Cache(net=tuple(net), weights=list(weights))
    wi = 0
    for idx, layer in enumerate(net):
        where = f"layer {idx} ({layer.kind})"
        cache.inputs.append(x)
        aux = None
        if layer.kind == "dense":
            w = weights[wi]
            wi += 1
            if w.shape != layer.weight_shape:
                raise ConfigError(f"{where}: weight shape {w.shape} != {layer.weight_shape}")
            if x.ndim != 2 or x.shape[1] != layer.in_dim:
                raise ConfigError(f"{where}: expects input (N, {layer.in_dim}), got {x.shape}")
            x = x @ w
        elif layer.kind == "conv2d":
            w = weights[wi]
            wi += 1
            if w.shape != layer.weight_shape:
                raise ConfigError(f"{where}: weight shape {w.shape} != {layer.weight_shape}")
            if x.ndim != 4 or x.shape[3] != layer.in_dim:
                raise ConfigError(f"{where}: expects input (N, H, W, {layer.in_dim}), got {x.shape}")
            if min(x.shape[1:3]) < layer.filter_size:
                raise ConfigError(f"{where}: spatial size {x.shape[1:3]} smaller than filter")
            x = conv2d_forward(x, w, layer.stride)
        elif layer.kind == "relu":
            aux = x > 0
            x = np.maximum(x, 0.0)  # NaN propagates
        elif layer.kind == "maxpool2d":
            if x.ndim != 4 or min(x.shape[1:3]) < layer.filter_size:
                raise ConfigError(f"{where}: cannot pool input of shape {x.shape}")
            x, aux = maxpool_forward(x, layer.filter_size, layer.stride)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        cache.aux.append(aux)
    cache.output_shape = x.shape
    return x, cache


@dataclass
class Gradients:
    weights: list
    input: np.ndarray


def backward(cache: Cache, dlogits: np.ndarray) -> Gradients:
    """Chain rule through a cached forward pass."""
    if len(cache.inputs) != len(cache.net) or dlogits.shape != cache.output_shape:
        raise RuntimeError(
            f"cache/gradient mismatch: expected dlogits {cache.output_shape}, got {dlogits.shape}"
        )
    g = np.asarray(dlogits, dtype=np.float64)
    wi = len(cache.weights)
    dweights = [None] * wi
    for idx in range(len(cache.net) - 1, -1, -1):
        layer = cache.net[idx]
        x = cache.inputs[idx]
        if layer.kind == "dense":
            wi -= 1
            dweights[wi] = x.T @ g
            g = g @ cache.weights[wi].T
        elif layer.kind == "conv2d":
            wi -= 1
            dweights[wi], g = conv2d_backward(x, cache.weights[wi], layer.stride, g)
        elif layer.kind == "relu":
            g = np.where(cache.aux[idx], g, 0.0)
        elif layer.kind == "maxpool2d":
            g = maxpool_backward(x.shape, layer.filter_size, layer.stride, cache.aux[idx], g)
        elif layer.kind == "flatten":
            g = g.reshape(x.shape)
    return Gradients(weights=dweights, input=g)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, C = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InputError(f"labels must lie in [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    dlogits = np.exp(z - logsum[:, None])
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity=None):
    """One SGD step with momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``;
    ``param <- param - lr * v``. Returns ``(new_params, new_velocity)``;
    the inputs are not modified.
    """
    if lr <= 0 or not 0 <= momentum < 1 or weight_decay < 0:
        raise InputError("need lr > 0, 0 <= momentum < 1, weight_decay >= 0")
    if len(params) != len(grads):
        raise InputError("params and grads differ in length")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise InputError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        step = g + weight_decay * p if weight_decay else g
        v = momentum * v + step
        new_velocity.append(v)
        new_params.append(p - lr * v)
    return new_params, new_velocity
