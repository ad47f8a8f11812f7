"""Rank-1 plus sparse-bias kernel reparameterization.

Each trainable layer's kernel is stored as ``(u, v, mu)`` and rebuilt as
``reshape(outer(u, v) + mu)``. For a conv kernel of shape ``(F, F, I, O)``
``u`` has ``F*F`` entries (one spatial filter) and ``v`` has ``I*O``
entries (one coefficient per input/output channel pair); the reshape maps
``M[f1*F + f2, i*O + o]`` to ``W[f1, f2, i, o]``. Dense kernels use
``u`` of length ``I`` and ``v`` of length ``O`` with no reshape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .nn import LayerSpec, conv2d, dense, flatten, maxpool2d, relu


@dataclass(frozen=True)
class FactorizedParam:
    u: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    reshape_sig: tuple

    def __post_init__(self):
        n_u, n_v = len(self.u), len(self.v)
        if self.mu.shape != (n_u, n_v):
            raise ConfigError(f"mu shape {self.mu.shape} != ({n_u}, {n_v})")
        if n_u * n_v != math.prod(self.reshape_sig):
            raise ConfigError(f"len(u)*len(v)={n_u * n_v} does not fill kernel {self.reshape_sig}")
        if len(self.reshape_sig) == 4:
            F = self.reshape_sig[0]
            if self.reshape_sig[1] != F or n_u != F * F:
                raise ConfigError(f"conv factor u must have F*F entries for kernel {self.reshape_sig}")
        elif len(self.reshape_sig) == 2:
            if (n_u, n_v) != tuple(self.reshape_sig):
                raise ConfigError(f"dense factors ({n_u}, {n_v}) do not match {self.reshape_sig}")
        else:
            raise ConfigError(f"unsupported kernel signature {self.reshape_sig}")

    @property
    def size(self) -> int:
        return self.u.size + self.v.size + self.mu.size


def factor_shape(layer: LayerSpec) -> tuple[int, int]:
    """``(len(u), len(v))`` for a trainable layer."""
    if layer.kind == "conv2d":
        return layer.filter_size ** 2, layer.in_dim * layer.out_dim
    if layer.kind == "dense":
        return layer.in_dim, layer.out_dim
    raise ConfigError(f"{layer.kind} layer has no kernel to factorize")


def to_matrix(w: np.ndarray, n_u: int, n_v: int) -> np.ndarray:
    """Inverse of the kernel reshape (row-major, so a plain reshape)."""
    return w.reshape(n_u, n_v)


def reconstruct(p: FactorizedParam) -> np.ndarray:
    M = np.outer(p.u, p.v) + p.mu
    return M.reshape(p.reshape_sig)


def route_gradients(p: FactorizedParam, dW: np.ndarray):
    """Pull a kernel gradient back onto ``(u, v, mu)``."""
    if tuple(dW.shape) != tuple(p.reshape_sig):
        raise ConfigError(f"kernel gradient shape {dW.shape} != {p.reshape_sig}")
    M = to_matrix(dW, len(p.u), len(p.v))
    return M @ p.v, M.T @ p.u, M.copy()


def prox_l1(mu: np.ndarray, lr: float, lambda_sparsity: float) -> np.ndarray:
    """Soft-threshold every entry by ``lr * lambda_sparsity``."""
    if lr <= 0 or lambda_sparsity < 0:
        raise InputError("prox_l1 needs lr > 0 and lambda_sparsity >= 0")
    t = lr * lambda_sparsity
    if t == 0:
        return mu.copy()
    return np.sign(mu) * np.maximum(np.abs(mu) - t, 0.0)


def init_factorized(layer: LayerSpec, rng: np.random.Generator, v_init: str = "ones") -> FactorizedParam:
    """``mu`` starts at zero; ``u`` is He-uniform for a ``(len(u), len(v))``
    matrix, i.e. bound ``sqrt(6 / len(u))``; ``v`` is ``1/sqrt(len(v))``
    everywhere (``v_init="uniform"`` draws it with the same second moment).

    Both factors start with norms of order one, so neither dominates the
    step size seen by the other.
    """
    n_u, n_v = factor_shape(layer)
    bound = math.sqrt(6.0 / n_u)
    u = rng.uniform(-bound, bound, size=n_u)
    if v_init == "ones":
        v = np.full(n_v, 1.0 / math.sqrt(n_v))
    elif v_init == "uniform":
        v = rng.uniform(-math.sqrt(3.0 / n_v), math.sqrt(3.0 / n_v), size=n_v)
    else:
        raise ConfigError(f"unknown v_init {v_init!r}")
    return FactorizedParam(u=u, v=v, mu=np.zeros((n_u, n_v)), reshape_sig=layer.weight_shape)


@dataclass(frozen=True)
class ModelParams:
    """One parameter block per trainable layer; the last is the classifier."""

    blocks: tuple
    kinds: tuple = field(default=())

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("a model needs at least one trainable layer")

    @property
    def layer_count(self) -> int:
        return len(self.blocks)

    @property
    def classifier_index(self) -> int:
        return len(self.blocks) - 1

    @property
    def factorized(self) -> bool:
        return all(isinstance(b, FactorizedParam) for b in self.blocks)

    def weights(self) -> list[np.ndarray]:
        return [reconstruct(b) if isinstance(b, FactorizedParam) else b for b in self.blocks]

    # Leaves: W for plain blocks, u, v, mu for factorized ones, in block order.
    def leaves(self) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            if isinstance(b, FactorizedParam):
                out.extend((b.u, b.v, b.mu))
            else:
                out.append(b)
        return out

    def leaf_tags(self) -> list[tuple[int, str]]:
        out = []
        for i, b in enumerate(self.blocks):
            if isinstance(b, FactorizedParam):
                out.extend(((i, "u"), (i, "v"), (i, "mu")))
            else:
                out.append((i, "W"))
        return out

    def with_leaves(self, leaves: Sequence[np.ndarray]) -> "ModelParams":
        it = iter(leaves)
        blocks = []
        for b in self.blocks:
            if isinstance(b, FactorizedParam):
                blocks.append(replace(b, u=next(it), v=next(it), mu=next(it)))
            else:
                blocks.append(next(it))
        return ModelParams(tuple(blocks), self.kinds)

    def leaf_grads(self, dweights: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Map per-layer kernel gradients onto leaves."""
        out = []
        for b, dw in zip(self.blocks, dweights):
            if isinstance(b, FactorizedParam):
                out.extend(route_gradients(b, dw))
            else:
                out.append(dw)
        return out

    def with_blocks(self, updates: dict) -> "ModelParams":
        blocks = list(self.blocks)
        for i, b in updates.items():
            blocks[i] = b
        return ModelParams(tuple(blocks), self.kinds)

    def copy(self) -> "ModelParams":
        return self.with_leaves([leaf.copy() for leaf in self.leaves()])


V_INITS = ("uniform_hidden", "ones", "uniform")


def init_model(net: Sequence[LayerSpec], rng: np.random.Generator, factorized: bool = False,
               v_init: str = "uniform_hidden") -> ModelParams:
    """He-uniform plain kernels, or factorized blocks.

    ``v_init="uniform_hidden"`` draws ``v`` at random below the classifier
    and keeps the classifier's ``v`` constant. Hidden units then start
    distinct, while the classifier treats every output index alike, so a
    relabeling of classes permutes the classifier's ``v`` and ``mu`` columns
    and leaves every ``u`` untouched.
    """
    if v_init not in V_INITS:
        raise ConfigError(f"unknown v_init {v_init!r}; choose from {V_INITS}")
    layers = [layer for layer in net if layer.trainable]
    blocks = []
    kinds = []
    for i, layer in enumerate(layers):
        kinds.append(layer.kind)
        if factorized:
            mode = v_init
            if v_init == "uniform_hidden":
                mode = "ones" if i == len(layers) - 1 else "uniform"
            blocks.append(init_factorized(layer, rng, mode))
        else:
            bound = math.sqrt(6.0 / layer.fan_in)
            blocks.append(rng.uniform(-bound, bound, size=layer.weight_shape))
    return ModelParams(tuple(blocks), tuple(kinds))


def sparsity_stats(params: ModelParams, zero_tol: float = 0.0):
    """Returns ``(nonzero_mu, total_mu, effective_param_count)``."""
    if zero_tol < 0:
        raise InputError("zero_tol must be non-negative")
    nonzero = total = uv = 0
    for b in params.blocks:
        if isinstance(b, FactorizedParam):
            nonzero += int(np.count_nonzero(np.abs(b.mu) > zero_tol))
            total += b.mu.size
            uv += b.u.size + b.v.size
    return nonzero, total, uv + nonzero


def param_count(net: Sequence[LayerSpec], factorized: bool = False) -> int:
    """Kernel parameter count; ``factorized`` counts ``u`` and ``v`` only (no mu)."""
    total = 0
    for layer in net:
        if not layer.trainable:
            continue
        if factorized:
            total += sum(factor_shape(layer))
        else:
            total += math.prod(layer.weight_shape)
    return total


def resnet9(num_classes: int = 10, in_channels: int = 3) -> list[LayerSpec]:
    """Eight conv layers and a 256-wide classifier.

    Only kernel shapes are meaningful; pooling placement is recorded but the
    stack is meant for parameter and cost accounting, not for execution with
    valid padding.
    """
    return [
        conv2d(in_channels, 64, 3), relu(),
        conv2d(64, 128, 5, stride=2), relu(),
        conv2d(128, 128, 3), relu(),
        conv2d(128, 128, 3), relu(),
        conv2d(128, 256, 3), relu(), maxpool2d(2),
        conv2d(256, 256, 3), relu(),
        conv2d(256, 256, 3), relu(),
        conv2d(256, 256, 3), relu(),
        flatten(),
        dense(256, num_classes),
    ]


def _pooled_features(width: int, input_hw: int) -> int:
    side = (input_hw - 2) // 2
    if side < 1:
        raise ConfigError(f"input side {input_hw} too small for a 3x3 conv and 2x2 pool")
    return width * side * side


def desk_hidden(num_classes: int = 10, in_channels: int = 1, width: int = 8, hidden: int = 32,
                input_hw: int = 8) -> list[LayerSpec]:
    """3x3 conv, 2x2 pool, a hidden dense layer and the classifier."""
    return [
        conv2d(in_channels, width, 3), relu(),
        maxpool2d(2),
        flatten(),
        dense(_pooled_features(width, input_hw), hidden), relu(),
        dense(hidden, num_classes),
    ]


def desk_shallow(num_classes: int = 10, in_channels: int = 1, width: int = 8,
                 input_hw: int = 8) -> list[LayerSpec]:
    """3x3 conv, 2x2 pool and the classifier; the conv is the second-last layer."""
    return [
        conv2d(in_channels, width, 3), relu(),
        maxpool2d(2),
        flatten(),
        dense(_pooled_features(width, input_hw), num_classes),
    ]


NETS = {"desk_hidden": desk_hidden, "desk_shallow": desk_shallow, "resnet9": resnet9}


def build_net(name: str, **kwargs) -> list[LayerSpec]:
    try:
        factory = NETS[name]
    except KeyError:
        raise ConfigError(f"unknown net {name!r}; choose from {sorted(NETS)}") from None
    try:
        return factory(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad arguments for net {name!r}: {exc}") from None
