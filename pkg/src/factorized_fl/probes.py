"""Diagnostics: update divergence between paired trainings and client-similarity heatmaps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import synthetic_blobs
from .engine import INIT_STREAM, RoundReport, cosine_matrix, local_train
from .errors import NumericError
from .factorized import FactorizedParam, ModelParams, init_model

NORMALIZATION = "||delta_a - delta_b||_2 / ||delta_a||_2, delta = params(epoch) - params(init)"


@dataclass
class DivergenceTrace:
    epochs: list
    distances: list
    labels: tuple = ("a", "b")
    normalization: str = NORMALIZATION


@dataclass
class HeatmapSeries:
    rounds: list
    u_cos: list
    v_cos: list
    frequency: np.ndarray
    tau: float


def _xy(data):
    if isinstance(data, tuple):
        return data
    return data.x, data.y


def normalized_distance(delta_a: np.ndarray, delta_b: np.ndarray) -> float:
    ref = np.linalg.norm(delta_a)
    diff = np.linalg.norm(delta_a - delta_b)
    if ref == 0:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / ref)


def _flat(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def _paired_training(net, dataset_a, dataset_b, epochs, seed, factorized, train_kwargs, extract):
    xa, ya = _xy(dataset_a)
    xb, yb = _xy(dataset_b)
    if xa.shape[1:] != xb.shape[1:]:
        raise ValueError("paired datasets differ in input shape")
    init = init_model(net, np.random.default_rng([int(seed), INIT_STREAM]), factorized)
    base = [extract(init, k) for k in range(len(extract.names))]
    models = [init, init]
    velocity = [None, None]
    # same seed for both streams: identical batch order when sizes match
    rngs = [np.random.default_rng([int(seed), 1]), np.random.default_rng([int(seed), 1])]
    traces = [[] for _ in extract.names]
    kwargs = {"batch_size": 32, "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0}
    kwargs.update(train_kwargs)
    for epoch in range(1, epochs + 1):
        for side, (x, y) in enumerate(((xa, ya), (xb, yb))):
            try:
                models[side], velocity[side], _ = local_train(
                    net, models[side], x, y, epochs=1, rng=rngs[side], velocity=velocity[side], **kwargs)
            except NumericError as exc:
                raise NumericError(f"divergence probe side {'ab'[side]} epoch {epoch}: {exc}") from None
        for k in range(len(extract.names)):
            da = extract(models[0], k) - base[k]
            db = extract(models[1], k) - base[k]
            traces[k].append(normalized_distance(da, db))
    return traces


class _Extract:
    def __init__(self, names, fn):
        self.names = names
        self.fn = fn

    def __call__(self, model, k):
        return self.fn(model, self.names[k])


def _all_params(model: ModelParams, _name) -> np.ndarray:
    return _flat(model.leaves())


def _factor(model: ModelParams, name) -> np.ndarray:
    return _flat([getattr(b, name) for b in model.blocks if isinstance(b, FactorizedParam)])


def divergence_probe(net, dataset_a, dataset_b, epochs: int, seed, factorized: bool = False,
                     labels=("a", "b"), **train_kwargs) -> DivergenceTrace:
    """Train two identically initialized copies, one per dataset, and track
    how far their cumulative updates drift apart after each epoch.

    Model ``a`` is the reference: ``d = ||da - db|| / ||da||``.
    """
    (trace,) = _paired_training(net, dataset_a, dataset_b, epochs, seed, factorized, train_kwargs,
                                _Extract(("all",), _all_params))
    return DivergenceTrace(list(range(1, epochs + 1)), trace, tuple(labels))


def uv_divergence_probe(net, dataset_a, dataset_b, epochs: int, seed, labels=("a", "b"),
                        **train_kwargs) -> tuple[DivergenceTrace, DivergenceTrace]:
    """As ``divergence_probe`` on a factorized model, separately over all
    ``u`` factors and all ``v`` factors."""
    tu, tv = _paired_training(net, dataset_a, dataset_b, epochs, seed, True, train_kwargs,
                              _Extract(("u", "v"), _factor))
    ep = list(range(1, epochs + 1))
    return DivergenceTrace(ep, tu, tuple(labels)), DivergenceTrace(ep, tv, tuple(labels))


PAIRINGS = ("same", "permuted", "domain")


def probe_pairings(seed, num_classes: int = 10, examples: int = 600, noise: float = 0.75,
                   depth: int = 3, side: int = 8) -> dict:
    """Reference set ``a`` and its partner for each pairing, as ``(x, y)`` tuples.

    Two colour domains of ``num_classes`` classes are drawn together. ``a``
    and the ``same`` partner are disjoint halves of domain 0; ``permuted``
    is ``a`` itself with a fixed label permutation; ``domain`` holds domain 1
    examples relabeled to ``[0, num_classes)``.
    """
    d = synthetic_blobs(num_classes=2 * num_classes, num_examples=6 * examples, height=side, width=side,
                        depth=depth, noise=noise, seed=seed, domain_groups=2, name="probe")
    first = np.flatnonzero(d.y < num_classes)
    second = np.flatnonzero(d.y >= num_classes)
    if min(len(first), len(second)) < 2 * examples:
        raise ValueError("not enough examples for the requested pairing size")
    a_idx, same_idx, dom_idx = first[:examples], first[examples:2 * examples], second[:examples]
    a = (d.x[a_idx], d.y[a_idx])
    perm = np.random.default_rng([int(seed), 5]).permutation(num_classes)
    return {
        "a": a,
        "same": (d.x[same_idx], d.y[same_idx]),
        "permuted": (a[0], perm[a[1]]),
        "domain": (d.x[dom_idx], d.y[dom_idx] - num_classes),
    }


def heatmap_series(reports: Sequence[RoundReport], tau: float | None = None) -> HeatmapSeries:
    """Per-round cosine matrices of the second-last layer's ``u`` and ``v``.

    Matching frequency counts, over rounds after the first (the rounds in which
    the server matches), how often each pair's ``v`` cosine reached ``tau``.
    """
    reports = [r for r in reports if r.v_snapshot is not None]
    if not reports:
        raise ValueError("reports carry no factor snapshots")
    tau = reports[0].tau if tau is None else tau
    K = len(reports[0].v_snapshot)
    freq = np.zeros((K, K), dtype=np.int64)
    rounds, u_cos, v_cos = [], [], []
    for r in reports:
        U = cosine_matrix(r.u_snapshot)
        V = cosine_matrix(r.v_snapshot)
        rounds.append(r.round)
        u_cos.append(U)
        v_cos.append(V)
        if r.round > 1:
            hit = V >= tau
            np.fill_diagonal(hit, False)
            freq += hit
    return HeatmapSeries(rounds, u_cos, v_cos, freq, tau)


@dataclass
class MatchingSummary:
    frequency: np.ndarray
    within_fraction: float
    vacuous: bool = False
    notes: list = field(default_factory=list)


def matching_frequency(series: HeatmapSeries, domains: Sequence[int]) -> MatchingSummary:
    """Frequency matrix and the share of off-diagonal matches inside a domain.

    With no matches at all the share is reported as 1.0 and flagged vacuous.
    """
    freq = series.frequency
    dom = np.asarray(domains)
    same = dom[:, None] == dom[None, :]
    off = ~np.eye(len(dom), dtype=bool)
    total = int(freq[off].sum())
    if total == 0:
        return MatchingSummary(freq, 1.0, True, ["no above-threshold matches"])
    return MatchingSummary(freq, float(freq[off & same].sum() / total))


def domain_cosine_gap(matrix: np.ndarray, domains: Sequence[int]) -> tuple[float, float]:
    """Mean off-diagonal cosine within domains and across domains."""
    dom = np.asarray(domains)
    same = dom[:, None] == dom[None, :]
    off = ~np.eye(len(dom), dtype=bool)
    within = matrix[off & same]
    cross = matrix[~same]
    return (float(within.mean()) if within.size else float("nan"),
            float(cross.mean()) if cross.size else float("nan"))
