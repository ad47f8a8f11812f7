"""Federated round loop, aggregation strategies and communication accounting."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Partition
from .errors import ConfigError, InputError, NumericError
from .factorized import FactorizedParam, ModelParams, factor_shape, init_model, param_count, prox_l1
from .nn import LayerSpec, backward, cross_entropy, forward, sgd_step

STRATEGIES = ("standalone", "fedavg", "fedprox", "factorized_fl", "factorized_fl_beta")
MATCHERS = ("similarity", "random", "worst")
BYTES_PER_PARAM = 4
INIT_STREAM = 104729
SELECT_STREAM = 7919


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "fedavg"
    tau: float = 0.5
    epsilon: float = 10.0
    lambda_sparsity: float = 5e-4
    prox_mu: float = 0.01
    share_classifier: bool = True
    participation_fraction: float = 1.0
    matching: str = "similarity"
    exclude_zero_sigma: bool = False
    match_count: int = 3

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.participation_fraction <= 1:
            raise ConfigError("participation_fraction must lie in (0, 1]")
        if self.matching not in MATCHERS:
            raise ConfigError(f"unknown matching {self.matching!r}")

    @property
    def factorized(self) -> bool:
        return self.strategy.startswith("factorized")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 32
    local_epochs: int = 1


# ---------------------------------------------------------------- matching

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def cosine_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise cosines; symmetric by construction with a unit diagonal."""
    V = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    norms = np.linalg.norm(V, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericError(f"zero-norm vector for client index {int(zero[0])}")
    U = V / norms[:, None]
    S = U @ U.T
    S = np.clip((S + S.T) / 2, -1.0, 1.0)
    # identical directions score exactly 1, not 1 - ulp
    S[(U[:, None, :] == U[None, :, :]).all(axis=2)] = 1.0
    return S


def similarity_match(v_vectors: Sequence[np.ndarray], k: int, tau: float) -> np.ndarray:
    """Cosine of client ``k``'s vector to every other, zeroed below ``tau``; self is 1."""
    vk = np.asarray(v_vectors[k], dtype=np.float64)
    nk = np.linalg.norm(vk)
    if nk == 0:
        raise NumericError(f"zero-norm similarity vector for client index {k}")
    sigmas = np.empty(len(v_vectors))
    for i, vi in enumerate(v_vectors):
        if i == k:
            sigmas[i] = 1.0
            continue
        ni = np.linalg.norm(vi)
        if ni == 0:
            raise NumericError(f"zero-norm similarity vector for client index {i}")
        s = 1.0 if np.array_equal(vi, vk) else float(np.dot(vk, vi) / (nk * ni))
        sigmas[i] = s if s >= tau else 0.0
    return sigmas


def softmax_weights(sigmas: np.ndarray, epsilon: float, mask: np.ndarray | None = None) -> np.ndarray:
    z = epsilon * np.asarray(sigmas, dtype=np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def weighted_average_u(u_sets, sigmas, epsilon: float, mask=None):
    """Softmax(epsilon * sigma)-weighted average of per-client vector lists.

    ``u_sets[i]`` is client i's list of vectors (one per layer).
    """
    w = softmax_weights(sigmas, epsilon, mask)
    out = []
    for layer in range(len(u_sets[0])):
        acc = np.zeros_like(u_sets[0][layer], dtype=np.float64)
        for i, us in enumerate(u_sets):
            if w[i] != 0.0:
                acc = acc + w[i] * us[layer]
        out.append(acc)
    return out


def matching_scores(v_vectors, k: int, cfg: StrategyConfig, rng: np.random.Generator | None = None):
    """Scores and aggregation mask for client ``k`` under the configured matcher.

    ``similarity`` thresholds cosines at ``tau``. ``random`` and ``worst``
    pick ``match_count`` partners (uniformly / by lowest cosine) and mask out
    everyone else; partners keep their raw cosine as score.
    """
    if cfg.matching == "similarity":
        sigmas = similarity_match(v_vectors, k, cfg.tau)
        mask = (sigmas != 0.0) if cfg.exclude_zero_sigma else None
        if mask is not None:
            mask[k] = True
        return sigmas, mask
    raw = similarity_match(v_vectors, k, -1.0)
    others = [i for i in range(len(v_vectors)) if i != k]
    n = min(cfg.match_count, len(others))
    if cfg.matching == "random":
        if rng is None:
            raise InputError("random matching needs an rng")
        chosen = sorted(rng.choice(others, size=n, replace=False).tolist()) if n else []
    else:
        chosen = sorted(others, key=lambda i: (raw[i], i))[:n]
    mask = np.zeros(len(v_vectors), dtype=bool)
    mask[k] = True
    mask[chosen] = True
    return raw, mask


# ---------------------------------------------------------------- accounting

@dataclass
class CostLedger:
    """Parameter counts sent each round; round 0 is the initial broadcast."""

    entries: list = field(default_factory=list)

    def charge(self, round_index: int, s2c: int, c2s: int) -> None:
        self.entries.append({"round": int(round_index), "s2c_params": int(s2c), "c2s_params": int(c2s)})

    def round_bytes(self, round_index: int) -> int:
        return sum((e["s2c_params"] + e["c2s_params"]) * BYTES_PER_PARAM
                   for e in self.entries if e["round"] == round_index)

    def to_dict(self) -> dict:
        rows = []
        total = 0
        for e in self.entries:
            b = (e["s2c_params"] + e["c2s_params"]) * BYTES_PER_PARAM
            total += b
            rows.append({**e, "bytes": b, "cumulative_bytes": total})
        return {"bytes_per_param": BYTES_PER_PARAM, "entries": rows, "total_bytes": total}


def comm_cost(ledger: CostLedger, upto_round: int | None = None) -> int:
    """Total bytes: sum over entries of (P_S2C + P_C2S) * 4."""
    return sum((e["s2c_params"] + e["c2s_params"]) * BYTES_PER_PARAM
               for e in ledger.entries if upto_round is None or e["round"] <= upto_round)


def transmitted_params(net: Sequence[LayerSpec], cfg: StrategyConfig) -> tuple[int, int]:
    """Per-client, per-round ``(P_S2C, P_C2S)`` for a strategy on ``net``."""
    layers = [layer for layer in net if layer.trainable]
    shared = layers if cfg.share_classifier else layers[:-1]
    if cfg.strategy == "standalone":
        return 0, 0
    if cfg.strategy in ("fedavg", "fedprox"):
        n = param_count(shared)
        return n, n
    u_total = sum(factor_shape(layer)[0] for layer in shared)
    if cfg.strategy == "factorized_fl":
        sim_layer = layers[-2] if len(layers) > 1 else layers[-1]
        return u_total, u_total + factor_shape(sim_layer)[1]
    full = sum(a + b + a * b for a, b in (factor_shape(layer) for layer in shared))
    return full, full


def formula_cost(net, cfg: StrategyConfig, K: int, R: int) -> int:
    """{(P_S2C + P_C2S) * 4} bytes * K * R."""
    s2c, c2s = transmitted_params(net, cfg)
    return (s2c + c2s) * BYTES_PER_PARAM * K * R


def select_participants(K: int, fraction: float, round_index: int, seed) -> list[int]:
    if not 0 < fraction <= 1:
        raise InputError("fraction must lie in (0, 1]")
    m = math.ceil(fraction * K)
    if m >= K:
        return list(range(K))
    rng = np.random.default_rng([int(seed), int(round_index), SELECT_STREAM])
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


# ---------------------------------------------------------------- local training

@dataclass(frozen=True)
class ClientData:
    x: np.ndarray
    y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @classmethod
    def from_partition(cls, d: Dataset, p: Partition) -> "ClientData":
        return cls(d.x[p.indices], p.labels(d, p.indices),
                   d.x[p.val_indices], p.labels(d, p.val_indices),
                   d.x[p.test_indices], p.labels(d, p.test_indices))


def local_train(net, model: ModelParams, x, y, *, epochs: int, batch_size: int, lr: float,
                momentum: float = 0.0, weight_decay: float = 0.0, rng: np.random.Generator,
                lambda_sparsity: float = 0.0, anchor: dict | None = None, prox_mu: float = 0.0,
                velocity=None):
    """Minibatch SGD for ``epochs`` passes; returns ``(model, velocity, mean_loss)``.

    ``anchor`` maps block index to the server weights for the FedProx term
    ``prox_mu/2 * ||W - anchor||^2``. Factorized ``mu`` leaves are
    soft-thresholded after every step when ``lambda_sparsity > 0``.
    """
    tags = model.leaf_tags()
    mu_leaves = [j for j, (_, name) in enumerate(tags) if name == "mu"]
    prox_leaves = []
    if anchor and prox_mu:
        prox_leaves = [(j, anchor[b]) for j, (b, name) in enumerate(tags) if name == "W" and b in anchor]
    n = len(y)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward(net, model.weights(), x[idx])
            loss, dlogits = cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise NumericError("non-finite training loss")
            grads = model.leaf_grads(backward(cache, dlogits).weights)
            for j, ref in prox_leaves:
                grads[j] = grads[j] + prox_mu * (model.leaves()[j] - ref)
            leaves, velocity = sgd_step(model.leaves(), grads, lr, momentum, weight_decay, velocity)
            if lambda_sparsity > 0:
                for j in mu_leaves:
                    leaves[j] = prox_l1(leaves[j], lr, lambda_sparsity)
            model = model.with_leaves(leaves)
            losses.append(loss)
    return model, velocity, float(np.mean(losses)) if losses else 0.0


def evaluate(net, model: ModelParams, x, y, chunk: int = 1024) -> tuple[float, float]:
    """``(accuracy, mean cross-entropy)``; ``(nan, nan)`` on an empty set."""
    if len(y) == 0:
        return float("nan"), float("nan")
    weights = model.weights()
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(y), chunk):
        logits, _ = forward(net, weights, x[start:start + chunk])
        yy = y[start:start + chunk]
        loss, _ = cross_entropy(logits, yy)
        loss_sum += loss * len(yy)
        correct += int(np.sum(np.argmax(logits, axis=1) == yy))
    return correct / len(y), loss_sum / len(y)


# ---------------------------------------------------------------- federation

@dataclass
class ClientState:
    client_id: int
    partition: Partition
    data: ClientData
    model: ModelParams
    local_epochs: int

    @property
    def num_train(self) -> int:
        return len(self.data.y)


@dataclass
class ServerState:
    global_seed: int
    ledger: CostLedger = field(default_factory=CostLedger)
    global_blocks: dict = field(default_factory=dict)
    uploads: dict = field(default_factory=dict)


@dataclass
class RoundReport:
    round: int
    participants: list
    metrics: dict
    tau: float
    sigma: np.ndarray | None
    u_snapshot: list | None
    v_snapshot: list | None
    s2c_params: int
    c2s_params: int
    round_bytes: int
    cumulative_bytes: int
    nonzero_mu: int | None = None

    def mean(self, key: str) -> float:
        return float(np.mean([m[key] for m in self.metrics.values()]))


def client_rng(global_seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([int(global_seed), int(client_id), int(round_index)])


def _run_clients(clients, ids, fn: Callable, threads: int):
    if threads <= 1 or len(ids) <= 1:
        return [fn(clients[k]) for k in ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda k: fn(clients[k]), ids))


def _train_client(net, cfg: StrategyConfig, train: TrainConfig, server: ServerState, round_index: int,
                  anchor=None):
    def fn(c: ClientState) -> ModelParams:
        try:
            model, _, _ = local_train(
                net, c.model, c.data.x, c.data.y, epochs=c.local_epochs, batch_size=train.batch_size,
                lr=train.lr, momentum=train.momentum, weight_decay=train.weight_decay,
                rng=client_rng(server.global_seed, c.client_id, round_index),
                lambda_sparsity=cfg.lambda_sparsity if c.model.factorized else 0.0,
                anchor=anchor, prox_mu=cfg.prox_mu if cfg.strategy == "fedprox" else 0.0,
            )
        except NumericError as exc:
            raise NumericError(str(exc), client_id=c.client_id, round_index=round_index) from None
        return model
    return fn


def _shared_indices(model: ModelParams, cfg: StrategyConfig) -> list[int]:
    L = model.layer_count
    return [i for i in range(L) if cfg.share_classifier or i != L - 1]


def _sim_index(model: ModelParams) -> int:
    return model.classifier_index - 1 if model.layer_count > 1 else model.classifier_index


def _evaluate_all(net, clients) -> dict:
    out = {}
    for c in clients:
        va, vl = evaluate(net, c.model, c.data.val_x, c.data.val_y)
        ta, tl = evaluate(net, c.model, c.data.test_x, c.data.test_y)
        out[c.client_id] = {"val_acc": va, "val_loss": vl, "test_acc": ta, "test_loss": tl}
    return out


def _snapshots(clients, idx):
    return [c.model.blocks[idx].u.copy() for c in clients], [c.model.blocks[idx].v.copy() for c in clients]


def _finish(net, clients, server, round_index, participants, cfg, sigma=None, snaps=(None, None)):
    P = len(participants)
    s2c, c2s = transmitted_params(net, cfg)
    if cfg.strategy != "standalone":
        server.ledger.charge(round_index, s2c * P, c2s * P)
    nonzero = None
    if clients[0].model.factorized:
        nonzero = sum(int(np.count_nonzero(b.mu)) for c in clients for b in c.model.blocks)
    return RoundReport(
        round=round_index, participants=list(participants), metrics=_evaluate_all(net, clients),
        tau=cfg.tau, sigma=sigma, u_snapshot=snaps[0], v_snapshot=snaps[1],
        s2c_params=s2c * P if cfg.strategy != "standalone" else 0,
        c2s_params=c2s * P if cfg.strategy != "standalone" else 0,
        round_bytes=server.ledger.round_bytes(round_index),
        cumulative_bytes=comm_cost(server.ledger), nonzero_mu=nonzero,
    )


def run_round_standalone(net, clients, server: ServerState, cfg: StrategyConfig, train: TrainConfig,
                         round_index: int, threads: int = 1) -> RoundReport:
    ids = select_participants(len(clients), cfg.participation_fraction, round_index, server.global_seed)
    snaps = _snapshots(clients, _sim_index(clients[0].model)) if clients[0].model.factorized else (None, None)
    models = _run_clients(clients, ids, _train_client(net, cfg, train, server, round_index), threads)
    for k, m in zip(ids, models):
        clients[k].model = m
    return _finish(net, clients, server, round_index, ids, cfg, snaps=snaps)


def run_round_fedavg(net, clients, server: ServerState, cfg: StrategyConfig, train: TrainConfig,
                     round_index: int, threads: int = 1) -> RoundReport:
    """Broadcast the shared layers, train locally, size-weighted average.

    With ``strategy == "fedprox"`` the local loss gains the proximal term
    toward the broadcast weights.
    """
    ids = select_participants(len(clients), cfg.participation_fraction, round_index, server.global_seed)
    shared = _shared_indices(clients[0].model, cfg)
    if not server.global_blocks:
        server.global_blocks = {i: clients[0].model.blocks[i].copy() for i in shared}
    for k in ids:
        clients[k].model = clients[k].model.with_blocks(
            {i: server.global_blocks[i].copy() for i in shared})
    anchor = dict(server.global_blocks) if cfg.strategy == "fedprox" else None
    models = _run_clients(clients, ids, _train_client(net, cfg, train, server, round_index, anchor), threads)
    for k, m in zip(ids, models):
        clients[k].model = m
    total = sum(clients[k].num_train for k in ids)
    for i in shared:
        acc = np.zeros_like(server.global_blocks[i])
        for k in ids:
            acc = acc + (clients[k].num_train / total) * clients[k].model.blocks[i]
        server.global_blocks[i] = acc
    return _finish(net, clients, server, round_index, ids, cfg)


def _aggregate_factors(clients, ids, server, cfg, round_index, names: tuple):
    """Similarity-weighted averaging of the named factors for every participant."""
    shared = _shared_indices(clients[ids[0]].model, cfg)
    vs = [server.uploads[k]["v_sim"] for k in ids]
    sigma = np.zeros((len(ids), len(ids)))
    updates = {}
    for pos, k in enumerate(ids):
        rng = np.random.default_rng([server.global_seed, k, round_index, 31]) if cfg.matching == "random" else None
        sigmas, mask = matching_scores(vs, pos, cfg, rng)
        sigma[pos] = sigmas
        new_blocks = {}
        for name in names:
            sets = [server.uploads[j][name] for j in ids]
            avg = weighted_average_u(sets, sigmas, cfg.epsilon, mask)
            for i, vec in zip(shared, avg):
                new_blocks.setdefault(i, {})[name] = vec
        updates[k] = new_blocks
    for k, new_blocks in updates.items():
        model = clients[k].model
        clients[k].model = model.with_blocks(
            {i: replace(model.blocks[i], **fields) for i, fields in new_blocks.items()})
    return sigma


def _upload(clients, ids, server, cfg, names):
    for k in ids:
        model = clients[k].model
        shared = _shared_indices(model, cfg)
        entry = {name: [getattr(model.blocks[i], name).copy() for i in shared] for name in names}
        entry["v_sim"] = model.blocks[_sim_index(model)].v.copy()
        server.uploads[k] = entry


def _run_factorized(net, clients, server, cfg, train, round_index, threads, names):
    if not clients[0].model.factorized:
        raise ConfigError(f"{cfg.strategy} needs a factorized model")
    ids = select_participants(len(clients), cfg.participation_fraction, round_index, server.global_seed)
    if not server.uploads:
        _upload(clients, range(len(clients)), server, cfg, names)
    sigma = None
    if round_index > 1:
        sigma = _aggregate_factors(clients, ids, server, cfg, round_index, names)
    snaps = _snapshots(clients, _sim_index(clients[0].model))
    models = _run_clients(clients, ids, _train_client(net, cfg, train, server, round_index), threads)
    for k, m in zip(ids, models):
        clients[k].model = m
    _upload(clients, ids, server, cfg, names)
    return _finish(net, clients, server, round_index, ids, cfg, sigma=sigma, snaps=snaps)


def run_round_factorized(net, clients, server: ServerState, cfg: StrategyConfig, train: TrainConfig,
                         round_index: int, threads: int = 1) -> RoundReport:
    """Match on the second-last layer's ``v``, average only the ``u`` factors."""
    return _run_factorized(net, clients, server, cfg, train, round_index, threads, ("u",))


def run_round_factorized_beta(net, clients, server: ServerState, cfg: StrategyConfig, train: TrainConfig,
                              round_index: int, threads: int = 1) -> RoundReport:
    """As ``run_round_factorized`` but ``u``, ``v`` and ``mu`` are all averaged."""
    return _run_factorized(net, clients, server, cfg, train, round_index, threads, ("u", "v", "mu"))


ROUND_FUNCS = {
    "standalone": run_round_standalone,
    "fedavg": run_round_fedavg,
    "fedprox": run_round_fedavg,
    "factorized_fl": run_round_factorized,
    "factorized_fl_beta": run_round_factorized_beta,
}


class Federation:
    """Clients sharing one initialization, driven round by round."""

    def __init__(self, net: Sequence[LayerSpec], dataset: Dataset, partitions: Sequence[Partition],
                 cfg: StrategyConfig, train: TrainConfig, global_seed: int, factorized: bool | None = None,
                 v_init: str = "uniform_hidden", threads: int = 1):
        if factorized is None:
            factorized = cfg.factorized
        if cfg.factorized and not factorized:
            raise ConfigError(f"{cfg.strategy} needs a factorized model")
        if cfg.strategy in ("fedavg", "fedprox") and factorized:
            raise ConfigError(f"{cfg.strategy} runs on plain (unfactorized) models")
        self.net = list(net)
        self.cfg = cfg
        self.train = train
        self.threads = threads
        self.server = ServerState(global_seed=int(global_seed))
        init = init_model(self.net, np.random.default_rng([int(global_seed), INIT_STREAM]), factorized, v_init)
        self.clients = [
            ClientState(client_id=k, partition=p, data=ClientData.from_partition(dataset, p),
                        model=init.copy(), local_epochs=train.local_epochs)
            for k, p in enumerate(partitions)
        ]
        if cfg.strategy != "standalone":
            self.server.ledger.charge(0, sum(leaf.size for leaf in init.leaves()) * len(self.clients), 0)
        self.reports: list[RoundReport] = []

    def run_round(self) -> RoundReport:
        r = len(self.reports) + 1
        report = ROUND_FUNCS[self.cfg.strategy](self.net, self.clients, self.server, self.cfg, self.train,
                                                r, self.threads)
        self.reports.append(report)
        return report

    def run(self, rounds: int) -> list[RoundReport]:
        for _ in range(rounds):
            self.run_round()
        return self.reports
