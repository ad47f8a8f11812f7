"""Desk-scale datasets and the heterogeneous client partitions built on them."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError

MAGIC = b"FFL1"


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (N, H, W, D) float64
    y: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.y) == 0:
            raise InputError("dataset is empty")
        if len(self.x) != len(self.y):
            raise InputError("examples and labels differ in length")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])


@dataclass(frozen=True)
class Partition:
    """A client's view of a parent dataset.

    ``classes`` lists the parent classes visible to the client, in local label
    order; ``perm`` maps a local label to the label the client is trained on.
    """

    client_id: int
    indices: np.ndarray
    classes: tuple
    perm: np.ndarray
    val_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    domain: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def label_map(self, parent_classes: int) -> np.ndarray:
        lut = np.full(parent_classes, -1, dtype=np.int64)
        lut[np.asarray(self.classes, dtype=np.int64)] = self.perm
        return lut

    def labels(self, d: Dataset, idx: np.ndarray) -> np.ndarray:
        """Presented (mapped and permuted) labels of parent examples ``idx``."""
        out = self.label_map(d.num_classes)[d.y[idx]]
        if out.size and out.min() < 0:
            raise InputError(f"client {self.client_id} holds examples outside its classes")
        return out

    def with_splits(self, val: np.ndarray, test: np.ndarray) -> "Partition":
        return replace(self, val_indices=np.asarray(val, dtype=np.int64),
                       test_indices=np.asarray(test, dtype=np.int64))


@dataclass(frozen=True)
class DomainSpec:
    name: str
    classes: tuple
    clients_per_domain: int = 4


def _identity(C: int) -> np.ndarray:
    return np.arange(C, dtype=np.int64)


def _make_partitions(d: Dataset, buckets: Sequence[Sequence[int]]) -> list[Partition]:
    classes = tuple(range(d.num_classes))
    return [
        Partition(client_id=k, indices=np.sort(np.asarray(b, dtype=np.int64)), classes=classes,
                  perm=_identity(d.num_classes))
        for k, b in enumerate(buckets)
    ]


def train_val_test_split(n: int, fractions=(0.8, 0.1, 0.1), seed=0, indices=None):
    """Shuffle and cut ``indices`` (default ``range(n)``) by ``fractions``."""
    idx = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
    rng = np.random.default_rng(seed)
    idx = idx[rng.permutation(len(idx))]
    n_train = int(round(fractions[0] * len(idx)))
    n_val = int(round(fractions[1] * len(idx)))
    return np.sort(idx[:n_train]), np.sort(idx[n_train:n_train + n_val]), np.sort(idx[n_train + n_val:])


def split_iid(d: Dataset, K: int, seed, indices=None) -> list[Partition]:
    """Deal each class's shuffled instances round-robin over ``K`` clients.

    The dealer position carries across classes, so totals stay balanced too.
    """
    idx = np.arange(len(d)) if indices is None else np.asarray(indices, dtype=np.int64)
    if K < 1:
        raise InputError("K must be at least 1")
    if K > len(idx):
        raise InputError(f"cannot split {len(idx)} examples over {K} clients")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(K)]
    pos = 0
    for c in range(d.num_classes):
        members = idx[d.y[idx] == c]
        members = members[rng.permutation(len(members))]
        for i in members:
            buckets[pos % K].append(int(i))
            pos += 1
    return _make_partitions(d, buckets)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``proportions`` that sum to ``total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def split_dirichlet(d: Dataset, K: int, alpha: float, seed, indices=None) -> list[Partition]:
    """Per class, split instances across clients by a Dirichlet(alpha) draw."""
    if alpha <= 0:
        raise InputError("alpha must be positive")
    if K < 1:
        raise InputError("K must be at least 1")
    idx = np.arange(len(d)) if indices is None else np.asarray(indices, dtype=np.int64)
    if K > len(idx):
        raise InputError(f"cannot split {len(idx)} examples over {K} clients")
    rng = np.random.default_rng(seed)
    # per_class[c][k]: list of instances of class c held by client k
    per_class = []
    for c in range(d.num_classes):
        members = idx[d.y[idx] == c]
        members = members[rng.permutation(len(members))]
        counts = largest_remainder(rng.dirichlet(np.full(K, alpha)), len(members))
        cuts = np.cumsum(counts)[:-1]
        per_class.append([list(chunk) for chunk in np.split(members, cuts)])
    sizes = np.array([sum(len(per_class[c][k]) for c in range(d.num_classes)) for k in range(K)])
    for k in np.flatnonzero(sizes == 0):
        # take one instance from the largest (class, client) cell
        c, donor = max(
            ((c, j) for c in range(d.num_classes) for j in range(K)),
            key=lambda cj: (len(per_class[cj[0]][cj[1]]), -cj[0], -cj[1]),
        )
        per_class[c][k].append(per_class[c][donor].pop())
        sizes[k] += 1
        sizes[donor] -= 1
    buckets = [[int(i) for c in range(d.num_classes) for i in per_class[c][k]] for k in range(K)]
    return _make_partitions(d, buckets)


def permutation_for(global_seed: int, client_id: int, C: int) -> np.ndarray:
    """Label permutation from PCG64 seeded with ``global_seed + client_id``."""
    rng = np.random.Generator(np.random.PCG64(int(global_seed) + int(client_id)))
    return rng.permutation(C).astype(np.int64)


def permute_labels(p: Partition, global_seed: int, client_id: int | None = None) -> Partition:
    cid = p.client_id if client_id is None else client_id
    return replace(p, perm=permutation_for(global_seed, cid, p.num_classes))


def split_domains(d: Dataset, specs: Sequence[DomainSpec], seed, global_seed=None,
                  fractions=(0.8, 0.1, 0.1)) -> list[Partition]:
    """Class-disjoint domains, each cut into equal client shards with permuted labels.

    Each domain's instances are split train/val/test by ``fractions``; its
    clients share the domain's val/test sets. Client ids run consecutively
    across domains. Labels are permuted with ``global_seed + client_id``
    (``global_seed`` defaults to ``seed``).
    """
    seen: set = set()
    for s in specs:
        overlap = seen.intersection(s.classes)
        if overlap:
            raise ConfigError(f"domain {s.name!r} reuses classes {sorted(overlap)}")
        if any(c < 0 or c >= d.num_classes for c in s.classes):
            raise ConfigError(f"domain {s.name!r} names classes outside [0, {d.num_classes})")
        seen.update(s.classes)
    global_seed = seed if global_seed is None else global_seed
    rng = np.random.default_rng(seed)
    partitions = []
    cid = 0
    for dom, s in enumerate(specs):
        members = np.flatnonzero(np.isin(d.y, s.classes))
        train, val, test = train_val_test_split(len(members), fractions, seed=rng.integers(2**32),
                                                indices=members)
        train = train[rng.permutation(len(train))]
        share = len(train) // s.clients_per_domain
        for j in range(s.clients_per_domain):
            p = Partition(client_id=cid, indices=np.sort(train[j * share:(j + 1) * share]),
                          classes=tuple(int(c) for c in s.classes),
                          perm=_identity(len(s.classes)), domain=dom)
            partitions.append(permute_labels(p.with_splits(val, test), global_seed))
            cid += 1
    return partitions


# ---------------------------------------------------------------- datasets

def domain_colours(groups: int, depth: int) -> np.ndarray:
    """Signed channel signatures, one row per group: ``(-1)^popcount(g & (c + 1))``.

    With three channels the first four rows are the vertices of a regular
    tetrahedron (pairwise cosine -1/3).
    """
    g = np.arange(groups)[:, None]
    c = np.arange(depth)[None, :] + 1
    bits = np.vectorize(lambda n: bin(int(n)).count("1"))(g & c)
    return np.where(bits % 2 == 0, 1.0, -1.0)


def synthetic_blobs(num_classes=10, num_examples=2500, height=8, width=8, depth=1, noise=0.3,
                    seed=0, prototype_seed=None, domain_groups=1, name="synthetic-blobs") -> Dataset:
    """One Gaussian prototype image per class plus i.i.d. pixel noise.

    Classes are balanced (assigned cyclically, then shuffled). Prototypes come
    from ``prototype_seed`` when given, so two datasets can share or differ in
    their class geometry independently of the noise draw.

    With ``domain_groups > 1`` consecutive blocks of classes form domains: a
    class prototype is a single-channel pattern spread over the channels by
    its group's signed colour (see ``domain_colours``), so domains differ in
    channel statistics the way grayscale and colour datasets do.
    """
    if domain_groups < 1 or num_classes % domain_groups:
        raise ConfigError("num_classes must be a positive multiple of domain_groups")
    if noise < 0:
        raise ConfigError("noise must be non-negative")
    proto_rng = np.random.default_rng(seed if prototype_seed is None else prototype_seed)
    if domain_groups > 1:
        base = proto_rng.standard_normal((num_classes, height, width, 1))
        group = np.arange(num_classes) // (num_classes // domain_groups)
        prototypes = base * domain_colours(domain_groups, depth)[group][:, None, None, :]
    else:
        prototypes = proto_rng.standard_normal((num_classes, height, width, depth))
    rng = np.random.default_rng([int(seed), 1])
    y = np.arange(num_examples) % num_classes
    y = y[rng.permutation(num_examples)].astype(np.int64)
    x = prototypes[y] + noise * rng.standard_normal((num_examples, height, width, depth))
    return Dataset(x=x, y=y, num_classes=num_classes, name=name)


def read_tiny_images(path, name=None) -> Dataset:
    """Load the ``FFL1`` binary: header, u8 pixels (N*H*W*D), u8 labels (N)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("missing FFL1 magic", 0)
    if len(raw) < 24:
        raise FormatError("truncated header", len(raw))
    N, H, W, D, C = struct.unpack_from("<5I", raw, 4)
    if min(N, H, W, D, C) == 0:
        raise FormatError("zero-sized header field", 4)
    if (H, W) not in ((8, 8), (16, 16)):
        raise FormatError(f"unsupported image size {H}x{W}", 8)
    n_pix = N * H * W * D
    if len(raw) < 24 + n_pix:
        raise FormatError("truncated pixel block", len(raw))
    if len(raw) < 24 + n_pix + N:
        raise FormatError("truncated label block", len(raw))
    if len(raw) > 24 + n_pix + N:
        raise FormatError("trailing bytes after label block", 24 + n_pix + N)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n_pix, offset=24)
    labels = np.frombuffer(raw, dtype=np.uint8, count=N, offset=24 + n_pix).astype(np.int64)
    bad = np.flatnonzero(labels >= C)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside [0, {C})", 24 + n_pix + int(bad[0]))
    x = pixels.reshape(N, H, W, D).astype(np.float64) / 255.0
    return Dataset(x=x, y=labels, num_classes=C, name=name or Path(path).stem)


def write_tiny_images(path, x_u8: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    x_u8 = np.asarray(x_u8, dtype=np.uint8)
    N, H, W, D = x_u8.shape
    header = MAGIC + struct.pack("<5I", N, H, W, D, num_classes)
    Path(path).write_bytes(header + x_u8.tobytes() + np.asarray(labels, dtype=np.uint8).tobytes())


def make_desk_dataset(kind: str, params: dict, seed) -> Dataset:
    params = dict(params)
    if kind == "synthetic-blobs":
        return synthetic_blobs(seed=seed, **params)
    if kind == "tiny-images":
        return read_tiny_images(params["path"], name=params.get("name"))
    raise ConfigError(f"unknown dataset kind {kind!r}")
