import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factorized_fl.data import (
    Dataset,
    DomainSpec,
    domain_colours,
    largest_remainder,
    make_desk_dataset,
    permutation_for,
    permute_labels,
    read_tiny_images,
    split_dirichlet,
    split_domains,
    split_iid,
    synthetic_blobs,
    train_val_test_split,
    write_tiny_images,
)
from factorized_fl.engine import evaluate, local_train
from factorized_fl.errors import ConfigError, FormatError, InputError
from factorized_fl.factorized import build_net, init_model

from oracles import gini


def balanced(n=100, C=10):
    y = np.arange(n) % C
    return Dataset(x=np.zeros((n, 2, 2, 1)), y=y, num_classes=C)


def assert_partition(parts, n):
    joined = np.concatenate([p.indices for p in parts])
    assert len(joined) == n
    assert np.array_equal(np.sort(joined), np.arange(n))


# ---------------------------------------------------------------- iid

def test_iid_single_client_gets_everything():
    d = balanced()
    (p,) = split_iid(d, 1, seed=0)
    assert np.array_equal(p.indices, np.arange(100))


def test_iid_pigeonhole():
    d = balanced(100, 10)
    parts = split_iid(d, 20, seed=3)
    assert_partition(parts, 100)
    for p in parts:
        assert len(p.indices) == 5
        counts = np.bincount(d.y[p.indices], minlength=10)
        assert set(counts.tolist()) <= {0, 1}


def test_iid_is_deterministic_and_rejects_too_many_clients():
    d = balanced()
    a = split_iid(d, 7, seed=[1, 2])
    b = split_iid(d, 7, seed=[1, 2])
    assert all(np.array_equal(p.indices, q.indices) for p, q in zip(a, b))
    with pytest.raises(InputError):
        split_iid(d, 101, seed=0)


# ---------------------------------------------------------------- dirichlet

def test_largest_remainder_sums_exactly():
    counts = largest_remainder(np.array([0.333, 0.333, 0.334]), 10)
    assert counts.sum() == 10
    assert counts.tolist() == [3, 3, 4]


@given(seed=st.integers(0, 2**31), K=st.integers(1, 12), alpha=st.floats(0.05, 50))
def test_dirichlet_is_a_true_partition_without_empty_clients(seed, K, alpha):
    d = balanced(120, 6)
    parts = split_dirichlet(d, K, alpha, seed=seed)
    assert_partition(parts, 120)
    assert all(len(p.indices) > 0 for p in parts)


def test_dirichlet_large_alpha_approaches_uniform():
    d = balanced(10_000, 10)
    K = 10
    parts = split_dirichlet(d, K, 1e6, seed=0)
    for c in range(10):
        members = np.flatnonzero(d.y == c)
        shares = [np.isin(members, p.indices).mean() for p in parts]
        assert max(abs(s - 1 / K) for s in shares) < 0.05


def test_dirichlet_is_more_skewed_than_iid():
    d = balanced(2000, 10)

    def mean_gini(parts):
        return np.mean([gini(np.bincount(d.y[p.indices], minlength=10)) for p in parts])

    assert mean_gini(split_dirichlet(d, 20, 0.5, seed=4)) > mean_gini(split_iid(d, 20, seed=4))


# ---------------------------------------------------------------- permutations

def test_permutation_is_deterministic_bijective_and_client_specific():
    a = permutation_for(5, 3, 10)
    assert np.array_equal(a, permutation_for(5, 3, 10))
    assert sorted(a.tolist()) == list(range(10))
    inverse = np.argsort(a)
    assert np.array_equal(a[inverse], np.arange(10))
    assert not np.array_equal(a, permutation_for(5, 4, 10))
    # seeded by global_seed + client_id
    assert np.array_equal(permutation_for(5, 3, 10), permutation_for(6, 2, 10))


def test_permute_labels_only_changes_presentation():
    d = synthetic_blobs(num_classes=10, num_examples=200, seed=1)
    (p,) = split_iid(d, 1, seed=0)
    q = permute_labels(p, global_seed=9)
    shown = q.labels(d, q.indices)
    assert np.array_equal(shown, q.perm[d.y[q.indices]])
    assert np.array_equal(np.argsort(q.perm)[shown], d.y[q.indices])
    assert np.array_equal(q.indices, p.indices)


# ---------------------------------------------------------------- domains

def test_two_by_two_domains():
    d = synthetic_blobs(num_classes=4, num_examples=400, seed=2)
    specs = [DomainSpec("a", (0, 1), 2), DomainSpec("b", (2, 3), 2)]
    parts = split_domains(d, specs, seed=0)
    assert len(parts) == 4
    joined = np.concatenate([p.indices for p in parts])
    assert len(joined) == len(set(joined.tolist()))
    for p in parts:
        labels = p.labels(d, p.indices)
        assert set(labels.tolist()) <= {0, 1}
        for split in (p.indices, p.val_indices, p.test_indices):
            assert set(d.y[split].tolist()) <= set(p.classes)
        assert not set(p.indices.tolist()) & set(p.val_indices.tolist())
        assert not set(p.val_indices.tolist()) & set(p.test_indices.tolist())


def test_five_by_four_domain_geometry():
    d = synthetic_blobs(num_classes=50, num_examples=5000, seed=3)
    specs = [DomainSpec(f"d{j}", tuple(range(10 * j, 10 * j + 10)), 4) for j in range(5)]
    parts = split_domains(d, specs, seed=1)
    assert len(parts) == 20
    assert [p.client_id for p in parts] == list(range(20))
    for j in range(5):
        members = np.flatnonzero(np.isin(d.y, specs[j].classes))
        train, _, _ = train_val_test_split(len(members), indices=members)
        for p in parts[4 * j:4 * j + 4]:
            assert len(p.indices) == len(train) // 4
            assert p.domain == j


def test_overlapping_domains_rejected():
    d = synthetic_blobs(num_classes=4, num_examples=100, seed=0)
    with pytest.raises(ConfigError):
        split_domains(d, [DomainSpec("a", (0, 1), 1), DomainSpec("b", (1, 2), 1)], seed=0)


def test_domain_colours_are_a_tetrahedron():
    c = domain_colours(4, 3)
    assert c.tolist()[0] == [1.0, 1.0, 1.0]
    cos = (c @ c.T) / 3
    off = cos[~np.eye(4, dtype=bool)]
    assert np.allclose(off, -1 / 3)


# ---------------------------------------------------------------- datasets

def test_noise_free_blobs_are_nearest_prototype_separable():
    d = synthetic_blobs(num_classes=10, num_examples=500, noise=0.0, seed=4)
    protos = np.stack([d.x[np.flatnonzero(d.y == c)[0]] for c in range(10)]).reshape(10, -1)
    flat = d.x.reshape(len(d), -1)
    dist = ((flat[:, None, :] - protos[None]) ** 2).sum(axis=2)
    assert np.array_equal(np.argmin(dist, axis=1), d.y)


def test_blobs_are_bit_deterministic_and_balanced():
    a = make_desk_dataset("synthetic-blobs", {"num_classes": 10, "num_examples": 200}, seed=5)
    b = make_desk_dataset("synthetic-blobs", {"num_classes": 10, "num_examples": 200}, seed=5)
    assert a.x.tobytes() == b.x.tobytes() and np.array_equal(a.y, b.y)
    assert np.bincount(a.y).tolist() == [20] * 10


def test_desk_cnn_learns_low_noise_blobs():
    d = synthetic_blobs(num_classes=10, num_examples=2000, noise=0.3, seed=6)
    train, _, test = train_val_test_split(len(d), seed=0)
    net = build_net("desk_shallow")
    model = init_model(net, np.random.default_rng(0))
    model, _, _ = local_train(net, model, d.x[train], d.y[train], epochs=20, batch_size=32, lr=0.02,
                              momentum=0.9, rng=np.random.default_rng(1))
    acc, _ = evaluate(net, model, d.x[test], d.y[test])
    assert acc > 0.8


def test_tiny_images_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, size=(6, 8, 8, 1), dtype=np.uint8)
    y = np.array([0, 1, 2, 0, 1, 2])
    path = tmp_path / "imgs.bin"
    write_tiny_images(path, x, y, 3)
    d = read_tiny_images(path)
    assert d.num_classes == 3 and d.input_shape == (8, 8, 1)
    assert np.array_equal(d.y, y)
    assert np.array_equal(np.round(d.x * 255).astype(np.uint8), x)


def _header(N=2, H=8, W=8, D=1, C=3):
    return b"FFL1" + struct.pack("<5I", N, H, W, D, C)


@pytest.mark.parametrize("blob, offset", [
    (b"XXXX" + bytes(20), 0),
    (b"FFL1" + bytes(4), 8),
    (_header(H=5, W=5) + bytes(50 + 2), 8),
    (_header() + bytes(100), 124),
    (_header() + bytes(128) + b"\x00", 153),
    (_header() + bytes(128) + b"\x00\x01\x07", 154),
    (_header() + bytes(128) + b"\x00\x07", 153),
])
def test_tiny_images_format_errors_carry_offsets(tmp_path, blob, offset):
    path = tmp_path / "bad.bin"
    path.write_bytes(blob)
    with pytest.raises(FormatError) as info:
        read_tiny_images(path)
    assert info.value.offset == offset
