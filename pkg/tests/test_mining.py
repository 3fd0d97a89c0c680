import io

import numpy as np
import pytest

from oracles import brute_force_masks, brute_force_triplets, fisher_yates, pairwise_sq_distances
from tagtriplet.errors import DataError, DimensionError, ParameterError
from tagtriplet.mining import (
    MiniBatch,
    PairCandidates,
    Triplet,
    make_batches,
    mask_stats,
    pairwise_similarity,
    select_pairs,
    select_triplets,
    squared_distances,
    write_triplet_dump,
    write_triplet_dump_header,
)


def unit_rows(X):
    X = np.asarray(X, dtype=float)
    return X / np.linalg.norm(X, axis=1)[:, None]


def make_batch(lsi, embeddings, albums=None):
    b = len(lsi)
    return MiniBatch(
        track_ids=tuple(f"t{i:02d}" for i in range(b)),
        lsi_vectors=unit_rows(lsi),
        embeddings=np.asarray(embeddings, dtype=float),
        album_ids=tuple(albums) if albums is not None else tuple(f"al{i}" for i in range(b)),
    )


def planted_batch(rng, b, n_protos=4, n_albums=6, n_points=8):
    """Rows drawn from a few prototypes so similarities and distances repeat exactly"""
    protos = unit_rows(rng.normal(size=(n_protos, 6)))
    lsi = protos[rng.integers(n_protos, size=b)]
    points = rng.normal(size=(n_points, 3))
    embeddings = points[rng.integers(n_points, size=b)]
    albums = [f"al{x}" for x in rng.integers(n_albums, size=b)]
    return MiniBatch(tuple(f"t{i:02d}" for i in range(b)), lsi, embeddings, tuple(albums))


def test_identical_vectors_have_similarity_one():
    v = unit_rows([[1.0, 2.0, 2.0]] * 3)
    sim = pairwise_similarity(v)
    np.testing.assert_allclose(sim, 1.0 - np.eye(3), atol=1e-12)


def test_orthogonal_vectors_have_similarity_zero():
    np.testing.assert_array_equal(pairwise_similarity(np.eye(3)), np.zeros((3, 3)))


def test_similarity_matches_dot_product_loop(rng):
    X = unit_rows(rng.normal(size=(20, 8)))
    sim = pairwise_similarity(X)
    for i in range(20):
        for j in range(20):
            expected = 0.0 if i == j else sum(X[i, t] * X[j, t] for t in range(8))
            assert abs(sim[i, j] - expected) < 1e-12
    np.testing.assert_array_equal(sim, sim.T)


def test_non_unit_rows_are_rejected():
    with pytest.raises(DataError, match="unit norm"):
        pairwise_similarity(np.array([[1.0, 1.0], [1.0, 0.0]]))


def test_saturated_batch_is_all_positive():
    batch = make_batch([[1.0, 0.0]] * 4, np.zeros((4, 2)))
    pairs = select_pairs(batch)
    np.testing.assert_array_equal(pairs.positive_mask, ~np.eye(4, dtype=bool))
    assert not pairs.negative_mask.any()


def test_same_album_pairs_are_never_positive():
    batch = make_batch([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], np.zeros((3, 2)), albums=["al1", "al1", "al2"])
    pairs = select_pairs(batch)
    assert not pairs.positive_mask[0, 1] and not pairs.positive_mask[1, 0]
    assert pairs.negative_mask[0, 2] and pairs.negative_mask[2, 1]


def test_threshold_order_and_batch_size_are_checked():
    batch = make_batch([[1.0, 0.0]] * 3, np.zeros((3, 2)))
    with pytest.raises(ParameterError, match="theta_neg"):
        select_pairs(batch, theta_pos=0.5, theta_neg=0.5)
    with pytest.raises(DataError):
        select_pairs(make_batch([[1.0, 0.0]] * 2, np.zeros((2, 2))))


def test_mismatched_batch_fields():
    with pytest.raises(DimensionError):
        MiniBatch(("a", "b", "c"), np.eye(3), np.zeros((2, 2)), ("x", "y", "z"))


def test_masks_match_exhaustive_enumeration(rng):
    for _ in range(20):
        batch = planted_batch(rng, 50)
        pairs = select_pairs(batch, 0.8, 0.2)
        pos, neg = brute_force_masks(batch.lsi_vectors, batch.album_ids, 0.8, 0.2)
        np.testing.assert_array_equal(pairs.positive_mask, pos)
        np.testing.assert_array_equal(pairs.negative_mask, neg)


def test_mask_stats_counts():
    batch = make_batch([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], np.zeros((3, 2)))
    stats = mask_stats(select_pairs(batch))
    assert stats.positive_rate == pytest.approx(2 / 6)
    assert stats.negative_rate == pytest.approx(4 / 6)
    assert (stats.anchors_with_both, stats.anchors) == (2, 3)


def test_squared_distances_match_oracle(rng):
    E = rng.normal(size=(15, 4))
    np.testing.assert_allclose(squared_distances(E), pairwise_sq_distances(E), atol=1e-12)
    assert np.all(np.diag(squared_distances(E)) == 0.0)


def hand_pairs(b, positives, negatives):
    pos = np.zeros((b, b), dtype=bool)
    neg = np.zeros((b, b), dtype=bool)
    pos[0, positives] = True
    neg[0, negatives] = True
    return PairCandidates(np.zeros((b, b)), pos, neg)


def test_singleton_candidates_give_the_same_triplet_for_every_strategy():
    batch = make_batch(np.eye(3), np.zeros((3, 2)))
    pairs = hand_pairs(3, [1], [2])
    for strategy in ("paper-literal", "batch-hard", "random"):
        assert select_triplets(batch, pairs, strategy, seed=1) == [Triplet(0, 1, 2)]


def test_argmin_argmax_example():
    d2 = np.zeros((5, 5))
    d2[0, 1:] = [0.1, 0.9, 0.2, 2.0]
    batch = make_batch(np.eye(5), np.zeros((5, 2)))
    pairs = hand_pairs(5, [1, 2], [3, 4])
    assert select_triplets(batch, pairs, "paper-literal", distances=d2) == [Triplet(0, 1, 4)]
    assert select_triplets(batch, pairs, "batch-hard", distances=d2) == [Triplet(0, 2, 3)]


def test_anchor_without_negatives_is_skipped():
    batch = make_batch(np.eye(3), np.zeros((3, 2)))
    assert select_triplets(batch, hand_pairs(3, [1, 2], [])) == []


def test_unknown_strategy():
    batch = make_batch(np.eye(3), np.zeros((3, 2)))
    with pytest.raises(ParameterError, match="strategy"):
        select_triplets(batch, hand_pairs(3, [1], [2]), "semi-hard")


def test_triplets_match_brute_force_with_ties(rng):
    for _ in range(200):
        batch = planted_batch(rng, 64, n_points=int(rng.integers(2, 10)))
        pairs = select_pairs(batch)
        d2 = pairwise_sq_distances(batch.embeddings)
        for strategy in ("paper-literal", "batch-hard"):
            got = [(t.anchor, t.positive, t.negative)
                   for t in select_triplets(batch, pairs, strategy, distances=d2)]
            assert got == brute_force_triplets(pairs.positive_mask, pairs.negative_mask, d2, strategy)


def test_random_strategy_is_seeded_and_valid(rng):
    lsi = np.eye(4, 6)[np.arange(40) % 4]
    albums = tuple(f"al{i % 7}" for i in range(40))
    batch = MiniBatch(tuple(f"t{i:02d}" for i in range(40)), lsi, rng.normal(size=(40, 3)), albums)
    pairs = select_pairs(batch)
    first = select_triplets(batch, pairs, "random", seed=11)
    assert first == select_triplets(batch, pairs, "random", seed=11)
    assert first
    for t in first:
        assert pairs.positive_mask[t.anchor, t.positive] and pairs.negative_mask[t.anchor, t.negative]


def jittered_batch(rng, b):
    """Four orthogonal relatedness clusters with continuous jitter; distances never tie"""
    lsi = unit_rows(np.eye(4, 6)[rng.integers(4, size=b)] + 0.05 * rng.normal(size=(b, 6)))
    albums = tuple(f"al{x}" for x in rng.integers(10, size=b))
    return MiniBatch(tuple(f"t{i:02d}" for i in range(b)), lsi, rng.normal(size=(b, 3)), albums)


@pytest.mark.parametrize("strategy", ["paper-literal", "batch-hard"])
def test_triplets_follow_the_tracks_when_the_batch_is_permuted(rng, strategy):
    for _ in range(20):
        batch = jittered_batch(rng, 30)
        perm = rng.permutation(30)
        shuffled = MiniBatch(
            tuple(batch.track_ids[i] for i in perm),
            batch.lsi_vectors[perm],
            batch.embeddings[perm],
            tuple(batch.album_ids[i] for i in perm),
        )
        original = select_triplets(batch, select_pairs(batch), strategy)
        moved = select_triplets(shuffled, select_pairs(shuffled), strategy)
        assert original
        assert {(t.anchor, t.positive, t.negative) for t in original} == \
            {(int(perm[t.anchor]), int(perm[t.positive]), int(perm[t.negative])) for t in moved}


def test_batch_hard_and_random_draw_from_the_same_candidates(rng):
    for seed in range(10):
        batch = jittered_batch(rng, 40)
        pairs = select_pairs(batch)
        eligible = {a for a in range(40) if pairs.positive_mask[a].any() and pairs.negative_mask[a].any()}
        for strategy in ("batch-hard", "random"):
            triplets = select_triplets(batch, pairs, strategy, seed=seed)
            assert {t.anchor for t in triplets} == eligible
            for t in triplets:
                assert pairs.positive_mask[t.anchor, t.positive]
                assert pairs.negative_mask[t.anchor, t.negative]


def test_six_tracks_in_batches_of_three():
    ids = [f"t{i}" for i in range(6)]
    batches = make_batches(ids, 3, seed=5)
    assert len(batches) == 2
    assert sorted(np.concatenate(batches).tolist()) == list(range(6))
    again = make_batches(ids, 3, seed=5)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_thousand_tracks_follow_reference_shuffle():
    ids = [f"t{i:04d}" for i in range(1000)]
    batches = make_batches(ids, 600, seed=42, epoch=3)
    assert [len(b) for b in batches] == [600, 400]
    assert np.concatenate(batches).tolist() == fisher_yates(1000, 42, 3)


def test_short_final_batch_is_dropped():
    batches = make_batches([f"t{i}" for i in range(8)], 3, seed=0)
    assert [len(b) for b in batches] == [3, 3]
    assert [len(b) for b in make_batches([f"t{i}" for i in range(9)], 3, seed=0)] == [3, 3, 3]


def test_too_few_tracks():
    with pytest.raises(DataError):
        make_batches(["a", "b"], 3, seed=0)
    with pytest.raises(ParameterError):
        make_batches(["a", "b", "c"], 2, seed=0)


def test_triplet_dump_rows():
    batch = make_batch([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    pairs = select_pairs(batch)
    d2 = squared_distances(batch.embeddings)
    triplets = select_triplets(batch, pairs, distances=d2)
    handle = io.StringIO()
    write_triplet_dump_header(handle)
    write_triplet_dump(handle, 1, 0, batch, pairs, triplets, d2)
    lines = handle.getvalue().splitlines()
    assert lines[0] == "# tagtriplet-triplets 1"
    assert lines[1].split("\t")[:3] == ["epoch", "batch", "anchor_id"]
    assert lines[2].split("\t") == ["1", "0", "t00", "t01", "t02", "1", "0", "1", "4"]
    assert len(lines) == 2 + len(triplets)
