import math

import numpy as np
import pytest

from dal.anchors import init_anchor_bank
from dal.errors import NoMergedAnchors, QueryWithoutGalleryMatch
from dal.evaluation import (
    association_rate,
    average_precision,
    cmc_curve,
    evaluate_reps,
    mean_average_precision,
    pool_tracklets,
    tracklet_representation,
    true_match_rate,
    true_match_rate_or_none,
)

import oracles


def test_tracklet_representation_examples():
    np.testing.assert_allclose(tracklet_representation([[3.0, 4.0]]), [0.6, 0.8])
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(tracklet_representation([[1.0, 0.0], [0.0, 1.0]]), [h, h], atol=1e-15)
    np.testing.assert_allclose(tracklet_representation([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]), [h, h], atol=1e-15)


def test_tracklet_representation_is_order_invariant(rng):
    frames = rng.standard_normal((7, 5))
    np.testing.assert_array_equal(tracklet_representation(frames), tracklet_representation(frames[::-1]))


def test_pool_tracklets_matches_per_tracklet(rng):
    emb = rng.standard_normal((20, 4))
    cams = np.repeat([0, 1], 10)
    trk = np.concatenate([np.arange(10) % 3, np.arange(10) % 4])
    reps = pool_tracklets(emb, cams, trk, [3, 4])
    for k, n in enumerate([3, 4]):
        for i in range(n):
            ref = tracklet_representation(emb[(cams == k) & (trk == i)])
            np.testing.assert_allclose(reps[k][i], ref, atol=1e-15)


def test_cmc_examples():
    assert cmc_curve([[1, 0]], [7], [[1, 0.1], [0, 1]], [7, 8]).tolist() == [1.0, 1.0]
    # correct item second nearest of three
    c = cmc_curve([[1, 0]], [5], [[1, 0.05], [1, 0.3], [0, 1]], [1, 5, 2])
    assert c.tolist() == [0.0, 1.0, 1.0]
    assert oracles.cmc([[1, 0]], [5], [[1, 0.05], [1, 0.3], [0, 1]], [1, 5, 2]) == [0.0, 1.0, 1.0]


def test_cmc_structure_random(rng):
    q = rng.standard_normal((100, 8))
    g = rng.standard_normal((100, 8))
    ids = np.arange(100)
    c = cmc_curve(q, ids, g, rng.permutation(ids))
    assert np.all(np.diff(c) >= 0)
    assert c[-1] == 1.0


def test_query_without_match():
    with pytest.raises(QueryWithoutGalleryMatch):
        cmc_curve([[1, 0]], [3], [[1, 0]], [4])
    with pytest.raises(QueryWithoutGalleryMatch):
        mean_average_precision([[1, 0]], [3], [[1, 0]], [4])


def test_average_precision_examples():
    assert average_precision(np.array([True, False, False])) == 1.0
    assert average_precision(np.array([False, True, False])) == 0.5
    assert average_precision(np.array([True, False, True])) == pytest.approx(5 / 6)
    assert oracles.ap_all_orderings([1, 0, 1]) == pytest.approx(5 / 6)


def test_map_with_multiple_relevant_items():
    q = [[1.0, 0.0]]
    g = [[1.0, 0.01], [1.0, 0.5], [1.0, 0.9]]
    assert mean_average_precision(q, [1], g, [1, 2, 1]) == pytest.approx(5 / 6)


def test_ties_break_to_lowest_gallery_index():
    g = [[1.0, 0.0], [1.0, 0.0]]
    assert cmc_curve([[1.0, 0.0]], [2], g, [1, 2]).tolist() == [0.0, 1.0]
    assert cmc_curve([[1.0, 0.0]], [1], g, [1, 2]).tolist() == [1.0, 1.0]


def test_map_bounded_by_last_cmc(rng):
    q = rng.standard_normal((30, 6))
    g = rng.standard_normal((60, 6))
    gids = np.concatenate([np.arange(30), np.arange(30)])
    m = mean_average_precision(q, np.arange(30), g, gids)
    assert 0 <= m <= cmc_curve(q, np.arange(30), g, gids)[-1]


def test_evaluate_reps_protocols(rng):
    reps = [rng.standard_normal((5, 4)) for _ in range(3)]
    ids = [np.arange(5), rng.permutation(5), np.array([0, 1, 2, 3, 9])]
    cmc, mAP = evaluate_reps(reps, ids)
    # multi-camera: each camera queries the union of the others, weighted per query
    expected_hits, expected_ap, n = 0, [], 0
    for k in range(3):
        gal = np.concatenate([reps[l] for l in range(3) if l != k])
        gid = np.concatenate([ids[l] for l in range(3) if l != k])
        keep = np.isin(ids[k], gid)
        c = oracles.cmc(reps[k][keep].tolist(), ids[k][keep].tolist(), gal.tolist(), gid.tolist())
        expected_hits += c[0] * keep.sum()
        n += keep.sum()
    assert cmc[0] == pytest.approx(expected_hits / n, abs=1e-12)

    two = evaluate_reps(reps[:2], ids[:2])[0]
    assert two[0] == pytest.approx(oracles.cmc(reps[0].tolist(), ids[0].tolist(), reps[1].tolist(), ids[1].tolist())[0])


def bank_with_merges(pairs):
    bank = init_anchor_bank([[np.eye(2)[i % 2][None] for i in range(2)], [np.eye(2)[i % 2][None] for i in range(2)]])
    for (k, i), (l, t) in pairs:
        bank.peer_camera[k][i] = l
        bank.peer_index[k][i] = t
    return bank


def test_association_rate_examples():
    assert association_rate(bank_with_merges([])) == 0.0
    everything = [((0, 0), (1, 0)), ((0, 1), (1, 1)), ((1, 0), (0, 0)), ((1, 1), (0, 1))]
    assert association_rate(bank_with_merges(everything)) == 1.0
    assert association_rate(bank_with_merges(everything[:2])) == 0.5


def test_true_match_rate_examples():
    ids = [np.array([10, 11]), np.array([10, 11])]
    good = [((0, 0), (1, 0)), ((0, 1), (1, 1)), ((1, 0), (0, 0)), ((1, 1), (0, 1))]
    assert true_match_rate(bank_with_merges(good), ids) == 1.0
    three = good[:3] + [((1, 1), (0, 0))]
    assert true_match_rate(bank_with_merges(three), ids) == 0.75
    with pytest.raises(NoMergedAnchors):
        true_match_rate(bank_with_merges([]), ids)
    assert true_match_rate_or_none(bank_with_merges([]), ids) is None
