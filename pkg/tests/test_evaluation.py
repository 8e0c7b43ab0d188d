from fractions import Fraction

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from aaformer.evaluation import (
    average_precision,
    euclidean_distances,
    evaluate_distances,
    evaluate_leave_one_out,
)


def brute_ap(dist_row, qid, gids):
    """Exact AP and first-hit rank from an explicit sort by (distance, index)."""
    ranked = sorted(range(len(gids)), key=lambda j: (dist_row[j], j))
    hits, precisions = 0, []
    for r, j in enumerate(ranked, 1):
        if gids[j] == qid:
            hits += 1
            precisions.append(Fraction(hits, r))
    first = next(r for r, j in enumerate(ranked, 1) if gids[j] == qid)
    return sum(precisions, Fraction(0)) / len(precisions), first


def test_all_first():
    dist = np.array([[0.0, 1.0], [1.0, 0.0]])
    rep = evaluate_distances(dist, [0, 1], [0, 1])
    assert rep.rank1 == 1.0 and rep.mAP == 1.0


def test_third_of_five():
    dist = np.array([[0.1, 0.2, 0.3, 0.4, 0.5]])
    rep = evaluate_distances(dist, [7], [1, 2, 7, 3, 4])
    assert rep.mAP == 1 / 3 and rep.rank1 == 0.0 and rep.cmc[5] == 1.0


def test_ap_hand():
    assert average_precision(np.array([True, False, True])) == float(Fraction(5, 6))


def test_random_matches_brute(rng):
    dist = rng.random((10, 20))
    qids, gids = rng.integers(0, 4, 10), rng.integers(0, 4, 20)
    rep = evaluate_distances(dist, qids, gids)
    kept = [q for q in range(10) if (gids == qids[q]).any()]
    ref = [brute_ap(dist[q], qids[q], gids) for q in kept]
    assert rep.average_precision.tolist() == [float(a) for a, _ in ref]
    assert rep.mAP == float(sum(a for a, _ in ref) / len(ref))
    for k in (1, 5, 10):
        assert rep.cmc[k] == float(Fraction(sum(f <= k for _, f in ref), len(ref)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gallery_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    dist = r.random((4, 9))
    qids, gids = r.integers(0, 3, 4), r.integers(0, 3, 9)
    perm = r.permutation(9)
    a = evaluate_distances(dist, qids, gids)
    b = evaluate_distances(dist[:, perm], qids, gids[perm])
    assert a.average_precision.tolist() == b.average_precision.tolist() and a.mAP == b.mAP
    assert a.cmc == b.cmc


def test_ties_broken_by_gallery_index():
    dist = np.zeros((1, 3))
    rep = evaluate_distances(dist, [1], [0, 1, 1])
    assert rep.average_precision.tolist() == [float(Fraction(7, 12))]


def test_query_without_positive_excluded():
    dist = np.array([[0.1, 0.2], [0.3, 0.1]])
    rep = evaluate_distances(dist, [0, 9], [0, 1])
    assert rep.excluded_queries == [1]
    assert len(rep.average_precision) == 1
    assert dict(rep.rows())["excluded_queries"] == 1.0


def test_map_is_mean_of_ap(rng):
    rep = evaluate_distances(rng.random((30, 40)), rng.integers(0, 5, 30), rng.integers(0, 5, 40))
    assert abs(rep.mAP - rep.average_precision.mean()) < 1e-15


def test_metric_bounds(rng):
    for _ in range(20):
        rep = evaluate_distances(rng.random((5, 8)), rng.integers(0, 3, 5), rng.integers(0, 3, 8))
        for _, v in rep.rows()[:4]:
            assert 0 <= v <= 1


def test_leave_one_out(rng):
    feats = np.array([[0.0], [0.1], [5.0], [5.2]])
    rep = evaluate_leave_one_out(feats, [0, 0, 1, 1])
    assert rep.rank1 == 1.0 and rep.mAP == 1.0


def test_euclidean(rng):
    q, g = rng.random((3, 4)), rng.random((5, 4))
    d = euclidean_distances(q, g)
    assert abs(d[2, 3] - np.linalg.norm(q[2] - g[3])) < 1e-15
