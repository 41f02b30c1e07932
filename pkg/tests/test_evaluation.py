import logging
import math

import numpy as np
import pytest

from cmml.episodes import LabeledDataset
from cmml.evaluation import (
    SessionReport,
    average_precision,
    evaluate,
    pairwise_distances,
    rank_metrics,
    session_summary,
)
from cmml.model import ModelParams


def test_average_precision_hand_cases():
    assert average_precision([1, 1, 0]) == 1.0
    assert abs(average_precision([1, 0, 1]) - 0.8333333333333334) < 1e-12
    assert abs(average_precision([1, 0, 1]) - (1 + 2 / 3) / 2) < 1e-12
    assert average_precision([0, 1]) == 0.5


def test_average_precision_needs_a_hit():
    with pytest.raises(ValueError, match="no relevant item"):
        average_precision([0, 0, 0])


def test_exact_duplicate_gallery_is_perfect():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    labels = np.arange(6)
    mAP, rank1, used = rank_metrics(pairwise_distances(x, x), labels, labels)
    assert mAP == 1.0 and rank1 == 1.0 and used == 6


def _oracle(dist, ql, gl):
    """Quadratic reference: count, for each relevant item, how many items rank at or above it."""
    aps, top = [], []
    for i in range(len(ql)):
        d = dist[i]
        n = len(d)

        def before(a, b):  # a strictly ahead of b in the ranking
            return d[a] < d[b] or (d[a] == d[b] and a < b)

        relevant = [j for j in range(n) if gl[j] == ql[i]]
        if not relevant:
            continue
        precisions = []
        for j in relevant:
            rank = 1 + sum(before(k, j) for k in range(n))
            hits = 1 + sum(before(k, j) for k in relevant)
            precisions.append(hits / rank)
        aps.append(math.fsum(precisions) / len(precisions))
        first = min(range(n), key=lambda k: (d[k], k))
        top.append(1.0 if gl[first] == ql[i] else 0.0)
    return math.fsum(aps) / len(aps), sum(top) / len(top)


def test_three_query_six_gallery_fixture():
    q = np.array([[0.0], [10.0], [20.0]])
    g = np.array([[0.5], [9.0], [1.0], [20.2], [11.5], [30.0]])
    ql = np.array([0, 1, 2])
    gl = np.array([0, 1, 1, 0, 1, 2])
    mAP, rank1, _ = rank_metrics(pairwise_distances(q, g), ql, gl)
    # q0 ranks g0 g2 g1 g4 g3 g5: hits at 1 and 5
    # q1 ranks g1 g4 g2 g0 g3 g5: hits at 1, 2, 3
    # q2 ranks g3 g4 g5 ...: single hit at 3
    ap0 = (1 + 2 / 5) / 2
    ap1 = 1.0
    ap2 = 1 / 3
    assert mAP == pytest.approx((ap0 + ap1 + ap2) / 3, abs=1e-12)
    assert rank1 == pytest.approx(2 / 3, abs=1e-12)
    oracle = _oracle(pairwise_distances(q, g), ql, gl)
    assert (mAP, rank1) == pytest.approx(oracle, abs=1e-15)


def test_metrics_equal_quadratic_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n_q, n_g = int(rng.integers(1, 6)), int(rng.integers(1, 11))
        n_cls = int(rng.integers(1, 4))
        gl = rng.integers(0, n_cls, size=n_g)
        ql = rng.choice(gl, size=n_q)
        # integer distances make ties common
        dist = rng.integers(0, 4, size=(n_q, n_g)).astype(float)
        mAP, rank1, _ = rank_metrics(dist, ql, gl)
        o_map, o_rank1 = _oracle(dist, ql, gl)
        assert (mAP, rank1) == (o_map, o_rank1)


def test_metrics_invariant_to_positive_scaling():
    rng = np.random.default_rng(2)
    dist = rng.random((5, 9))
    ql, gl = rng.integers(0, 3, 5), np.tile(np.arange(3), 3)
    base = rank_metrics(dist, ql, gl)
    for s in (1e-3, 2.0, 1e4):
        assert rank_metrics(dist * s, ql, gl) == base


def test_random_ranking_gives_chance_rank1():
    rng = np.random.default_rng(3)
    gl = np.array([0, 1])
    trials = [rank_metrics(rng.random((1, 2)), [0], gl)[1] for _ in range(2000)]
    assert abs(np.mean(trials) - 0.5) < 0.05


def test_queries_without_match_are_skipped(caplog):
    dist = np.array([[0.1, 0.2], [0.3, 0.1]])
    with caplog.at_level(logging.WARNING):
        mAP, rank1, used = rank_metrics(dist, [0, 7], [0, 1])
    assert used == 1 and mAP == 1.0 and "excluded" in caplog.text
    with pytest.raises(ValueError, match="no query"):
        rank_metrics(dist, [5, 7], [0, 1])


def test_evaluate_identity_embedder():
    p = ModelParams([np.eye(2)], [np.zeros(2)])
    query = LabeledDataset([[0.0, 0.0], [5.0, 5.0]], [0, 1])
    gallery = LabeledDataset([[0.1, 0.0], [5.0, 5.1], [0.0, 0.2]], [0, 1, 0])
    rep = evaluate(p, query, gallery, task=3)
    assert (rep.task, rep.mAP, rep.rank1, rep.num_queries, rep.gallery_size) == (3, 1.0, 1.0, 2, 3)


def test_session_summary():
    reps = [SessionReport(1, 0.4, 0.5, 1, 1), SessionReport(2, 0.6, 0.7, 1, 1)]
    summary = session_summary(reps)
    assert summary["mAP"]["last"] == 0.6 and summary["mAP"]["avg"] == pytest.approx(0.5, abs=1e-12)
    assert summary["rank1"] == pytest.approx({"last": 0.7, "avg": 0.6})
    with pytest.raises(ValueError, match="no sessions"):
        session_summary([])
