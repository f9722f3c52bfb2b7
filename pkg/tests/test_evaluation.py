import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leaprec.data import DataError, InteractionLog, slice_by_time
from leaprec.evaluation import (
    RandomScorer, embedding_shift, evaluate, metrics_from_ranks, popularity_groups, rank_metrics,
    ranks, sample_negatives, shift_series,
)
from leaprec.model import ModelDims, ParameterSet

from oracles import exhaustive_metrics, exhaustive_rank


class TableScorer:
    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)

    def __call__(self, users, items):
        return self.table[np.asarray(users)[:, None], items]


def full_ranking_fixture(seed, num_users=30, num_items=10, ties=False):
    rng = np.random.default_rng(seed)
    table = rng.integers(0, 4, (num_users, num_items)) if ties else rng.normal(size=(num_users, num_items))
    users = np.arange(num_users)
    items = rng.integers(0, num_items, num_users)
    keys = np.sort(users * num_items + items)     # only the held-out item is observed
    return TableScorer(table), users, items, keys


@pytest.mark.parametrize("ties", [False, True])
def test_full_ranking_matches_enumeration(ties):
    scorer, users, items, keys = full_ranking_fixture(0, ties=ties)
    for u, i in zip(users, items):
        row = scorer.table[u]
        others = [row[j] for j in range(10) if j != i]
        assert rank_metrics(row[i], others) == exhaustive_metrics(row[i], others)
    report = evaluate(scorer, users, items, keys, 10, num_negatives=9)
    per = [exhaustive_metrics(scorer.table[u, i], np.delete(scorer.table[u], i))
           for u, i in zip(users, items)]
    for name, value in report.metrics.items():
        assert value == pytest.approx(math.fsum(p[name] for p in per) / len(per), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=10, max_size=10), st.integers(0, 9))
def test_rank_is_pessimistic_on_ties(scores, pos):
    others = scores[:pos] + scores[pos + 1:]
    r = ranks(np.array([scores[pos]]), np.array([others]))[0]
    assert r == exhaustive_rank(scores[pos], others)


def test_metric_values():
    m = metrics_from_ranks([1, 2, 6])
    assert m["HR@1"].tolist() == [1, 0, 0]
    assert m["HR@5"].tolist() == [1, 1, 0]
    np.testing.assert_allclose(m["NDCG@5"], [1.0, 1 / math.log2(3), 0.0])
    np.testing.assert_allclose(m["MRR"], [1, 0.5, 1 / 6])


def test_random_scorer_hit_rate():
    rng = np.random.default_rng(0)
    n_users, n_items = 200, 300
    users = rng.integers(0, n_users, 20000)
    items = rng.integers(0, n_items, 20000)
    keys = np.unique(users * n_items + items)
    report = evaluate(RandomScorer(1), users, items, keys, n_items, seed=2)
    assert report.n_evaluated == 20000
    assert abs(report.metrics["HR@1"] - 0.01) <= 0.005


def test_negatives_are_distinct_and_unobserved():
    rng = np.random.default_rng(0)
    users = np.arange(20).repeat(5)
    items = rng.integers(0, 150, 100)
    keys = np.unique(users * 150 + items)
    negs = sample_negatives(users, keys, 150, 99, np.random.default_rng(1))
    for u, row in zip(users, negs):
        assert len(set(row)) == 99
        assert not np.isin(u * 150 + row, keys).any()


def test_short_users_raise_or_pad():
    keys = np.arange(5)            # user 0 saw items 0..4 of 8
    with pytest.raises(DataError, match="only 3 unobserved"):
        sample_negatives([0], keys, 8, 5, np.random.default_rng(0))
    negs = sample_negatives([0], keys, 8, 5, np.random.default_rng(0), allow_short=True)
    assert sorted(negs[0, :3]) == [5, 6, 7] and list(negs[0, 3:]) == [-1, -1]

    # the positive outranks 2 of the 3 real negatives; padding never counts
    scorer = TableScorer([[0, 0, 3, 0, 0, 5, 1, 2]])
    report = evaluate(scorer, [0], [2], keys, 8, num_negatives=5, allow_short=True)
    assert report.metrics["MRR"] == 0.5
    assert report.extra == {"short_rows": 1}


def test_evaluate_rejects_bad_input():
    scorer = TableScorer(np.full((2, 200), np.nan))
    with pytest.raises(FloatingPointError):
        evaluate(scorer, [0], [1], np.array([1]), 200)
    with pytest.raises(DataError):
        evaluate(scorer, [], [], np.array([1]), 200)


def test_report_json():
    scorer, users, items, keys = full_ranking_fixture(1)
    report = evaluate(scorer, users, items, keys, 10, num_negatives=9, seed=5)
    data = json.loads(report.to_json())
    assert data["seed"] == 5 and data["n_evaluated"] == 30
    assert set(data["metrics"]) == {"HR@1", "HR@5", "NDCG@1", "NDCG@5", "MRR"}


def test_evaluation_is_seeded():
    scorer = RandomScorer(3)
    args = ([0, 1, 2], [0, 1, 2], np.array([0, 201, 402]), 200)
    a = evaluate(RandomScorer(3), *args, seed=7).metrics
    b = evaluate(RandomScorer(3), *args, seed=7).metrics
    assert a == b and scorer is not None


# ------------------------------------------------------------ diagnostics

def pset(E, num_users=2):
    return ParameterSet(ModelDims(num_users, E.shape[0] - num_users, E.shape[1]), {"E": E})


def test_embedding_shift_by_hand():
    prev = pset(np.array([[9.0, 9.0], [9.0, 9.0], [1.0, 0.0], [0.0, 2.0], [3.0, 4.0]]))
    cur = pset(np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 5.0], [0.0, 1.0], [0.0, 0.0]]))
    res = embedding_shift(prev, cur, {"a": [0, 1], "b": [2]})
    # item 0 turns 90 degrees (squared distance 2), item 1 keeps direction
    assert res.values["a"] == pytest.approx(1.0)
    assert math.isnan(res.values["b"]) and res.skipped == {"a": 0, "b": 1}
    with pytest.raises(ValueError):
        embedding_shift(prev, pset(np.zeros((4, 2))), {"a": [0]})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_embedding_shift_bounds_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    groups = {"all": np.arange(6)}
    v = embedding_shift(a, b, groups).values["all"]
    assert 0.0 <= v <= 4.0
    assert embedding_shift(3.0 * a, 0.5 * b, groups).values["all"] == pytest.approx(v)
    assert embedding_shift(a, a, groups).values["all"] == pytest.approx(0.0, abs=1e-15)


def test_shift_series_indexes_transitions():
    rng = np.random.default_rng(0)
    params = [pset(rng.normal(size=(5, 2))) for _ in range(4)]
    series = shift_series(params, {"g": [0, 2]})
    assert [t for t, _ in series["g"]] == [1, 2, 3]


def test_popularity_groups_by_peak_slice():
    ts = [1577836800 + 86400 * d for d in (5, 35, 65)]        # Jan, Feb, Mar 2020
    rows = [("u1", "a", ts[0]), ("u2", "a", ts[0]), ("u3", "a", ts[1]),
            ("u1", "b", ts[1]), ("u2", "b", ts[1]),
            ("u1", "c", ts[2]), ("u1", "d", ts[0]), ("u2", "d", ts[1])]
    ds = slice_by_time(InteractionLog.from_raw(rows), 1, "2020-04")
    idx = {raw: k for k, raw in enumerate(ds.log.item_ids)}
    pop = popularity_groups(ds, top_n=10)
    assert pop.groups[0].tolist() == sorted([idx["a"], idx["d"]])   # d ties, earliest peak wins
    assert pop.groups[1].tolist() == [idx["b"]]
    assert pop.groups[2].tolist() == [idx["c"]]
    np.testing.assert_allclose(pop.relative[1], [0, 2 / 4, 0])
    assert popularity_groups(ds, top_n=1).groups[0].tolist() == [idx["a"]]
