import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metags.metrics import (RankedList, accuracy, candidate_pool, macro_f1, map_at_k, ndcg_at_k, prc_at_k,
                            pretty_table, ranking_summary, write_table_csv)

import oracles


def lists_from(flags):
    return [RankedList(0, r, list(range(len(f))), [False] * len(f), list(f)) for r, f in enumerate(flags)]


def test_classification_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0 and macro_f1([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
    assert abs(macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 2) - 1 / 3) <= 1e-15
    # an unseen class drags the mean down
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3, abs=1e-15)
    for f in (accuracy, macro_f1):
        with pytest.raises(ValueError):
            f([], [])
        with pytest.raises(ValueError):
            f([0], [0, 1])


def test_ranking_examples():
    assert ndcg_at_k([True, True, False], 2) == 1.0 and map_at_k([True, True, False], 2) == 1.0
    assert abs(ndcg_at_k([False, True], 2) - 0.6309297535714574) <= 1e-15
    assert ndcg_at_k([False] * 4, 3) == 0.0 and map_at_k([False] * 4, 3) == 0.0
    assert map_at_k([False, True, False, True], 4) == pytest.approx((1 / 2 + 2 / 4) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        ndcg_at_k([True], 0)


def test_prc_examples():
    flags = [[True, False, True, False, False], [False, False, False, True, False]]
    assert prc_at_k(lists_from(flags), 5) == 0.3
    assert prc_at_k(lists_from([[False] * 5] * 2), 5) == 0.0
    assert prc_at_k(lists_from([[True] * 6] * 3), 5) == 1.0
    with pytest.raises(ValueError):
        prc_at_k(lists_from([[True] * 3]), 5)
    with pytest.raises(ValueError):
        prc_at_k([], 5)
    # the same close object in two lists counts twice, or once when distinct
    a = RankedList(0, 0, [7, 8], [False, False], [True, False])
    b = RankedList(0, 1, [7, 9], [False, False], [True, False])
    assert prc_at_k([a, b], 2) == 0.5 and prc_at_k([a, b], 2, distinct=True) == 0.25


def test_ranked_list_validation():
    with pytest.raises(ValueError):
        RankedList(0, 0, [1, 1], [True, False], [True, False])
    with pytest.raises(ValueError):
        RankedList(0, 0, [1, 2], [True], [True, False])


labels_st = st.integers(1, 5).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), min_size=1, max_size=40)))


@settings(max_examples=200)
@given(labels_st)
def test_classification_oracle(case):
    n, pairs = case
    pred, lab = [p for p, _ in pairs], [y for _, y in pairs]
    a, f = accuracy(pred, lab), macro_f1(pred, lab, n)
    assert abs(a - oracles.accuracy(pred, lab)) <= 1e-12
    assert abs(f - oracles.macro_f1(pred, lab, n)) <= 1e-12
    assert 0.0 <= a <= 1.0 and 0.0 <= f <= 1.0


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 25))
def test_ranking_oracle(rel, k):
    n, m = ndcg_at_k(rel, k), map_at_k(rel, k)
    assert abs(n - oracles.ndcg(rel, k)) <= 1e-12
    assert abs(m - oracles.map_k(rel, k)) <= 1e-12
    assert 0.0 <= n <= 1.0 + 1e-12 and 0.0 <= m <= 1.0 + 1e-12


@settings(max_examples=200)
@given(st.integers(1, 6).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.lists(st.booleans(), min_size=k, max_size=k + 4), min_size=1, max_size=5))),
    st.randoms(use_true_random=False))
def test_prc_oracle_and_top_k_order(case, rnd):
    k, flags = case
    p = prc_at_k(lists_from(flags), k)
    assert abs(p - oracles.prc(flags, k)) <= 1e-12
    assert 0.0 <= p <= 1.0
    shuffled = []
    for f in flags:
        top = list(f[:k])
        rnd.shuffle(top)
        shuffled.append(top + list(f[k:]))
    assert prc_at_k(lists_from(shuffled), k) == p


def test_candidate_pool():
    rng = np.random.default_rng(0)
    pool = list(range(100))
    out = candidate_pool(pool, [3, 97, 500], 10, rng)
    assert len(out) == 10 and {3, 97} <= set(out) and 500 not in out and out == sorted(out)
    assert candidate_pool([5, 1, 3], [1], 10, rng) == [1, 3, 5]
    a = candidate_pool(pool, [1], 20, np.random.default_rng(4))
    assert a == candidate_pool(pool, [1], 20, np.random.default_rng(4))


def test_ranking_summary_skips_short_lists():
    long = RankedList(0, 0, list(range(12)), [True] + [False] * 11, [True] * 2 + [False] * 10)
    short = RankedList(1, 0, [1, 2], [True, False], [True, False])
    s = ranking_summary({0: [long], 1: [short]}, ks=(10, 20))
    assert s["NDCG@10"] == 1.0 and s["PRC@10"] == 0.2
    assert np.isnan(s["NDCG@20"]) and np.isnan(s["PRC@20"])


def test_tables():
    rows = [{"variant": "full", "Acc": 0.61234, "F1": float("nan")}, {"variant": "2hop", "Acc": 0.5}]
    csv_text = write_table_csv(rows, ["variant"])
    assert csv_text.splitlines() == ["variant,Acc,F1", "full,0.6123,nan", "2hop,0.5000,"]
    assert pretty_table(rows, ["variant"]).splitlines()[0].split() == ["variant", "Acc", "F1"]
