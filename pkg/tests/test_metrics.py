import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdnst.metrics import PAPER_LITERAL, STANDARD, RankedList, all_metrics, dcg, mrr, ndcg_at_k, precision_at_k

binary = st.lists(st.integers(0, 1), min_size=1, max_size=30)


def ranked(rel):
    return RankedList(tuple(range(len(rel))), tuple(rel))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=25), st.integers(1, 30))
def test_ideal_ranking_has_unit_ndcg(rel, k):
    ideal = sorted(rel, reverse=True)
    value = ndcg_at_k(ranked(ideal), k)
    assert value == (0.0 if not any(rel) else pytest.approx(1.0))
    assert 0.0 <= ndcg_at_k(ranked(rel), k) <= 1.0 + 1e-12


def test_ndcg_hand_value():
    # single hit at rank 3 -> 1 / log2(4)
    assert ndcg_at_k(ranked([0, 0, 1, 0]), 15) == pytest.approx(0.5)
    assert dcg([1, 1], 2) == pytest.approx(1 + 1 / math.log2(3))


@pytest.mark.parametrize("rel, expected", [
    ([0, 1, 0], 1 / 2),
    ([1, 0, 1], 1 + 1 / 3),
    ([0, 2, 1], 3 / 2 + 1 / 3),
])
def test_mrr_literal_values(rel, expected):
    assert mrr(ranked(rel)) == pytest.approx(expected)


@settings(max_examples=200, deadline=None)
@given(binary, st.integers(1, 10))
def test_standard_precision_counts(rel, k):
    assert precision_at_k(ranked(rel), k, STANDARD) == sum(rel[:k]) / k


def test_paper_literal_precision_skips_zero_grades():
    with np.errstate(all="raise"):
        assert precision_at_k(ranked([0, 0, 0]), 3, PAPER_LITERAL) == 0.0
        assert precision_at_k(ranked([0, 1, 0]), 3, PAPER_LITERAL) == pytest.approx(0.5)
        assert precision_at_k(ranked([2, 0, 1]), 3, PAPER_LITERAL) == pytest.approx(1 / 3 + 1 / 3)
    with pytest.raises(ValueError):
        precision_at_k(ranked([1]), 1, "other")


def test_from_scores_breaks_ties_by_index():
    r = RankedList.from_scores(np.array([0.2, 0.5, 0.5, 0.1]), 2)
    assert r.items == (1, 2, 0, 3)
    assert r.rel == (0, 1, 0, 0)
    sub = RankedList.from_scores(np.array([0.2, 0.5, 0.5, 0.1]), 3, candidates=[0, 3])
    assert sub.items == (0, 3) and sub.rel == (0, 1)


def test_ranked_list_validation_and_degenerate():
    with pytest.raises(ValueError):
        RankedList((1, 1), (0, 1))
    with pytest.raises(ValueError):
        RankedList((1, 2), (0,))
    with pytest.raises(ValueError):
        RankedList((1,), (-1,))
    assert ranked([0, 0]).is_degenerate()
    m = all_metrics(ranked([0, 0]))
    assert m["ndcg@15"] == 0.0 and m["mrr"] == 0.0


def test_all_metrics_keys():
    assert list(all_metrics(ranked([1]), 10, 5)) == ["mrr", "ndcg@10", "p@5", "p@5_literal"]
