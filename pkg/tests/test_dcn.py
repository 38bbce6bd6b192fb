from fractions import Fraction

import numpy as np
from hypothesis import given, settings, strategies as st

from cdnst.dcn import DcnBuilder, build_dcn, dense_rank_desc, read_dcn, write_dcn
from cdnst.domain import ActionSequence, Choice, DomainCatalog

from conftest import sequence


def brute_force_dcn(indices, keyword_lists):
    """Recount everything from scratch at every position; rank 1 = smallest raw novelty."""
    rows = []
    for i in range(len(indices)):
        history = [keyword_lists[j] for j in indices[:i]]
        scores = []
        for cand in keyword_lists:
            freq = Fraction(sum(sum(1 for kws in history if k in kws) for k in cand), len(cand))
            if i == 0:
                trans = Fraction(0)
            else:
                total = 0
                for p in history[-1]:
                    for q in cand:
                        total += sum(1 for a, b in zip(history[:-1], history[1:]) if p in a and q in b)
                trans = Fraction(total, len(history[-1]) * len(cand))
            scores.append(1 / ((freq + 1) * (trans + 1)))
        distinct = sorted(set(scores))
        rows.append([distinct.index(s) + 1 for s in scores])
    return np.array(rows, dtype=np.int64).reshape(len(indices), len(keyword_lists))


def random_instance(rng):
    M = int(rng.integers(2, 7))
    vocab = [f"k{i}" for i in range(int(rng.integers(1, 8)))]
    kws = []
    for _ in range(M):
        n = int(rng.integers(1, min(4, len(vocab)) + 1))
        kws.append(tuple(vocab[j] for j in rng.choice(len(vocab), n, replace=False)))
    N = int(rng.integers(0, 21))
    return [int(x) for x in rng.integers(0, M, N)], kws


def dcn_of(indices, kws):
    cat = DomainCatalog("S", tuple(Choice(f"c{j}", k) for j, k in enumerate(kws)))
    return build_dcn(sequence(indices, "S"), cat)


def test_worked_example(worked_catalog):
    dcn = build_dcn(sequence([2, 0, 2, 1, 3], "S"), worked_catalog)
    assert dcn.ranks[4].tolist() == [1, 1, 1, 2]
    assert dcn.ranks[4, 3] == 2


def test_first_row_is_all_ties(worked_catalog):
    builder = DcnBuilder(worked_catalog)
    assert builder.row().tolist() == [1, 1, 1, 1]


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(200):
        indices, kws = random_instance(rng)
        np.testing.assert_array_equal(dcn_of(indices, kws).ranks, brute_force_dcn(indices, kws))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_dcn_properties(data):
    M = data.draw(st.integers(2, 6))
    kws = [tuple(data.draw(st.sets(st.sampled_from("abcdef"), min_size=1, max_size=4))) for _ in range(M)]
    indices = data.draw(st.lists(st.integers(0, M - 1), max_size=15))
    ranks = dcn_of(indices, kws).ranks
    assert ranks.shape == (len(indices), M)
    for row in ranks:
        # dense: every rank from 1 to the row max appears
        assert set(row.tolist()) == set(range(1, row.max() + 1))
    np.testing.assert_array_equal(ranks, brute_force_dcn(indices, kws))


def test_builder_copy_is_independent(worked_catalog):
    a = DcnBuilder(worked_catalog)
    a.push(2)
    b = a.copy()
    b.push(0)
    np.testing.assert_array_equal(a.row(), build_dcn(sequence([2, 0], "S"), worked_catalog).ranks[1])


def test_dense_rank_desc():
    assert dense_rank_desc([Fraction(8), Fraction(1), Fraction(8), Fraction(3)]).tolist() == [1, 3, 1, 2]


def test_normalized_and_roundtrip(tmp_path, worked_catalog):
    dcn = build_dcn(sequence([2, 0, 2, 1, 3], "S"), worked_catalog)
    np.testing.assert_allclose(dcn.normalized(4)[4], [2, 2, 2, 4])
    write_dcn(tmp_path / "d.tsv", dcn)
    np.testing.assert_array_equal(read_dcn(tmp_path / "d.tsv").ranks, dcn.ranks)
