import numpy as np
import pytest

from cdnst.relatedness import (A_TO_B, B_TO_A, EmbeddingTable, RelatednessReport, domain_relatedness, hash_vector,
                               keyword_sim, keyword_stream, select_transfer_users, user_relatedness)

from conftest import catalog, sequence


def table2d():
    return EmbeddingTable({"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [1.0, 1.0]}, dimension=2)


def test_keyword_sim_and_missing():
    t = table2d()
    assert keyword_sim("a", "c", t) == pytest.approx(1 / np.sqrt(2))
    assert keyword_sim("a", "a", t) == pytest.approx(1.0)
    assert keyword_sim("a", "zzz", t) is None
    assert t.missing == 1


def test_hash_fallback_is_deterministic_unit():
    v = hash_vector("jazz")
    assert v.shape == (50,) and np.linalg.norm(v) == pytest.approx(1.0)
    np.testing.assert_array_equal(v, hash_vector("jazz"))
    t = EmbeddingTable(hash_fallback=True)
    assert keyword_sim("jazz", "jazz", t) == pytest.approx(1.0)
    assert abs(keyword_sim("jazz", "rock", t)) < 0.6


def test_table_validation(tmp_path):
    t = EmbeddingTable(dimension=2)
    with pytest.raises(ValueError):
        t.add("x", [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        t.add("x", [0.0, 0.0])
    p = tmp_path / "emb.tsv"
    p.write_text("Will Smith\t1 0\nb\t0 2\n")
    loaded = EmbeddingTable.load(p)
    assert loaded.dimension == 2 and "will_smith" in loaded.vectors
    p.write_text("bad line without tab\n")
    with pytest.raises(ValueError):
        EmbeddingTable.load(p)


def test_window_is_half_open():
    t = table2d()
    a = [("a", 0)]
    # same-time and exactly-tau pairs: only the latter counts
    sim, pairs = user_relatedness(a, [("c", 0), ("b", 10), ("a", 11)], t, tau=10)
    assert pairs == 1 and sim == pytest.approx(0.0)
    assert user_relatedness(a, [], t, 10) == (0.0, 0)


def test_direction_asymmetry_and_exclusion():
    t = table2d()
    users = {
        "u1": ([("a", 0)], [("a", 5)]),  # A before B
        "u2": ([("a", 100)], [("b", 0)]),  # B before A, far apart in A->B direction
        "u3": ([], []),
    }
    rep = domain_relatedness(users, t, tau=200)
    assert rep.per_user["u1"][:2] == (1.0, 0.0)
    assert rep.users_ab == 1 and rep.users_ba == 1 and rep.user_count == 3
    assert rep.sim_ab == pytest.approx(1.0)
    assert rep.sim_ba == pytest.approx(0.0)
    assert select_transfer_users(rep, A_TO_B) == {"u1"}
    assert select_transfer_users(rep, B_TO_A) == set()
    with pytest.raises(ValueError):
        select_transfer_users(rep, "sideways")
    text = rep.to_text("movie", "book", per_user=True)
    assert "movie->book\t1.000000\t1" in text and "u3" in text


def test_keyword_stream_expands_keywords():
    cat = catalog("S", [["a"], ["b", "c"]])
    seq = sequence([1, 0], "S", start=5, step=5)
    assert keyword_stream(seq, cat) == [("b", 5), ("c", 5), ("a", 10)]


def test_empty_report_defaults():
    assert RelatednessReport().to_text().count("\n") == 4
