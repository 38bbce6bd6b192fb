import pytest

from cdnst.domain import DataError, parse_action_rows
from cdnst.gibbs import SamplerConfig
from cdnst.harness import PopulationSpec, synth_population
from cdnst.store import (dir_digest, population_from_store, read_models, read_store, write_models,
                         write_population, write_store)


def test_population_roundtrip(tmp_path):
    pop = synth_population(PopulationSpec(users=3, N_s=15, N_t=8), seed=4)
    write_population(tmp_path / "st", pop)
    back = population_from_store(tmp_path / "st")
    assert [u.source for u in back.users] == [u.source for u in pop.users]
    assert [u.target for u in back.users] == [u.target for u in pop.users]
    assert back.users[0].truth["nst_s"] == pytest.approx(pop.users[0].truth["nst_s"])
    swapped = population_from_store(tmp_path / "st", "T", "S")
    assert swapped.catalog_s.domain_id == "T"
    with pytest.raises(DataError):
        population_from_store(tmp_path / "st", "S", "X")


def test_ingested_store_needs_roles(tmp_path):
    log = parse_action_rows(["u\ta\tx\t1\tk", "u\ta\ty\t2\tk2", "u\tb\tz\t3\tk", "u\tb\tw\t4\tk3"])
    write_store(tmp_path / "st", log)
    back, index = read_store(tmp_path / "st")
    assert back.sequences["u"]["a"] == log.sequences["u"]["a"]
    with pytest.raises(DataError):
        population_from_store(tmp_path / "st")
    assert population_from_store(tmp_path / "st", "a", "b").users[0].target.N == 2


def test_missing_store(tmp_path):
    with pytest.raises(DataError):
        read_store(tmp_path)
    with pytest.raises(DataError):
        read_models(tmp_path)


def test_digest_ignores_manifests_and_nested_outputs(tmp_path):
    pop = synth_population(PopulationSpec(users=2, N_s=5, N_t=5), seed=0)
    st = write_population(tmp_path / "st", pop)
    before = dir_digest(st)
    (st / "manifest_fit.json").write_text("{}")
    (st / "reports").mkdir()
    (st / "reports" / "r.txt").write_text("x")
    assert dir_digest(st) == before
    (st / "truth.json").write_text("{}")
    assert dir_digest(st) != before


def test_models_roundtrip(tmp_path):
    from cdnst.dcn import build_dcn
    from cdnst.domain import Hyperparams
    from cdnst.gibbs import fit
    pop = synth_population(PopulationSpec(users=1, M_s=5, M_t=5, N_s=10, N_t=10, K=3), seed=0)
    u = pop.users[0]
    hp = Hyperparams.symmetric(3, 5, 5)
    res = fit(u.source, u.target, build_dcn(u.source, pop.catalog_s), build_dcn(u.target, pop.catalog_t), hp,
              SamplerConfig(burn_in=5, samples=2))
    write_models(tmp_path / "m", {"method": "CDNST"}, {u.user_id: res})
    meta, fits = read_models(tmp_path / "m")
    assert meta["method"] == "CDNST" and fits[u.user_id].to_dict() == res.to_dict()
