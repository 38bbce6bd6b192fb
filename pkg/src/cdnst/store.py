"""Directory stores for ingested/synthetic data and fitted models.

Data store layout::

    index.json               domains, users, roles, file names
    catalog_<domain>.tsv     choice_id <TAB> kw;kw;...
    actions_<domain>.tsv     user_id <TAB> choice_id <TAB> timestamp
    truth.json               optional synthetic ground truth

Model store layout::

    index.json               method, domains, holdout, hyperparameters
    fits/<user>.json         one FitResult per user
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .domain import Action, ActionLog, ActionSequence, Choice, DataError, DomainCatalog, validate_sequence
from .gibbs import FitResult
from .harness import Population, UserData

FORMAT_VERSION = 1


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def dir_digest(path: str | Path) -> str:
    """SHA-256 over relative file names and contents, in sorted order.

    Run manifests are skipped. For a data store only its own top-level files
    count, so reports or models written inside it do not change its digest.
    """
    root = Path(path)
    if _is_data_store(root):
        files = [p for p in root.iterdir() if p.is_file()]
    else:
        files = [p for p in root.rglob("*") if p.is_file()]
    h = hashlib.sha256()
    for f in sorted(p for p in files if not p.name.startswith("manifest_")):
        h.update(str(f.relative_to(root)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def _is_data_store(root: Path) -> bool:
    try:
        return "domains" in json.loads((root / "index.json").read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return False


def file_digest(path: str | Path) -> str:
    p = Path(path)
    return dir_digest(p) if p.is_dir() else hashlib.sha256(p.read_bytes()).hexdigest()


def write_store(out: str | Path, log: ActionLog, roles: dict | None = None, truth: dict | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    domains = sorted(log.catalogs)
    for d in domains:
        cat = log.catalogs[d]
        lines = [f"{c.id}\t{';'.join(c.keywords)}" for c in cat.choices]
        (out / f"catalog_{d}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        rows = []
        for user in log.users:
            seq = log.sequences[user].get(d)
            if seq is None:
                continue
            rows += [f"{user}\t{cat[a.choice_index].id}\t{a.timestamp}" for a in seq.actions]
        (out / f"actions_{d}.tsv").write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    index = {"format": FORMAT_VERSION, "domains": domains, "users": log.users, "roles": roles or {}}
    _dump_json(out / "index.json", index)
    if truth is not None:
        _dump_json(out / "truth.json", truth)
    return out


def read_store(path: str | Path) -> tuple[ActionLog, dict]:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise DataError(f"{root} is not a data store (missing index.json)")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    catalogs = {}
    sequences: dict = {u: {} for u in index["users"]}
    for d in index["domains"]:
        choices = []
        for line in (root / f"catalog_{d}.tsv").read_text(encoding="utf-8").splitlines():
            if line:
                cid, kws = line.split("\t")
                choices.append(Choice(cid, tuple(kws.split(";"))))
        cat = DomainCatalog(d, tuple(choices))
        catalogs[d] = cat
        grouped: dict = {}
        for line in (root / f"actions_{d}.tsv").read_text(encoding="utf-8").splitlines():
            if line:
                user, cid, ts = line.split("\t")
                grouped.setdefault(user, []).append(Action(cat.index_of(cid), int(ts)))
        for user, acts in grouped.items():
            sequences.setdefault(user, {})[d] = validate_sequence(ActionSequence(user, d, tuple(acts)), cat)
    return ActionLog(catalogs, sequences), index


def population_from_store(path: str | Path, source: str | None = None, target: str | None = None) -> Population:
    log, index = read_store(path)
    roles = index.get("roles") or {}
    source = source or roles.get("source")
    target = target or roles.get("target")
    if source is None or target is None:
        raise DataError("source and target domains must be given (store has no recorded roles)")
    for d in (source, target):
        if d not in log.catalogs:
            raise DataError(f"domain {d!r} not in store (has {sorted(log.catalogs)})")
    truth_path = Path(path) / "truth.json"
    truth = json.loads(truth_path.read_text(encoding="utf-8")) if truth_path.exists() else {}
    users = []
    for u in log.users:
        per = log.sequences[u]
        empty_s = ActionSequence(u, source, ())
        empty_t = ActionSequence(u, target, ())
        users.append(UserData(u, per.get(source, empty_s), per.get(target, empty_t), truth.get(u)))
    return Population(log.catalogs[source], log.catalogs[target], users, label=f"{source}->{target}")


def log_from_population(pop: Population) -> ActionLog:
    sequences = {u.user_id: {pop.catalog_s.domain_id: u.source, pop.catalog_t.domain_id: u.target}
                 for u in pop.users}
    return ActionLog({pop.catalog_s.domain_id: pop.catalog_s, pop.catalog_t.domain_id: pop.catalog_t}, sequences)


def write_population(out: str | Path, pop: Population) -> Path:
    truth = {u.user_id: u.truth for u in pop.users if u.truth is not None}
    roles = {"source": pop.catalog_s.domain_id, "target": pop.catalog_t.domain_id}
    return write_store(out, log_from_population(pop), roles, truth or None)


def write_models(out: str | Path, meta: dict, fits: dict[str, FitResult]) -> Path:
    out = Path(out)
    (out / "fits").mkdir(parents=True, exist_ok=True)
    for user, res in sorted(fits.items()):
        res.save(out / "fits" / f"{user}.json")
    _dump_json(out / "index.json", {**meta, "users": sorted(fits)})
    return out


def read_models(path: str | Path) -> tuple[dict, dict[str, FitResult]]:
    root = Path(path)
    if not (root / "index.json").exists():
        raise DataError(f"{root} is not a model store (missing index.json)")
    meta = json.loads((root / "index.json").read_text(encoding="utf-8"))
    fits = {u: FitResult.load(root / "fits" / f"{u}.json") for u in meta.get("users", [])}
    return meta, fits
