"""Command-line entry point: ``cdnst <command> ...``.

Every command writes ``manifest_<command>.json`` next to its outputs; ``cdnst rerun
--manifest FILE`` replays it. Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from itertools import combinations
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .baselines import pooled_nsm_fit
from .dcn import build_dcn
from .domain import SECONDS_PER_DAY, DataError, Hyperparams, read_action_log
from .gibbs import SamplerConfig, fit
from .harness import (BUILTIN_METHODS, MODEL_METHODS, EvalProtocol, PopulationSpec, derive_seed,
                      evaluate_next_item, relatedness_for, run_personalized, shift_source_timestamps,
                      synth_population)
from .relatedness import A_TO_B, B_TO_A, EmbeddingTable, domain_relatedness, streams_for
from .store import (file_digest, population_from_store, read_models, read_store, write_models,
                    write_population, write_store)

logger = logging.getLogger("cdnst")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FIT_METHODS = {"nsm": "NSM", "cdnst": "CDNST", "nsm_u": "NSM_U"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdnst", description="Cross-domain novelty-seeking trait toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="parse an action log into a data store")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("fit", help="fit per-user models")
    s.add_argument("--store", required=True)
    s.add_argument("--method", choices=sorted(FIT_METHODS), required=True)
    s.add_argument("--source-domain")
    s.add_argument("--target-domain")
    s.add_argument("--k", type=int, default=9)
    s.add_argument("--alpha", type=_positive_float, default=0.1)
    s.add_argument("--beta", type=_positive_float, default=1.0)
    s.add_argument("--burn-in", type=int, default=SamplerConfig.burn_in)
    s.add_argument("--samples", type=int, default=SamplerConfig.samples)
    s.add_argument("--thin", type=int, default=SamplerConfig.thin)
    s.add_argument("--z-mode", choices=["exact", "paper_faithful"], default=SamplerConfig.z_conditional_mode)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.add_argument("--holdout", type=int, default=5,
                   help="trailing target actions excluded from fitting (match evaluate --holdout)")
    s.add_argument("--out")

    s = sub.add_parser("evaluate", help="next-item evaluation report")
    s.add_argument("--store", required=True)
    s.add_argument("--models", nargs="*", default=[])
    s.add_argument("--methods", required=True, help="comma-separated, e.g. OF,MC,NSM,CDNST")
    s.add_argument("--holdout", type=int, default=5)
    s.add_argument("--candidates", default="full", help="'full' or a negative-sample count")
    s.add_argument("--k-ndcg", type=int, default=15)
    s.add_argument("--k-prec", type=int, default=3)
    s.add_argument("--precision-mode", choices=["standard", "paper_literal"], default="standard")
    s.add_argument("--source-domain")
    s.add_argument("--target-domain")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.add_argument("--out")

    s = sub.add_parser("relatedness", help="directed relatedness per domain pair")
    s.add_argument("--store", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--embeddings")
    g.add_argument("--hash-fallback", action="store_true")
    s.add_argument("--tau-days", type=_positive_float, default=60.0)
    s.add_argument("--per-user", action="store_true")
    s.add_argument("--out")

    s = sub.add_parser("shift", help="move source timestamps earlier")
    s.add_argument("--store", required=True)
    s.add_argument("--advance-days", type=_positive_float, default=60.0)
    s.add_argument("--source-domain")
    s.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="generate a synthetic population store")
    s.add_argument("--users", type=int, default=50)
    s.add_argument("--ms", type=int, default=20)
    s.add_argument("--mt", type=int, default=20)
    s.add_argument("--ns", type=int, default=200)
    s.add_argument("--nt", type=int, default=30)
    s.add_argument("--k", type=int, default=9)
    s.add_argument("--theta-regime", choices=["shared", "independent"], default="shared")
    s.add_argument("--overlap", type=float, default=0.0)
    s.add_argument("--lag-days", type=float, default=0.0)
    s.add_argument("--delta-days", type=float, default=1.0)
    s.add_argument("--mirror", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("experiment", help="run a configured experiment end to end")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    s = sub.add_parser("rerun", help="replay a run manifest")
    s.add_argument("--manifest", required=True)
    return p


# ---------------------------------------------------------------- manifests

def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is None:
        args.seed = 0
        print(f"seed: {args.seed} (default)")
    else:
        print(f"seed: {args.seed}")
    return args.seed


def write_manifest(out_dir: Path, args, inputs: dict, outputs: list, seed: int | None = None) -> Path:
    argv = {k: v for k, v in vars(args).items() if k not in ("verbose", "jobs")}
    manifest = {
        "command": args.command,
        "args": argv,
        "cwd": os.getcwd(),
        "config": argv.get("config"),
        "seed": argv.get("seed", seed),
        "input_digests": {k: file_digest(v) for k, v in sorted(inputs.items()) if v and Path(v).exists()},
        "outputs": sorted(str(Path(o)) for o in outputs),
        "tool_version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"manifest_{args.command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    log = read_action_log(args.log)
    out = write_store(args.out, log)
    n_users = len(log.users)
    print(f"users: {n_users}  duplicates dropped: {log.duplicates}")
    for d, cat in sorted(log.catalogs.items()):
        seqs = [s[d] for s in log.sequences.values() if d in s]
        avg_actions = np.mean([s.N for s in seqs]) if seqs else 0.0
        avg_kw = np.mean([len(c.keywords) for c in cat.choices])
        print(f"domain {d}: M={cat.M} users={len(seqs)} avg_actions={avg_actions:.2f} avg_keywords={avg_kw:.2f}")
    write_manifest(out, args, {"log": args.log}, [out])
    return EXIT_OK


def _fit_one(task):
    method, user, cat_s, cat_t, hp, cfg, holdout = task
    train_t = user.target.prefix(max(user.target.N - holdout, 0))
    name = FIT_METHODS[method]
    cfg = replace(cfg, seed=derive_seed(cfg.seed, user.user_id, name))
    try:
        if method == "nsm":
            res = fit(train_t, None, build_dcn(train_t, cat_t), None, hp.single_domain(hp.alpha_t), cfg)
        elif method == "cdnst":
            res = fit(user.source, train_t, build_dcn(user.source, cat_s), build_dcn(train_t, cat_t), hp, cfg)
        else:
            res = pooled_nsm_fit(user.source, train_t, cat_s, cat_t, hp, cfg).fit
    except DataError as exc:
        return user.user_id, None, str(exc)
    return user.user_id, res, None


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def cmd_fit(args) -> int:
    seed = _resolve_seed(args)
    pop = population_from_store(args.store, args.source_domain, args.target_domain)
    hp = Hyperparams.symmetric(args.k, pop.catalog_s.M, pop.catalog_t.M, args.alpha, args.beta)
    cfg = SamplerConfig(burn_in=args.burn_in, samples=args.samples, thin=args.thin,
                        z_conditional_mode=args.z_mode, seed=seed)
    tasks = [(args.method, u, pop.catalog_s, pop.catalog_t, hp, cfg, args.holdout) for u in pop.users]
    fits, skipped = {}, 0
    for uid, res, err in _map(_fit_one, tasks, args.jobs):
        if res is None:
            skipped += 1
            logger.info("user %s skipped: %s", uid, err)
        else:
            fits[uid] = res
    out = Path(args.out or Path(args.store) / f"models_{args.method}")
    meta = {"method": FIT_METHODS[args.method], "source": pop.catalog_s.domain_id,
            "target": pop.catalog_t.domain_id, "holdout": args.holdout, "K": args.k,
            "sampler": asdict(cfg)}
    write_models(out, meta, fits)
    print(f"fitted {len(fits)} users, skipped {skipped} unfittable -> {out}")
    if fits:
        print(f"mean NST: {np.mean([r.nst_estimate for r in fits.values()]):.4f}")
    write_manifest(out, args, {"store": args.store}, [out])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("evaluate: --methods is empty")
    unknown = [m for m in methods if m not in BUILTIN_METHODS]
    if unknown:
        raise UsageError(f"evaluate: unknown methods {unknown}; choose from {list(BUILTIN_METHODS)}")
    seed = _resolve_seed(args)
    fits, source, target, K = {}, args.source_domain, args.target_domain, 9
    for path in args.models:
        meta, per_user = read_models(path)
        if meta.get("holdout") != args.holdout:
            raise DataError(f"models in {path} were fitted with holdout {meta.get('holdout')}, "
                            f"evaluation uses {args.holdout}")
        fits[meta["method"]] = per_user
        source, target = source or meta["source"], target or meta["target"]
        K = meta["K"]
    missing = [m for m in methods if m in MODEL_METHODS and m not in fits]
    if missing:
        raise UsageError(f"evaluate: no fitted model given for method(s) {', '.join(missing)}")
    pop = population_from_store(args.store, source, target)
    hp = Hyperparams.symmetric(K, pop.catalog_s.M, pop.catalog_t.M)
    if args.candidates == "full":
        scope = {"candidate_scope": "full_catalog"}
    else:
        try:
            scope = {"candidate_scope": "sampled", "negative_sample_count": int(args.candidates)}
        except ValueError:
            raise UsageError("evaluate: --candidates must be 'full' or an integer") from None
    protocol = EvalProtocol(holdout_len=args.holdout, seed=seed, k_ndcg=args.k_ndcg, k_prec=args.k_prec,
                            precision_mode=args.precision_mode, **scope)
    report = evaluate_next_item(pop, methods, protocol, hp, SamplerConfig(seed=seed), fits, jobs=args.jobs)
    out = Path(args.out or Path(args.store) / "reports")
    paths = report.save(out)
    print(report.to_table(), end="")
    write_manifest(out, args, {"store": args.store, **{f"models{i}": m for i, m in enumerate(args.models)}}, paths)
    return EXIT_OK


def cmd_relatedness(args) -> int:
    log, _ = read_store(args.store)
    table = EmbeddingTable(hash_fallback=True) if args.hash_fallback else _load_embeddings(args.embeddings)
    tau = args.tau_days * SECONDS_PER_DAY
    chunks = []
    for a, b in combinations(sorted(log.catalogs), 2):
        users = [(u, s[a], s[b]) for u, s in sorted(log.sequences.items()) if a in s and b in s]
        report = domain_relatedness(streams_for(users, log.catalogs[a], log.catalogs[b]), table, tau)
        chunks.append(report.to_text(a, b, per_user=args.per_user))
    text = "\n".join(chunks)
    if table.missing:
        text += f"# missing keyword lookups: {table.missing}\n"
    print(text, end="")
    out = Path(args.out or Path(args.store) / "reports")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "relatedness.txt"
    path.write_text(text, encoding="utf-8")
    write_manifest(out, args, {"store": args.store, "embeddings": args.embeddings}, [path])
    return EXIT_OK


def _load_embeddings(path):
    if not path or not Path(path).exists():
        raise DataError(f"embedding file {path!r} not found (use --hash-fallback for hashed vectors)")
    return EmbeddingTable.load(path)


def cmd_shift(args) -> int:
    _, index = read_store(args.store)
    roles = index.get("roles") or {}
    source = args.source_domain or roles.get("source")
    if source is None:
        raise UsageError("shift: --source-domain is required for stores without recorded roles")
    target = roles.get("target") if roles.get("source") == source else None
    if target is None:
        others = [d for d in index["domains"] if d != source]
        if len(others) != 1:
            raise UsageError("shift: store must have exactly one non-source domain")
        target = others[0]
    pop = population_from_store(args.store, source, target)
    shifted = shift_source_timestamps(pop, args.advance_days * SECONDS_PER_DAY)
    out = write_population(args.out, shifted)
    print(f"shifted {len(pop.users)} users' {source} actions by {args.advance_days:g} days -> {out}")
    write_manifest(out, args, {"store": args.store}, [out])
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    spec = PopulationSpec(users=args.users, M_s=args.ms, M_t=args.mt, N_s=args.ns, N_t=args.nt, K=args.k,
                          theta_regime=args.theta_regime, overlap=args.overlap, lag_days=args.lag_days,
                          delta_days=args.delta_days, mirror=args.mirror)
    pop = synth_population(spec, seed)
    out = write_population(args.out, pop)
    print(f"synthesized {len(pop.users)} users ({spec.theta_regime} traits) -> {out}")
    write_manifest(out, args, {}, [out])
    return EXIT_OK


def cmd_experiment(args) -> int:
    """Config keys: population {synth: {...}} or {store, source, target}; methods; protocol;
    sampler; seed; relatedness {tau_days, hash_fallback|embeddings}; shift_days; personalized."""
    text = Path(args.config).read_text(encoding="utf-8")
    conf = yaml.safe_load(text) or {}
    seed = int(conf.get("seed", 0))
    popconf = conf.get("population", {})
    if "synth" in popconf:
        pop = synth_population(PopulationSpec(**popconf["synth"]), seed)
    else:
        pop = population_from_store(popconf["store"], popconf.get("source"), popconf.get("target"))
    if conf.get("shift_days"):
        pop = shift_source_timestamps(pop, float(conf["shift_days"]) * SECONDS_PER_DAY)
    K = int(conf.get("K", 9))
    hp = Hyperparams.symmetric(K, pop.catalog_s.M, pop.catalog_t.M, conf.get("alpha", 0.1), conf.get("beta", 1.0))
    cfg = SamplerConfig(**{**conf.get("sampler", {}), "seed": seed})
    protocol = EvalProtocol(**{**conf.get("protocol", {}), "seed": seed})
    methods = conf.get("methods", list(BUILTIN_METHODS))
    out = Path(args.out)
    report = evaluate_next_item(pop, methods, protocol, hp, cfg, jobs=args.jobs)
    paths = report.save(out)
    print(report.to_table(), end="")
    rel = conf.get("relatedness")
    if rel:
        table = (EmbeddingTable(hash_fallback=True) if rel.get("hash_fallback", True)
                 else _load_embeddings(rel.get("embeddings")))
        rrep = relatedness_for(pop, table, float(rel.get("tau_days", 60)) * SECONDS_PER_DAY)
        paths.append(out / "relatedness.txt")
        paths[-1].write_text(rrep.to_text(pop.catalog_s.domain_id, pop.catalog_t.domain_id, per_user=True),
                             encoding="utf-8")
        if conf.get("personalized"):
            for direction, stem in ((A_TO_B, "personalized_ab"), (B_TO_A, "personalized_ba")):
                prep = run_personalized(pop, rrep, hp, cfg, protocol, direction, jobs=args.jobs)
                paths += prep.save(out, stem)
    write_manifest(out, args, {"config": args.config}, paths, seed=seed)
    return EXIT_OK


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = [manifest["command"]]
    for key, value in sorted(manifest["args"].items()):
        if key == "command" or value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            argv += [flag, *map(str, value)]
        else:
            argv += [flag, str(value)]
    print("rerun:", " ".join(argv))
    cwd = manifest.get("cwd")
    here = os.getcwd()
    if cwd and Path(cwd).is_dir():
        os.chdir(cwd)
    try:
        for key, digest in manifest.get("input_digests", {}).items():
            path = _manifest_input(manifest["args"], key)
            if path and Path(path).exists() and file_digest(path) != digest:
                logger.warning("input %s (%s) changed since the manifest was written", key, path)
        return main(argv)
    finally:
        os.chdir(here)


def _manifest_input(argv: dict, key: str):
    if key.startswith("models") and key[6:].isdigit():
        models = argv.get("models") or []
        i = int(key[6:])
        return models[i] if i < len(models) else None
    return argv.get(key)


COMMANDS = {"ingest": cmd_ingest, "fit": cmd_fit, "evaluate": cmd_evaluate, "relatedness": cmd_relatedness,
            "shift": cmd_shift, "synth": cmd_synth, "experiment": cmd_experiment, "rerun": cmd_rerun}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
