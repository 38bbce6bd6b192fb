"""Experiment orchestration: populations, next-item evaluation, timestamp shifts, reports."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .baselines import mc_fit, mc_scores, merge_chronology, of_scores, pooled_layout, pooled_nsm_fit
from .dcn import DcnBuilder, build_dcn
from .domain import (SECONDS_PER_DAY, ActionSequence, Choice, DataError, DomainCatalog,
                     Hyperparams, validate_sequence)
from .genmodel import generate, nst, sample_dirichlet, score_row
from .gibbs import FitResult, SamplerConfig, fit
from .metrics import PAPER_LITERAL, STANDARD, RankedList, mrr, ndcg_at_k, precision_at_k
from .relatedness import A_TO_B, B_TO_A, RelatednessReport, select_transfer_users, streams_for

logger = logging.getLogger(__name__)

BUILTIN_METHODS = ("OF", "OF_U", "MC", "MC_U", "NSM", "NSM_U", "CDNST")
MODEL_METHODS = ("NSM", "NSM_U", "CDNST")


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and any labels (independent of worker order)."""
    h = hashlib.sha256(repr((int(master),) + tuple(str(k) for k in keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ---------------------------------------------------------------- populations

@dataclass
class UserData:
    user_id: str
    source: ActionSequence
    target: ActionSequence
    truth: dict | None = None  # theta_s, theta_t, phi_s, phi_t, z_s, z_t, nst_s, nst_t


@dataclass
class Population:
    catalog_s: DomainCatalog
    catalog_t: DomainCatalog
    users: list[UserData]
    label: str = ""

    def user(self, user_id: str) -> UserData:
        for u in self.users:
            if u.user_id == user_id:
                return u
        raise KeyError(user_id)

    def subset(self, user_ids) -> "Population":
        keep = set(user_ids)
        return Population(self.catalog_s, self.catalog_t, [u for u in self.users if u.user_id in keep], self.label)

    def swapped(self) -> "Population":
        """Same users with source and target roles exchanged."""
        users = []
        for u in self.users:
            truth = None
            if u.truth is not None:
                truth = {k.replace("_s", "_X").replace("_t", "_s").replace("_X", "_t"): v for k, v in u.truth.items()}
            users.append(UserData(u.user_id, u.target, u.source, truth))
        return Population(self.catalog_t, self.catalog_s, users, self.label)


@dataclass(frozen=True)
class PopulationSpec:
    users: int = 50
    M_s: int = 20
    M_t: int = 20
    N_s: int = 200
    N_t: int = 30
    K: int = 9
    theta_regime: str = "shared"  # shared | independent
    overlap: float = 0.0  # fraction of target keyword vocabulary borrowed from the source vocabulary
    lag_days: float = 0.0  # target timestamps trail source timestamps by this much
    delta_days: float = 1.0  # spacing between consecutive actions of one domain
    vocab_s: int = 12
    vocab_t: int = 12
    max_keywords: int = 3
    theta_concentration: float = 0.3  # symmetric Dirichlet that user traits are drawn from
    alpha: float = 0.1
    beta: float = 1.0
    mirror: bool = False  # target replays source keywords (twin catalog), lagged by lag_days

    def __post_init__(self):
        if self.theta_regime not in ("shared", "independent"):
            raise ValueError(f"theta_regime must be 'shared' or 'independent', got {self.theta_regime!r}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must be in [0, 1]")
        if self.users < 0:
            raise ValueError("users must be >= 0")

    def hyperparams(self) -> Hyperparams:
        return Hyperparams.symmetric(self.K, self.M_s, self.M_t, self.alpha, self.beta)


def make_catalog(domain_id: str, M: int, vocabulary: Sequence[str], max_keywords: int,
                 rng: np.random.Generator) -> DomainCatalog:
    choices = []
    for j in range(M):
        n = int(rng.integers(1, min(max_keywords, len(vocabulary)) + 1))
        kws = [vocabulary[i] for i in rng.choice(len(vocabulary), size=n, replace=False)]
        choices.append(Choice(f"{domain_id}{j}", tuple(kws)))
    return DomainCatalog(domain_id, tuple(choices))


def synth_catalogs(spec: PopulationSpec, rng: np.random.Generator) -> tuple[DomainCatalog, DomainCatalog]:
    vocab_s = [f"s_kw{i}" for i in range(spec.vocab_s)]
    catalog_s = make_catalog("S", spec.M_s, vocab_s, spec.max_keywords, rng)
    if spec.mirror:
        catalog_t = DomainCatalog("T", tuple(Choice(f"T{c.id}", c.keywords) for c in catalog_s.choices))
        return catalog_s, catalog_t
    n_shared = int(round(spec.overlap * spec.vocab_t))
    shared = [vocab_s[i] for i in rng.choice(len(vocab_s), size=min(n_shared, len(vocab_s)), replace=False)]
    vocab_t = shared + [f"t_kw{i}" for i in range(spec.vocab_t - len(shared))]
    return catalog_s, make_catalog("T", spec.M_t, vocab_t, spec.max_keywords, rng)


def synth_population(spec: PopulationSpec, seed: int) -> Population:
    """Per-user coupled sequences drawn from the shared-trait generative model.

    ``independent`` draws separate traits for the two domains. ``mirror`` makes the
    target a keyword-identical replay of the source, ``lag_days`` later, for
    temporal-relatedness experiments.
    """
    rng = np.random.default_rng(derive_seed(seed, "catalogs"))
    catalog_s, catalog_t = synth_catalogs(spec, rng)
    hp = Hyperparams.symmetric(spec.K, catalog_s.M, catalog_t.M, spec.alpha, spec.beta)
    delta = int(round(spec.delta_days * SECONDS_PER_DAY))
    lag = int(round(spec.lag_days * SECONDS_PER_DAY))
    conc = np.full(spec.K, spec.theta_concentration)
    users = []
    for u in range(spec.users):
        uid = f"u{u:04d}"
        urng = np.random.default_rng(derive_seed(seed, "user", u))
        theta_s = sample_dirichlet(urng, conc)
        theta_t = theta_s if spec.theta_regime == "shared" or spec.mirror else sample_dirichlet(urng, conc)
        n_t = 0 if spec.mirror else spec.N_t
        if spec.theta_regime == "shared" or spec.mirror:
            (seq_s, seq_t), st = generate(catalog_s, catalog_t, hp, spec.N_s, n_t, urng, theta=theta_s,
                                          user_id=uid, delta_seconds=delta, target_offset_seconds=lag)
            phi_t, z_t = st.phi_t, st.z_t
        else:
            (seq_s, _), st = generate(catalog_s, catalog_t, hp, spec.N_s, 0, urng, theta=theta_s,
                                      user_id=uid, delta_seconds=delta)
            (_, seq_t), st_t = generate(catalog_s, catalog_t, hp, 0, n_t, urng, theta=theta_t,
                                        user_id=uid, delta_seconds=delta, target_offset_seconds=lag)
            phi_t, z_t = st_t.phi_t, st_t.z_t
        if spec.mirror:
            replay = seq_s.actions[:spec.N_t]
            seq_t = ActionSequence(uid, catalog_t.domain_id,
                                   tuple(replace(a, timestamp=a.timestamp + lag) for a in replay))
            z_t = st.z_s[:spec.N_t]
            phi_t = st.phi_s
        truth = {"theta_s": theta_s.tolist(), "theta_t": theta_t.tolist(),
                 "nst_s": nst(theta_s), "nst_t": nst(theta_t),
                 "phi_s": st.phi_s.tolist(), "phi_t": np.asarray(phi_t).tolist(),
                 "z_s": st.z_s.tolist(), "z_t": np.asarray(z_t).tolist()}
        users.append(UserData(uid, seq_s, seq_t, truth))
    return Population(catalog_s, catalog_t, users, label=f"synth-{spec.theta_regime}")


def shift_source_timestamps(population: Population, advance: float) -> Population:
    """Move every source action ``advance`` seconds earlier; targets untouched."""
    if not advance > 0:
        raise ValueError(f"advance must be positive, got {advance}")
    step = -int(round(advance))
    users = [UserData(u.user_id, validate_sequence(u.source.shifted(step), population.catalog_s),
                      u.target, u.truth) for u in population.users]
    return Population(population.catalog_s, population.catalog_t, users, population.label)


def long_tail_stats(population: Population, thresholds: Sequence[int] | None = None) -> dict:
    """Per domain: fraction of users whose count of distinct transition pairs exceeds each threshold."""
    distinct = {"source": [], "target": []}
    for u in population.users:
        for name, seq in (("source", u.source), ("target", u.target)):
            x = seq.choice_indices
            distinct[name].append(len(set(zip(x[:-1].tolist(), x[1:].tolist()))))
    if thresholds is None:
        top = max((max(v) for v in distinct.values() if v), default=0)
        thresholds = list(range(0, top + 1))
    out = {}
    for name, counts in distinct.items():
        arr = np.array(counts)
        out[name] = {int(t): (float(np.mean(arr > t)) if len(arr) else 0.0) for t in thresholds}
    return out


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalProtocol:
    holdout_len: int = 5
    candidate_scope: str = "full_catalog"  # full_catalog | sampled
    negative_sample_count: int = 100
    seed: int = 0
    k_ndcg: int = 15
    k_prec: int = 3
    precision_mode: str = STANDARD  # which precision is listed as p@k first; both are reported
    refit_per_step: bool = False

    def __post_init__(self):
        if self.holdout_len < 1:
            raise ValueError("holdout_len must be >= 1")
        if self.candidate_scope not in ("full_catalog", "sampled"):
            raise ValueError(f"unknown candidate_scope {self.candidate_scope!r}")
        if self.precision_mode not in (STANDARD, PAPER_LITERAL):
            raise ValueError(f"unknown precision_mode {self.precision_mode!r}")

    @property
    def scope_label(self) -> str:
        if self.candidate_scope == "sampled":
            return f"sampled({self.negative_sample_count})"
        return self.candidate_scope

    def metric_names(self) -> list[str]:
        return ["mrr", f"ndcg@{self.k_ndcg}", f"p@{self.k_prec}", f"p@{self.k_prec}_literal"]

    def table_metrics(self) -> list[str]:
        names = self.metric_names()
        return names if self.precision_mode == STANDARD else [names[0], names[1], names[3], names[2]]


@dataclass
class MethodContext:
    """What a method may see when preparing to score one user's held-out steps."""

    user_id: str
    source: ActionSequence
    train_target: ActionSequence
    catalog_s: DomainCatalog
    catalog_t: DomainCatalog
    hp: Hyperparams
    cfg: SamplerConfig
    fitted: FitResult | None = None
    fit_out: dict = field(default_factory=dict)  # methods may publish their FitResult here


Scorer = Callable[[ActionSequence], np.ndarray]
MethodFactory = Callable[[MethodContext], Scorer]


def _fit_or_reuse(ctx: MethodContext, fitter) -> FitResult:
    res = ctx.fitted if ctx.fitted is not None else fitter()
    ctx.fit_out["fit"] = res
    return res


def _model_scorer(catalog: DomainCatalog, theta: np.ndarray, phi: np.ndarray) -> Scorer:
    def score(history: ActionSequence) -> np.ndarray:
        builder = DcnBuilder(catalog)
        for a in history.actions:
            builder.push(a.choice_index)
        return score_row(builder.row(), theta, phi)
    return score


def method_of(ctx):
    return lambda h: of_scores(h, ctx.catalog_t)


def method_of_u(ctx):
    return lambda h: of_scores(h, ctx.catalog_t, ctx.source, ctx.catalog_s)


def method_mc(ctx):
    def score(h):
        return mc_scores(mc_fit(h, ctx.catalog_t), h.actions[-1].choice_index, ctx.catalog_t.M)
    return score


def method_mc_u(ctx):
    def score(h):
        graph = mc_fit(h, ctx.catalog_t, ctx.source, ctx.catalog_s)
        return mc_scores(graph, h.actions[-1].choice_index, ctx.catalog_t.M)
    return score


def method_nsm(ctx):
    t = ctx.train_target
    res = _fit_or_reuse(ctx, lambda: fit(t, None, build_dcn(t, ctx.catalog_t), None,
                                         ctx.hp.single_domain(ctx.hp.alpha_t), ctx.cfg))
    return _model_scorer(ctx.catalog_t, res.posterior_mean_theta, res.posterior_mean_phi_s)


def method_cdnst(ctx):
    s, t = ctx.source, ctx.train_target
    res = _fit_or_reuse(ctx, lambda: fit(s, t, build_dcn(s, ctx.catalog_s), build_dcn(t, ctx.catalog_t),
                                         ctx.hp, ctx.cfg))
    return _model_scorer(ctx.catalog_t, res.posterior_mean_theta, res.posterior_mean_phi_t)


def method_nsm_u(ctx):
    catalog_u, source_map, pooled = pooled_layout(ctx.source, ctx.catalog_s, ctx.catalog_t)
    res = _fit_or_reuse(ctx, lambda: pooled_nsm_fit(ctx.source, ctx.train_target, ctx.catalog_s,
                                                    ctx.catalog_t, ctx.hp, ctx.cfg).fit)
    scorer = _model_scorer(catalog_u, res.posterior_mean_theta, res.posterior_mean_phi_s)
    M_t = ctx.catalog_t.M

    def score(h):
        merged = merge_chronology(h, ctx.source if pooled else None, source_map, catalog_u.domain_id)
        full = scorer(merged)[:M_t]
        return full / full.sum()
    return score


METHOD_FACTORIES: dict[str, MethodFactory] = {
    "OF": method_of, "OF_U": method_of_u, "MC": method_mc, "MC_U": method_mc_u,
    "NSM": method_nsm, "NSM_U": method_nsm_u, "CDNST": method_cdnst,
}


def _candidates(M: int, truth: int, protocol: EvalProtocol, rng: np.random.Generator) -> np.ndarray | None:
    if protocol.candidate_scope == "full_catalog" or protocol.negative_sample_count >= M - 1:
        return None
    others = np.delete(np.arange(M), truth)
    neg = rng.choice(others, size=protocol.negative_sample_count, replace=False)
    return np.sort(np.concatenate([[truth], neg]))


def _evaluate_user(args):
    (user, name, factory, cat_s, cat_t, hp, cfg, protocol, fitted, master) = args
    n_train = user.target.N - protocol.holdout_len
    uid = user.user_id
    ctx = MethodContext(uid, user.source, user.target.prefix(n_train), cat_s, cat_t, hp,
                        replace(cfg, seed=derive_seed(master, uid, name.split("^")[0])), fitted)
    rng = np.random.default_rng(derive_seed(protocol.seed, uid, "candidates"))
    try:
        scorer = factory(ctx)
        rows = []
        for j in range(n_train, user.target.N):
            if protocol.refit_per_step and j > n_train:
                ctx.train_target = user.target.prefix(j)
                ctx.fitted = None
                scorer = factory(ctx)
            history = user.target.prefix(j)
            scores = np.asarray(scorer(history), dtype=float)
            if scores.shape != (cat_t.M,) or not np.all(np.isfinite(scores)):
                raise FloatingPointError(f"method {name} returned invalid scores")
            truth = user.target.actions[j].choice_index
            ranked = RankedList.from_scores(scores, truth, _candidates(cat_t.M, truth, protocol, rng))
            rows.append([mrr(ranked), ndcg_at_k(ranked, protocol.k_ndcg),
                         precision_at_k(ranked, protocol.k_prec, STANDARD),
                         precision_at_k(ranked, protocol.k_prec, PAPER_LITERAL)])
    except (DataError, FloatingPointError, ValueError) as exc:
        logger.warning("method %s failed on user %s: %s", name, uid, exc)
        return uid, name, None, None, str(exc)
    res = ctx.fit_out.get("fit")
    return uid, name, np.mean(rows, axis=0).tolist(), (res.nst_estimate if res else None), None


@dataclass
class ExperimentReport:
    methods: list[str]
    metric_names: list[str]
    per_user: dict  # method -> user -> [metric values]
    nst: dict = field(default_factory=dict)  # method -> user -> nst estimate
    skipped_users: int = 0
    failures: dict = field(default_factory=dict)  # method -> user -> message
    config: dict = field(default_factory=dict)
    dataset: str = ""

    @property
    def aggregates(self) -> dict:
        """Unweighted per-user means for every method and metric."""
        out = {}
        for m in self.methods:
            vals = list(self.per_user.get(m, {}).values())
            out[m] = ({k: float(np.mean([v[i] for v in vals])) for i, k in enumerate(self.metric_names)}
                      if vals else {k: float("nan") for k in self.metric_names})
        return out

    def rows(self) -> list[tuple[str, str, str, float]]:
        agg = self.aggregates
        return [(m, self.dataset, k, agg[m][k]) for m in self.methods for k in self.metric_names]

    def to_tsv(self) -> str:
        lines = ["method\tdataset\tmetric\tvalue"]
        lines += [f"{m}\t{d}\t{k}\t{v:.6f}" for m, d, k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        agg = self.aggregates
        width = max([len(m) for m in self.methods] + [6])
        head = "metric".ljust(14) + "".join(m.rjust(width + 2) for m in self.methods)
        lines = [f"# {self.dataset}  users_skipped={self.skipped_users}", head]
        for k in self.config.get("table_metrics", self.metric_names):
            lines.append(k.ljust(14) + "".join(f"{agg[m][k]:.4f}".rjust(width + 2) for m in self.methods))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"methods": self.methods, "metric_names": self.metric_names, "per_user": self.per_user,
                "nst": self.nst, "skipped_users": self.skipped_users, "failures": self.failures,
                "config": self.config, "dataset": self.dataset}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(**d)

    def save(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.tsv", out / f"{stem}.txt", out / f"{stem}.json"]
        paths[0].write_text(self.to_tsv(), encoding="utf-8")
        paths[1].write_text(self.to_table(), encoding="utf-8")
        paths[2].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def evaluate_next_item(population: Population, methods: Sequence[str] | Mapping[str, MethodFactory],
                       protocol: EvalProtocol = EvalProtocol(), hp: Hyperparams | None = None,
                       cfg: SamplerConfig = SamplerConfig(), fits: Mapping[str, Mapping[str, FitResult]] | None = None,
                       jobs: int = 1) -> ExperimentReport:
    """Leave-last-n evaluation of every method on every eligible user.

    Methods fit once on the pre-holdout target prefix (plus the full source) and
    then score each held-out step with the revealed history. ``methods`` may map
    extra names to factories taking a :class:`MethodContext`.
    """
    if not methods:
        raise ValueError("no methods requested")
    factories = ({m: METHOD_FACTORIES[m] for m in methods} if not isinstance(methods, Mapping)
                 else dict(methods))
    if hp is None:
        hp = Hyperparams.symmetric(9, population.catalog_s.M, population.catalog_t.M)
    fits = fits or {}
    eligible = [u for u in population.users if u.target.N > protocol.holdout_len + 1]
    skipped = len(population.users) - len(eligible)
    if skipped:
        logger.info("%d users skipped (target too short for holdout %d)", skipped, protocol.holdout_len)
    tasks = [(u, name, fac, population.catalog_s, population.catalog_t, hp, cfg, protocol,
              fits.get(name, {}).get(u.user_id), cfg.seed)
             for name, fac in factories.items() for u in eligible]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_user, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_evaluate_user(t) for t in tasks]
    per_user: dict = {m: {} for m in factories}
    nst_est: dict = {}
    failures: dict = {}
    for uid, name, vals, est, err in results:
        if vals is None:
            failures.setdefault(name, {})[uid] = err
            continue
        per_user[name][uid] = vals
        if est is not None:
            nst_est.setdefault(name, {})[uid] = est
    config = {"protocol": asdict(protocol), "scope": protocol.scope_label, "sampler": asdict(cfg),
              "K": hp.K, "methods": list(factories), "table_metrics": protocol.table_metrics()}
    return ExperimentReport(list(factories), protocol.metric_names(), per_user, nst_est, skipped,
                            failures, config, population.label)


def relatedness_for(population: Population, table, tau: float) -> RelatednessReport:
    from .relatedness import domain_relatedness
    streams = streams_for(((u.user_id, u.source, u.target) for u in population.users),
                          population.catalog_s, population.catalog_t)
    return domain_relatedness(streams, table, tau)


def run_personalized(population: Population, report: RelatednessReport, hp: Hyperparams | None = None,
                     cfg: SamplerConfig = SamplerConfig(), protocol: EvalProtocol = EvalProtocol(),
                     direction: str = A_TO_B, jobs: int = 1) -> ExperimentReport:
    """CDNST restricted to users whose relatedness favours ``direction``.

    ``A->B`` transfers source to target; ``B->A`` swaps the roles first.
    """
    selected = select_transfer_users(report, direction)
    pop = population if direction == A_TO_B else population.swapped()
    if direction == B_TO_A and hp is not None:
        hp = Hyperparams(hp.K, hp.alpha_t, hp.alpha_s, hp.beta, hp.tau_seconds)
    name = f"CDNST^p({direction})"
    sub = pop.subset(selected)
    if not sub.users:
        logger.warning("no users selected for %s", direction)
        return ExperimentReport([name], protocol.metric_names(), {name: {}}, {}, 0, {},
                                {"direction": direction, "selected": 0, "empty": True}, pop.label)
    rep = evaluate_next_item(sub, {name: method_cdnst}, protocol, hp, cfg, jobs=jobs)
    rep.config.update({"direction": direction, "selected": len(sub.users), "empty": False})
    return rep
