"""Frequency and first-order Markov baselines, target-only and pooled.

Source and target catalogs are disjoint, so pooled (``_U``) variants bridge them
through keywords: a source action credits its keywords, and a target choice
collects the mean credit of its own keywords.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .dcn import build_dcn
from .domain import Action, ActionSequence, Choice, DomainCatalog, Hyperparams
from .gibbs import FitResult, SamplerConfig, fit

logger = logging.getLogger(__name__)

MC_SMOOTHING = 0.01


def _keyword_mean(counts: Counter, keywords) -> float:
    return sum(counts[k] for k in keywords) / len(keywords)


def of_scores(history: ActionSequence, catalog: DomainCatalog,
              source: ActionSequence | None = None,
              source_catalog: DomainCatalog | None = None) -> np.ndarray:
    """Frequency scores for every target choice; OF_U when ``source`` is given.

    Ties are broken later by ascending index (see ``RankedList.from_scores``).
    """
    scores = np.bincount(history.choice_indices, minlength=catalog.M).astype(float)
    if source is not None and source.N:
        kw_counts = Counter(k for a in source.actions for k in source_catalog[a.choice_index].keywords)
        scores += np.array([_keyword_mean(kw_counts, c.keywords) for c in catalog.choices])
    return scores


@dataclass
class TransitionGraph:
    counts: dict = field(default_factory=dict)  # (from, to) -> count
    row_totals: dict = field(default_factory=dict)

    def add(self, a: int, b: int, weight: float = 1.0) -> None:
        self.counts[(a, b)] = self.counts.get((a, b), 0) + weight
        self.row_totals[a] = self.row_totals.get(a, 0) + weight


def mc_fit(history: ActionSequence, catalog: DomainCatalog | None = None,
           source: ActionSequence | None = None,
           source_catalog: DomainCatalog | None = None) -> TransitionGraph:
    """Count adjacent target pairs; MC_U adds source keyword transitions projected onto target pairs."""
    graph = TransitionGraph()
    x = history.choice_indices
    for a, b in zip(x[:-1], x[1:]):
        graph.add(int(a), int(b))
    if source is not None and source.N >= 2:
        kw_trans = Counter()
        sx = source.choice_indices
        for a, b in zip(sx[:-1], sx[1:]):
            ka, kb = source_catalog[a].keywords, source_catalog[b].keywords
            kw_trans.update((p, q) for p in ka for q in kb)
        for i, ci in enumerate(catalog.choices):
            for j, cj in enumerate(catalog.choices):
                w = sum(kw_trans[(p, q)] for p in ci.keywords for q in cj.keywords)
                if w:
                    graph.add(i, j, w / (len(ci.keywords) * len(cj.keywords)))
    return graph


def mc_scores(graph: TransitionGraph, last: int, M: int, smoothing: float = MC_SMOOTHING) -> np.ndarray:
    total = graph.row_totals.get(last, 0)
    if total == 0:
        return np.full(M, 1.0 / M)
    counts = np.array([graph.counts.get((last, j), 0) for j in range(M)], dtype=float)
    return (counts + smoothing) / (total + smoothing * M)


# ------------------------------------------------------------------ pooled NSM

@dataclass
class PooledModel:
    """Single-domain fit on the time-merged source+target sequence."""

    fit: FitResult
    catalog: DomainCatalog
    target_indices: np.ndarray  # positions of target choices inside the union catalog
    source_map: np.ndarray | None  # source choice index -> union index
    pooled: bool


def union_catalog(catalog_t: DomainCatalog, catalog_s: DomainCatalog) -> tuple[DomainCatalog, np.ndarray]:
    """Target choices first, then source choices whose ids the target lacks."""
    choices = list(catalog_t.choices)
    index = {c.id: i for i, c in enumerate(choices)}
    source_map = []
    for c in catalog_s.choices:
        if c.id not in index:
            index[c.id] = len(choices)
            choices.append(Choice(c.id, c.keywords))
        source_map.append(index[c.id])
    return DomainCatalog(f"{catalog_t.domain_id}+{catalog_s.domain_id}", tuple(choices)), np.array(source_map)


def merge_chronology(target: ActionSequence, source: ActionSequence | None,
                     source_map: np.ndarray | None, domain_id: str) -> ActionSequence:
    """Interleave by timestamp; on ties source actions come first, each side keeps its order."""
    tagged = [(a.timestamp, 0, i, Action(int(source_map[a.choice_index]), a.timestamp))
              for i, a in enumerate(source.actions)] if source is not None else []
    tagged += [(a.timestamp, 1, i, a) for i, a in enumerate(target.actions)]
    tagged.sort(key=lambda t: t[:3])
    return ActionSequence(target.user_id, domain_id, tuple(t[3] for t in tagged))


def pooled_layout(seq_s: ActionSequence | None, catalog_s: DomainCatalog,
                  catalog_t: DomainCatalog) -> tuple[DomainCatalog, np.ndarray | None, bool]:
    """Union catalog and source index map for NSM_U, or the target catalog alone when pooling is impossible."""
    shared = set(catalog_s.keyword_vocabulary()) & set(catalog_t.keyword_vocabulary())
    if seq_s is None or seq_s.N == 0:
        return catalog_t, None, False
    if not shared:
        logger.warning("user %s: no keyword overlap between %s and %s, NSM_U falls back to NSM",
                       seq_s.user_id, catalog_s.domain_id, catalog_t.domain_id)
        return catalog_t, None, False
    catalog_u, source_map = union_catalog(catalog_t, catalog_s)
    return catalog_u, source_map, True


def pooled_nsm_fit(seq_s: ActionSequence | None, seq_t: ActionSequence,
                   catalog_s: DomainCatalog, catalog_t: DomainCatalog,
                   hp: Hyperparams, cfg: SamplerConfig) -> PooledModel:
    catalog_u, source_map, pooled = pooled_layout(seq_s, catalog_s, catalog_t)
    if not pooled:
        res = fit(seq_t, None, build_dcn(seq_t, catalog_t), None, hp.single_domain(hp.alpha_t), cfg)
        return PooledModel(res, catalog_t, np.arange(catalog_t.M), None, False)
    merged = merge_chronology(seq_t, seq_s, source_map, catalog_u.domain_id)
    alpha = np.full(catalog_u.M, float(np.mean(hp.alpha_t)))
    alpha[:catalog_t.M] = hp.alpha_t
    res = fit(merged, None, build_dcn(merged, catalog_u), None, hp.single_domain(alpha), cfg)
    return PooledModel(res, catalog_u, np.arange(catalog_t.M), source_map, True)
