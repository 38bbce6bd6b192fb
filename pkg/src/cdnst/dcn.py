"""Dynamic choice novelty: per-position dense ranks of every candidate choice.

A candidate's raw novelty at position ``i`` is ``1 / ((F + 1) * (T + 1))`` where
``F`` is the mean prior frequency of its keywords and ``T`` the mean prior count
of keyword transitions from the previous action's keywords into its keywords.
Scores are kept as exact fractions so ties are decided without rounding.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import ActionSequence, Choice, DomainCatalog


@dataclass
class KeywordStats:
    """Keyword frequencies and adjacent-action keyword transitions seen so far."""

    freq: Counter = field(default_factory=Counter)
    trans: Counter = field(default_factory=Counter)

    def update(self, prev: Choice | None, cur: Choice) -> None:
        self.freq.update(cur.keywords)
        if prev is not None:
            self.trans.update((a, b) for a in prev.keywords for b in cur.keywords)

    def copy(self) -> "KeywordStats":
        return KeywordStats(Counter(self.freq), Counter(self.trans))


def novelty_denominator(stats: KeywordStats, prev_choice: Choice | None, cand: Choice) -> Fraction:
    """``(F + 1) * (T + 1)`` as an exact fraction."""
    nk = len(cand.keywords)
    f_sum = sum(stats.freq[k] for k in cand.keywords)
    value = Fraction(f_sum + nk, nk)
    if prev_choice is not None:
        pairs = len(prev_choice.keywords) * nk
        t_sum = sum(stats.trans[(a, b)] for a in prev_choice.keywords for b in cand.keywords)
        value *= Fraction(t_sum + pairs, pairs)
    return value


def raw_novelty_score(stats: KeywordStats, prev_choice: Choice | None, cand: Choice) -> Fraction:
    return 1 / novelty_denominator(stats, prev_choice, cand)


def dense_rank_desc(keys: Sequence) -> np.ndarray:
    """Dense ranks where the largest key gets rank 1.

    Keys are novelty denominators, so the largest denominator (least novel) ranks 1.
    """
    distinct = sorted(set(keys), reverse=True)
    lookup = {k: r for r, k in enumerate(distinct, start=1)}
    return np.array([lookup[k] for k in keys], dtype=np.int64)


class DcnBuilder:
    """Incrementally produces DCN rows as a sequence is revealed one action at a time."""

    def __init__(self, catalog: DomainCatalog):
        self.catalog = catalog
        self.stats = KeywordStats()
        self.prev: Choice | None = None

    def row(self) -> np.ndarray:
        """Ranks for the next (not yet revealed) position."""
        denoms = [novelty_denominator(self.stats, self.prev, c) for c in self.catalog.choices]
        return dense_rank_desc(denoms)

    def push(self, choice_index: int) -> None:
        cur = self.catalog[choice_index]
        self.stats.update(self.prev, cur)
        self.prev = cur

    def copy(self) -> "DcnBuilder":
        other = DcnBuilder(self.catalog)
        other.stats = self.stats.copy()
        other.prev = self.prev
        return other


@dataclass(frozen=True)
class DcnMatrix:
    ranks: np.ndarray  # (N, M) int

    def __post_init__(self):
        self.ranks.setflags(write=False)

    @property
    def N(self) -> int:
        return self.ranks.shape[0]

    @property
    def M(self) -> int:
        return self.ranks.shape[1]

    @property
    def row_max(self) -> np.ndarray:
        return self.ranks.max(axis=1)

    def normalized(self, K: int) -> np.ndarray:
        """``rank / row_max * K`` per entry, the argument of the action function."""
        return self.ranks / self.row_max[:, None] * K


def build_dcn(seq: ActionSequence, catalog: DomainCatalog) -> DcnMatrix:
    builder = DcnBuilder(catalog)
    rows = np.empty((seq.N, catalog.M), dtype=np.int64)
    for i, a in enumerate(seq.actions):
        rows[i] = builder.row()
        builder.push(a.choice_index)
    return DcnMatrix(rows)


def write_dcn(path: str | Path, dcn: DcnMatrix) -> None:
    lines = ["\t".join(str(int(r)) for r in row) for row in dcn.ranks]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dcn(path: str | Path) -> DcnMatrix:
    rows = [[int(x) for x in line.split("\t")]
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return DcnMatrix(np.array(rows, dtype=np.int64).reshape(len(rows), -1))
