"""Ranking metrics over recommendation lists.

``mrr`` and the ``paper_literal`` precision follow the graded-relevance sums
``sum (2^rel - 1) / i`` and ``sum 1 / (i * (2^rel - 1))``; with one relevant item
of grade 1 the first is the usual reciprocal rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

STANDARD = "standard"
PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class RankedList:
    items: tuple[int, ...]
    rel: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))
        object.__setattr__(self, "rel", tuple(int(r) for r in self.rel))
        if len(self.items) != len(self.rel):
            raise ValueError("items and rel must have equal length")
        if len(set(self.items)) != len(self.items):
            raise ValueError("ranked items must be distinct")
        if any(r < 0 for r in self.rel):
            raise ValueError("relevance grades must be non-negative")

    @classmethod
    def from_scores(cls, scores: np.ndarray, relevant: int | Sequence[int],
                    candidates: Sequence[int] | None = None) -> "RankedList":
        """Rank candidates by descending score (ties by ascending index); binary relevance."""
        scores = np.asarray(scores, dtype=float)
        if candidates is None:
            candidates = np.arange(len(scores))
        candidates = np.asarray(candidates)
        order = candidates[np.lexsort((candidates, -scores[candidates]))]
        hits = {int(relevant)} if np.ndim(relevant) == 0 else {int(r) for r in relevant}
        return cls(tuple(order), tuple(int(i in hits) for i in order))

    def is_degenerate(self) -> bool:
        return not any(self.rel)


def dcg(rel: Sequence[int], k: int) -> float:
    return sum((2 ** r - 1) / math.log2(i + 1) for i, r in enumerate(rel[:k], start=1))


def ndcg_at_k(ranked: RankedList, k: int) -> float:
    """DCG@k over the ideal DCG@k; 0.0 when nothing is relevant."""
    ideal = dcg(sorted(ranked.rel, reverse=True), k)
    if ideal == 0:
        return 0.0
    return dcg(ranked.rel, k) / ideal


def mrr(ranked: RankedList) -> float:
    return sum((2 ** r - 1) / i for i, r in enumerate(ranked.rel, start=1))


def precision_at_k(ranked: RankedList, k: int, mode: str = STANDARD) -> float:
    top = ranked.rel[:k]
    if mode == STANDARD:
        return sum(1 for r in top if r >= 1) / k
    if mode == PAPER_LITERAL:
        # rel = 0 terms have a zero denominator and are skipped
        return sum(1.0 / (i * (2 ** r - 1)) for i, r in enumerate(top, start=1) if r >= 1)
    raise ValueError(f"unknown precision mode {mode!r}")


def all_metrics(ranked: RankedList, k_ndcg: int = 15, k_prec: int = 3) -> dict[str, float]:
    return {
        "mrr": mrr(ranked),
        f"ndcg@{k_ndcg}": ndcg_at_k(ranked, k_ndcg),
        f"p@{k_prec}": precision_at_k(ranked, k_prec, STANDARD),
        f"p@{k_prec}_literal": precision_at_k(ranked, k_prec, PAPER_LITERAL),
    }
