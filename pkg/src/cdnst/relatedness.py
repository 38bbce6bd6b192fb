"""Directed cross-domain relatedness from keyword embeddings and a time window.

For one user, every keyword used in domain A at time ``t`` is paired with every
keyword used in domain B at a time in ``(t, t + tau]``; the user's ``A -> B``
relatedness is the mean cosine over those pairs. Domain-level relatedness
averages users that have at least one pair.
"""

from __future__ import annotations

import bisect
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .domain import ActionSequence, DomainCatalog, normalize_keyword

logger = logging.getLogger(__name__)

DEFAULT_DIM = 50
A_TO_B = "A->B"
B_TO_A = "B->A"


class EmbeddingTable:
    """Keyword vectors loaded from a file, or derived by hashing when ``hash_fallback``."""

    def __init__(self, vectors: Mapping[str, np.ndarray] | None = None, dimension: int = DEFAULT_DIM,
                 hash_fallback: bool = False):
        self.dimension = dimension
        self.hash_fallback = hash_fallback
        self.vectors: dict[str, np.ndarray] = {}
        self.missing = 0
        for k, v in (vectors or {}).items():
            self.add(k, v)

    @property
    def provider(self) -> str:
        return "hash-fallback" if self.hash_fallback else "file"

    def add(self, keyword: str, vector) -> None:
        v = np.asarray(vector, dtype=float)
        if v.shape != (self.dimension,):
            raise ValueError(f"vector for {keyword!r} has shape {v.shape}, expected ({self.dimension},)")
        if not np.any(v):
            raise ValueError(f"zero vector for {keyword!r}")
        self.vectors[keyword] = v

    def get(self, keyword: str) -> np.ndarray | None:
        v = self.vectors.get(keyword)
        if v is None and self.hash_fallback:
            v = hash_vector(keyword, self.dimension)
            self.vectors[keyword] = v
        return v

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        """Read ``keyword<TAB>f1 f2 ... fD`` lines; the first line fixes D."""
        table = None
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                word, values = line.split("\t", 1)
                vec = np.array([float(x) for x in values.split()])
            except ValueError:
                raise ValueError(f"{path}:{line_no}: expected 'keyword<TAB>floats'") from None
            if table is None:
                table = cls(dimension=len(vec))
            table.add(normalize_keyword(word), vec)
        return table if table is not None else cls()


def hash_vector(keyword: str, dimension: int = DEFAULT_DIM) -> np.ndarray:
    """Deterministic unit vector seeded from the SHA-256 of the keyword."""
    seed = int.from_bytes(hashlib.sha256(keyword.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dimension)
    return v / np.linalg.norm(v)


def keyword_sim(w1: str, w2: str, table: EmbeddingTable) -> float | None:
    """Cosine similarity, or ``None`` (and a bump of ``table.missing``) if either keyword is unknown."""
    v1, v2 = table.get(w1), table.get(w2)
    if v1 is None or v2 is None:
        table.missing += 1
        return None
    return float(np.dot(v1, v2) / (np.linalg.norm(v1) * np.linalg.norm(v2)))


def keyword_stream(seq: ActionSequence, catalog: DomainCatalog) -> list[tuple[str, int]]:
    """Chronological ``(keyword, timestamp)`` pairs of a user's actions in one domain."""
    return [(k, a.timestamp) for a in seq.actions for k in catalog[a.choice_index].keywords]


def user_relatedness(stream_a: list[tuple[str, int]], stream_b: list[tuple[str, int]],
                     table: EmbeddingTable, tau: float) -> tuple[float, int]:
    """Mean cosine over (A keyword, later-B keyword within tau) pairs; ``(0.0, 0)`` if none."""
    times_b = [t for _, t in stream_b]
    total, pairs = 0.0, 0
    for w_a, t in stream_a:
        lo = bisect.bisect_right(times_b, t)
        hi = bisect.bisect_right(times_b, t + tau)
        for w_b, _ in stream_b[lo:hi]:
            s = keyword_sim(w_a, w_b, table)
            if s is not None:
                total += s
                pairs += 1
    return (total / pairs if pairs else 0.0), pairs


@dataclass
class RelatednessReport:
    per_user: dict = field(default_factory=dict)  # user -> (sim_ab, sim_ba, pairs_ab, pairs_ba)
    sim_ab: float = 0.0
    sim_ba: float = 0.0
    user_count: int = 0
    users_ab: int = 0
    users_ba: int = 0
    provider: str = ""
    tau_seconds: float = 0.0

    def to_text(self, label_a: str = "A", label_b: str = "B", per_user: bool = False) -> str:
        lines = [
            f"# relatedness  provider={self.provider}  tau_seconds={self.tau_seconds:g}",
            f"direction\tsim\tusers_with_pairs",
            f"{label_a}->{label_b}\t{self.sim_ab:.6f}\t{self.users_ab}",
            f"{label_b}->{label_a}\t{self.sim_ba:.6f}\t{self.users_ba}",
        ]
        if per_user:
            lines.append("user\tsim_ab\tsim_ba\tpairs_ab\tpairs_ba")
            for u in sorted(self.per_user):
                ab, ba, nab, nba = self.per_user[u]
                lines.append(f"{u}\t{ab:.6f}\t{ba:.6f}\t{nab}\t{nba}")
        return "\n".join(lines) + "\n"


def domain_relatedness(users: Mapping[str, tuple[list, list]], table: EmbeddingTable,
                       tau: float) -> RelatednessReport:
    """``users`` maps user id -> (A keyword stream, B keyword stream)."""
    per_user = {}
    for u in sorted(users):
        stream_a, stream_b = users[u]
        ab, n_ab = user_relatedness(stream_a, stream_b, table, tau)
        ba, n_ba = user_relatedness(stream_b, stream_a, table, tau)
        per_user[u] = (ab, ba, n_ab, n_ba)
    ab_vals = [v[0] for v in per_user.values() if v[2] > 0]
    ba_vals = [v[1] for v in per_user.values() if v[3] > 0]
    return RelatednessReport(
        per_user=per_user,
        sim_ab=float(np.mean(ab_vals)) if ab_vals else 0.0,
        sim_ba=float(np.mean(ba_vals)) if ba_vals else 0.0,
        user_count=len(per_user),
        users_ab=len(ab_vals),
        users_ba=len(ba_vals),
        provider=table.provider,
        tau_seconds=tau,
    )


def select_transfer_users(report: RelatednessReport, direction: str = A_TO_B) -> set[str]:
    """Users whose relatedness in ``direction`` strictly exceeds the reverse."""
    if direction == A_TO_B:
        return {u for u, v in report.per_user.items() if v[0] > v[1]}
    if direction == B_TO_A:
        return {u for u, v in report.per_user.items() if v[1] > v[0]}
    raise ValueError(f"direction must be {A_TO_B!r} or {B_TO_A!r}")


def streams_for(sequences: Iterable[tuple[str, ActionSequence, ActionSequence]],
                catalog_a: DomainCatalog, catalog_b: DomainCatalog) -> dict[str, tuple[list, list]]:
    return {u: (keyword_stream(sa, catalog_a), keyword_stream(sb, catalog_b)) for u, sa, sb in sequences}
