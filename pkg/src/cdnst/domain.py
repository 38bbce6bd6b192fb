"""Shared vocabulary: keywords, choices, catalogs, action sequences, hyperparameters."""

from __future__ import annotations

import calendar
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
_WS = re.compile(r"\s+")


class DataError(ValueError):
    """Input data violates a structural contract."""


class RejectedTokenError(DataError):
    pass


class OutOfRangeError(DataError):
    pass


class UnfittableSequenceError(DataError):
    """Sequence too short for a first-order model (needs N >= 2)."""


class LogParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def normalize_keyword(raw: str) -> str:
    """Lowercase, trim, and join internal whitespace with ``_``.

    >>> normalize_keyword("  Will   Smith ")
    'will_smith'
    """
    text = _WS.sub("_", raw.strip().lower())
    if not text:
        raise RejectedTokenError(f"keyword {raw!r} is empty after normalization")
    return text


@dataclass(frozen=True)
class Choice:
    id: str
    keywords: tuple[str, ...]

    def __post_init__(self):
        if not self.keywords:
            raise DataError(f"choice {self.id!r} has no keywords")
        # set semantics, first-seen order
        object.__setattr__(self, "keywords", tuple(dict.fromkeys(self.keywords)))

    @classmethod
    def from_raw(cls, id: str, raw_keywords: Iterable[str]) -> "Choice":
        return cls(id, tuple(normalize_keyword(k) for k in raw_keywords))


@dataclass(frozen=True)
class DomainCatalog:
    domain_id: str
    choices: tuple[Choice, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        index = {}
        for i, c in enumerate(self.choices):
            if c.id in index:
                raise DataError(f"duplicate choice id {c.id!r} in domain {self.domain_id!r}")
            index[c.id] = i
        if len(index) < 2:
            raise DataError(f"domain {self.domain_id!r} needs at least 2 choices, got {len(index)}")
        object.__setattr__(self, "_index", index)

    @property
    def M(self) -> int:
        return len(self.choices)

    def index_of(self, choice_id: str) -> int:
        return self._index[choice_id]

    def __contains__(self, choice_id: str) -> bool:
        return choice_id in self._index

    def __getitem__(self, i: int) -> Choice:
        return self.choices[i]

    def keyword_vocabulary(self) -> list[str]:
        return list(dict.fromkeys(k for c in self.choices for k in c.keywords))


@dataclass(frozen=True)
class Action:
    choice_index: int
    timestamp: int


@dataclass(frozen=True)
class ActionSequence:
    user_id: str
    domain_id: str
    actions: tuple[Action, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    @property
    def N(self) -> int:
        return len(self.actions)

    @property
    def fittable(self) -> bool:
        return self.N >= 2

    @property
    def choice_indices(self) -> np.ndarray:
        return np.fromiter((a.choice_index for a in self.actions), dtype=np.int64, count=self.N)

    @property
    def timestamps(self) -> np.ndarray:
        return np.fromiter((a.timestamp for a in self.actions), dtype=np.int64, count=self.N)

    def prefix(self, n: int) -> "ActionSequence":
        return ActionSequence(self.user_id, self.domain_id, self.actions[:n])

    def shifted(self, seconds: int) -> "ActionSequence":
        return ActionSequence(
            self.user_id, self.domain_id,
            tuple(Action(a.choice_index, a.timestamp + seconds) for a in self.actions),
        )

    @classmethod
    def from_indices(cls, user_id: str, domain_id: str, indices: Sequence[int],
                     timestamps: Sequence[int] | None = None) -> "ActionSequence":
        if timestamps is None:
            timestamps = range(len(indices))
        return cls(user_id, domain_id,
                   tuple(Action(int(i), int(t)) for i, t in zip(indices, timestamps)))


def validate_sequence(seq: ActionSequence, catalog: DomainCatalog) -> ActionSequence:
    """Stable-sort ``seq`` by timestamp and bound-check every choice index.

    Sequences shorter than 2 are returned as-is (storable, not fittable); fitting
    code checks :attr:`ActionSequence.fittable`.
    """
    for pos, a in enumerate(seq.actions):
        if not 0 <= a.choice_index < catalog.M:
            raise OutOfRangeError(
                f"user {seq.user_id!r} position {pos}: choice index {a.choice_index} "
                f"outside catalog {catalog.domain_id!r} of size {catalog.M}"
            )
    ordered = tuple(sorted(seq.actions, key=lambda a: a.timestamp))
    if not seq.fittable:
        logger.debug("sequence for user %s in %s is unfittable (N=%d)", seq.user_id, seq.domain_id, seq.N)
    if ordered == seq.actions:
        return seq
    return ActionSequence(seq.user_id, seq.domain_id, ordered)


@dataclass(frozen=True)
class Hyperparams:
    K: int
    alpha_s: np.ndarray
    alpha_t: np.ndarray
    beta: np.ndarray
    tau_seconds: float = 60 * SECONDS_PER_DAY

    def __post_init__(self):
        for name in ("alpha_s", "alpha_t", "beta"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or not np.all(arr > 0):
                raise ValueError(f"{name} must be a strictly positive vector")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if len(self.beta) != self.K:
            raise ValueError(f"beta has length {len(self.beta)}, expected K={self.K}")
        if self.tau_seconds <= 0:
            raise ValueError("tau_seconds must be positive")

    @classmethod
    def symmetric(cls, K: int, M_s: int, M_t: int, alpha: float = 0.1, beta: float = 1.0,
                  tau_days: float = 60.0) -> "Hyperparams":
        return cls(K, np.full(M_s, alpha), np.full(M_t, alpha), np.full(K, beta),
                   tau_days * SECONDS_PER_DAY)

    @property
    def M_s(self) -> int:
        return len(self.alpha_s)

    @property
    def M_t(self) -> int:
        return len(self.alpha_t)

    def single_domain(self, alpha: np.ndarray) -> "Hyperparams":
        """Hyperparams for a one-domain fit whose only domain has prior ``alpha``."""
        return Hyperparams(self.K, alpha, alpha, self.beta, self.tau_seconds)


# ---------------------------------------------------------------- action logs

def parse_timestamp(raw: str) -> int:
    """Integer epoch seconds, or ``YYYY-MM-DD`` at midnight UTC."""
    raw = raw.strip()
    if re.fullmatch(r"-?\d+", raw):
        return int(raw)
    try:
        return calendar.timegm(time.strptime(raw, "%Y-%m-%d"))
    except ValueError:
        raise ValueError(f"unparseable timestamp {raw!r}") from None


@dataclass
class ActionLog:
    """Catalogs and per-user sequences recovered from a delimited action log."""

    catalogs: dict[str, DomainCatalog]
    sequences: dict[str, dict[str, ActionSequence]]  # user -> domain -> seq
    duplicates: int = 0

    @property
    def users(self) -> list[str]:
        return sorted(self.sequences)


def read_action_log(path: str | Path) -> ActionLog:
    """Parse ``user<TAB>domain<TAB>choice<TAB>timestamp<TAB>kw;kw;...`` rows.

    Blank lines and lines starting with ``#`` are skipped. The catalog of a domain
    is the union of its rows, keyword lists merged in first-seen order.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return parse_action_rows(lines)


def parse_action_rows(lines: Iterable[str]) -> ActionLog:
    choice_kws: dict[str, dict[str, dict[str, None]]] = {}
    rows: list[tuple[str, str, str, int]] = []
    seen: set[tuple[str, str, int, str]] = set()
    duplicates = 0
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 5:
            raise LogParseError(line_no, f"expected 5 tab-separated fields, got {len(parts)}")
        user, domain, choice, ts_raw, kw_raw = (p.strip() for p in parts)
        if not user or not domain or not choice:
            raise LogParseError(line_no, "empty user, domain or choice id")
        try:
            ts = parse_timestamp(ts_raw)
        except ValueError as exc:
            raise LogParseError(line_no, str(exc)) from None
        try:
            kws = [normalize_keyword(k) for k in kw_raw.split(";") if k.strip()]
        except RejectedTokenError as exc:
            raise LogParseError(line_no, str(exc)) from None
        if not kws:
            raise LogParseError(line_no, f"choice {choice!r} has no keywords")
        key = (user, domain, ts, choice)
        if key in seen:
            duplicates += 1
            logger.warning("line %d: duplicate action %s dropped", line_no, key)
            continue
        seen.add(key)
        per_choice = choice_kws.setdefault(domain, {}).setdefault(choice, {})
        per_choice.update(dict.fromkeys(kws))
        rows.append((user, domain, choice, ts))

    catalogs = {}
    for domain, choices in choice_kws.items():
        catalogs[domain] = DomainCatalog(domain, tuple(Choice(cid, tuple(kws)) for cid, kws in choices.items()))

    grouped: dict[str, dict[str, list[Action]]] = {}
    for user, domain, choice, ts in rows:
        grouped.setdefault(user, {}).setdefault(domain, []).append(
            Action(catalogs[domain].index_of(choice), ts))
    sequences = {
        user: {d: validate_sequence(ActionSequence(user, d, tuple(acts)), catalogs[d])
               for d, acts in sorted(per_domain.items())}
        for user, per_domain in grouped.items()
    }
    return ActionLog(catalogs, sequences, duplicates)
