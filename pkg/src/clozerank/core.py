"""Domain types and the scoring arithmetic of the re-ranker.

Everything here is pure: no I/O, no model calls.  Scores flow as follows::

    initial retriever score  s1  ─┐
                                   ├─ fused = alpha1 * s1 + alpha2 * s2
    comparator tie-groups -> s2  ─┘

where ``s2`` comes from :func:`decay_scores` applied to the competition-ranked
position of each candidate.
"""

from __future__ import annotations

import enum
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .errors import InvalidInputError

UNKNOWN = "UNKNOWN"
PLACEHOLDER_RE = re.compile(r"<VERB>|<COLOR>")


class SlotKind(str, enum.Enum):
    VERB = "VERB"
    COLOR = "COLOR"

    @property
    def placeholder(self) -> str:
        return f"<{self.value}>"


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    ground_truth_id: str | None = None

    def __post_init__(self):
        if not self.query_id:
            raise InvalidInputError("query_id must be non-empty")
        if not self.text or not self.text.strip():
            raise InvalidInputError(f"query {self.query_id!r} has empty text")


@dataclass(frozen=True)
class GalleryItem:
    item_id: str
    image_ref: str

    def __post_init__(self):
        if not self.item_id:
            raise InvalidInputError("item_id must be non-empty")


@dataclass(frozen=True)
class InitialRanking:
    """Coarse retriever output for one query, best first."""

    query_id: str
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(i), float(s)) for i, s in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise InvalidInputError(f"ranking for {self.query_id!r} is empty")
        seen = set()
        for item_id, _ in entries:
            if item_id in seen:
                raise InvalidInputError(f"ranking for {self.query_id!r} repeats item {item_id!r}")
            seen.add(item_id)
        for (a, sa), (b, sb) in zip(entries, entries[1:]):
            if sb > sa:
                raise InvalidInputError(
                    f"ranking for {self.query_id!r} not sorted: {b!r} ({sb}) after {a!r} ({sa})"
                )

    @property
    def item_ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Slot:
    index: int
    kind: SlotKind
    original_token: str
    span: tuple[int, int]


@dataclass(frozen=True)
class MaskedQuery:
    original_text: str
    masked_text: str
    slots: tuple[Slot, ...]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        found = PLACEHOLDER_RE.findall(self.masked_text)
        if found != [s.kind.placeholder for s in self.slots]:
            raise InvalidInputError("placeholders in masked_text do not line up with slots")
        prev_end = 0
        for i, slot in enumerate(self.slots):
            start, end = slot.span
            if slot.index != i or start < prev_end or end > len(self.original_text):
                raise InvalidInputError(f"slot {i} has a bad index or span {slot.span}")
            if self.original_text[start:end] != slot.original_token:
                raise InvalidInputError(f"slot {i} token does not match the original text at its span")
            prev_end = end

    @property
    def is_empty(self) -> bool:
        return not self.slots

    def unmask(self, fills: Sequence[str] | None = None) -> str:
        """Substitute placeholders in reading order; defaults to the original tokens."""
        if fills is None:
            fills = [s.original_token for s in self.slots]
        if len(fills) != len(self.slots):
            raise InvalidInputError(f"expected {len(self.slots)} fills, got {len(fills)}")
        it = iter(fills)
        return PLACEHOLDER_RE.sub(lambda _m: next(it), self.masked_text)


@dataclass(frozen=True)
class Completion:
    query_id: str
    item_id: str
    fills: tuple[str, ...]
    raw_response: str = ""
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fills", tuple(self.fills))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        if any(not f for f in self.fills):
            raise InvalidInputError("fills must be non-empty strings")

    @classmethod
    def all_unknown(cls, query_id: str, item_id: str, n_slots: int, warnings: Iterable[str] = ()) -> "Completion":
        return cls(query_id, item_id, (UNKNOWN,) * n_slots, "", tuple(warnings))


@dataclass(frozen=True)
class DecayPolicy:
    """Rank-to-score conversion: ``beta ** n`` or ``max(0, 1 + n * d)``."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind == "exponential":
            if not 0.0 < self.value < 1.0:
                raise InvalidInputError(f"exponential base must lie in (0, 1), got {self.value}")
        elif self.kind == "linear":
            if not self.value < 0.0:
                raise InvalidInputError(f"linear step must be negative, got {self.value}")
        else:
            raise InvalidInputError(f"unknown decay kind {self.kind!r}")

    @classmethod
    def exponential(cls, beta: float = 0.5) -> "DecayPolicy":
        return cls("exponential", beta)

    @classmethod
    def linear(cls, d: float = -0.2) -> "DecayPolicy":
        return cls("linear", d)

    def score(self, position: int) -> float:
        if self.kind == "exponential":
            return self.value**position
        return max(0.0, 1.0 + position * self.value)

    def describe(self) -> dict:
        return {"decay": self.kind, "beta" if self.kind == "exponential" else "linear_d": self.value}


@dataclass(frozen=True)
class FusionWeights:
    alpha1: float = 1.0
    alpha2: float = 0.075

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InvalidInputError("fusion weights must be non-negative")
        if self.alpha1 == 0 and self.alpha2 == 0:
            raise InvalidInputError("fusion weights cannot both be zero")


@dataclass(frozen=True)
class RerankResult:
    query_id: str
    groups: tuple[tuple[str, ...], ...]
    rationale: str = ""

    def __post_init__(self):
        groups = tuple(tuple(g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups or any(not g for g in groups):
            raise InvalidInputError("tie-groups must be non-empty")
        flat = [i for g in groups for i in g]
        if len(flat) != len(set(flat)):
            raise InvalidInputError("tie-groups overlap")

    @property
    def degenerate_all_tied(self) -> bool:
        return len(self.groups) == 1

    @property
    def item_ids(self) -> set[str]:
        return {i for g in self.groups for i in g}

    @classmethod
    def all_tied(cls, query_id: str, item_ids: Iterable[str], rationale: str = "") -> "RerankResult":
        return cls(query_id, (tuple(item_ids),), rationale)


@dataclass(frozen=True)
class FinalRanking:
    query_id: str
    entries: tuple[tuple[str, float], ...]
    head_size: int

    @property
    def item_ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def rank_of(self, item_id: str) -> int:
        """1-based rank of ``item_id``."""
        for pos, (i, _) in enumerate(self.entries, start=1):
            if i == item_id:
                return pos
        raise InvalidInputError(f"item {item_id!r} is not in the ranking for {self.query_id!r}")


@dataclass(frozen=True)
class QueryMetrics:
    rank: int | None
    average_precision: float


@dataclass
class EvalReport:
    per_query: dict[str, QueryMetrics]
    recall_at: dict[int, float]
    mean_ap: float
    config_echo: dict = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        out = {f"R@{k}": round(100 * v, 4) for k, v in sorted(self.recall_at.items())}
        out["mAP"] = round(100 * self.mean_ap, 4)
        return out


def competition_positions(groups: Sequence[Sequence[str]]) -> dict[str, int]:
    """Position of each item = number of items in strictly better groups."""
    positions: dict[str, int] = {}
    better = 0
    for group in groups:
        for item_id in group:
            positions[item_id] = better
        better += len(group)
    return positions


def decay_scores(groups: Sequence[Sequence[str]], policy: DecayPolicy) -> dict[str, float]:
    if not groups or any(len(g) == 0 for g in groups):
        raise InvalidInputError("decay_scores needs a non-empty list of non-empty groups")
    return {item: policy.score(n) for item, n in competition_positions(groups).items()}


def fuse_scores(s1: Mapping[str, float], s2: Mapping[str, float], weights: FusionWeights) -> dict[str, float]:
    if set(s1) != set(s2):
        raise InvalidInputError(f"score maps disagree on keys: {sorted(set(s1) ^ set(s2))}")
    return {k: weights.alpha1 * s1[k] + weights.alpha2 * s2[k] for k in s1}


def minmax_normalize(scores: Mapping[str, float]) -> dict[str, float]:
    """Rescale to [0, 1]; a constant map becomes all ones."""
    lo, hi = min(scores.values()), max(scores.values())
    if hi == lo:
        return {k: 1.0 for k in scores}
    return {k: (v - lo) / (hi - lo) for k, v in scores.items()}


def merge_ranking(initial: InitialRanking, fused_head: Sequence[tuple[str, float]]) -> FinalRanking:
    """Sort the re-scored head and splice the untouched tail back on.

    Ties in fused score keep the initial order.
    """
    n = len(fused_head)
    head_ids = [i for i, _ in fused_head]
    if n == 0 or n > len(initial) or set(head_ids) != set(initial.item_ids[:n]) or len(set(head_ids)) != n:
        raise InvalidInputError(f"fused head does not match the first {n} items of ranking {initial.query_id!r}")
    position = {item: p for p, item in enumerate(initial.item_ids)}
    head = sorted(((i, float(s)) for i, s in fused_head), key=lambda e: (-e[1], position[e[0]]))
    return FinalRanking(initial.query_id, tuple(head) + initial.entries[n:], n)


def recall_at_k(final: FinalRanking, truth: str, k: int) -> int:
    if k < 1:
        raise InvalidInputError("k must be positive")
    return int(final.rank_of(truth) <= k)


def average_precision(final: FinalRanking, truth: str) -> float:
    # one relevant item per query, so AP collapses to the reciprocal rank
    return 1.0 / final.rank_of(truth)


def mean_metrics(ranks: Mapping[str, int | None], ks: Sequence[int] = (1, 5, 10)) -> EvalReport:
    """Aggregate per-query truth ranks (1-based, ``None`` when absent)."""
    if not ranks:
        raise InvalidInputError("mean_metrics needs at least one query")
    per_query = {
        qid: QueryMetrics(r, 0.0 if r is None else 1.0 / r) for qid, r in sorted(ranks.items())
    }
    total = len(per_query)
    recall = {
        k: sum(1 for m in per_query.values() if m.rank is not None and m.rank <= k) / total
        for k in sorted(set(ks))
    }
    mean_ap = math.fsum(m.average_precision for m in per_query.values()) / total
    return EvalReport(per_query, recall, mean_ap)
