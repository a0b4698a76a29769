"""Comparison and re-ranking of candidate completions, then score fusion."""

from __future__ import annotations

import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .backends import Backend, ChatRequest, Message, RequestTag, Role
from .core import (
    Completion,
    DecayPolicy,
    FinalRanking,
    FusionWeights,
    InitialRanking,
    MaskedQuery,
    QueryRecord,
    RerankResult,
    decay_scores,
    fuse_scores,
    merge_ranking,
    minmax_normalize,
)
from .errors import BackendError, InvalidInputError, RankParseError
from .templates import DEFAULT, Templates

log = logging.getLogger(__name__)

_RANKING_LINE = re.compile(r"^[\s*_#`>]*RANKING\s*[*_`]*\s*:(.*)$", re.IGNORECASE)
_LABEL_PREFIX = re.compile(r"^CANDIDATE\s+", re.IGNORECASE)
_BAD_ID_CHARS = re.compile(r"[>=\n]")


@dataclass(frozen=True)
class ComparisonPrompt:
    messages: tuple[Message, ...]
    candidate_ids: tuple[str, ...]


def build_comparison_prompt(
    query: QueryRecord,
    masked: MaskedQuery,
    completions: Sequence[Completion],
    templates: Templates = DEFAULT,
) -> ComparisonPrompt:
    if len(completions) < 2:
        raise InvalidInputError("comparison needs at least two completions")
    ids = [c.item_id for c in completions]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate candidate ids in comparison")
    for i in ids:
        if _BAD_ID_CHARS.search(i) or i != i.strip():
            raise InvalidInputError(f"candidate id {i!r} cannot be written in the ranking grammar")

    slot_answers = "\n".join(f"SLOT {s.index} ({s.kind.value}): {s.original_token}" for s in masked.slots)
    blocks = []
    for c in completions:
        lines = [f"CANDIDATE {c.item_id}", f"Completed sentence: {masked.unmask(c.fills)}"]
        lines += [f"SLOT {s.index} ({s.kind.value}): {f}" for s, f in zip(masked.slots, c.fills)]
        blocks.append("\n".join(lines))
    text = templates.render(
        "comparison",
        query=query.text,
        masked_query=masked.masked_text,
        slot_answers=slot_answers,
        candidates="\n\n".join(blocks),
    )
    return ComparisonPrompt((Message("user", text),), tuple(ids))


def find_ranking_line(response: str) -> str | None:
    last = None
    for line in (response or "").splitlines():
        if _RANKING_LINE.match(line):
            last = line.strip()
    return last


def parse_rank_response(response: str, expected_ids: Iterable[str], query_id: str = "") -> RerankResult:
    """Parse ``RANKING: a > b = c``; the last such line wins.

    Raises :class:`RankParseError` unless the answer is a tie-aware
    permutation of ``expected_ids``.
    """
    expected = set(expected_ids)
    lines = (response or "").splitlines()
    idx = None
    for i, line in enumerate(lines):
        if _RANKING_LINE.match(line):
            idx = i
    if idx is None:
        raise RankParseError("no RANKING line in the response")
    body = _RANKING_LINE.match(lines[idx]).group(1)
    groups = []
    for chunk in body.split(">"):
        group = []
        for label in chunk.split("="):
            label = _LABEL_PREFIX.sub("", label.strip().strip("*`\"'.").strip()).strip()
            if not label:
                raise RankParseError(f"empty label in {lines[idx].strip()!r}")
            group.append(label)
        groups.append(tuple(group))
    flat = [i for g in groups for i in g]
    unknown = [i for i in flat if i not in expected]
    if unknown:
        raise RankParseError(f"unknown candidate id(s) {unknown}")
    dupes = sorted({i for i in flat if flat.count(i) > 1})
    if dupes:
        raise RankParseError(f"candidate id(s) listed twice: {dupes}")
    missing = sorted(expected - set(flat))
    if missing:
        raise RankParseError(f"candidate id(s) missing: {missing}")
    rationale = "\n".join(lines[:idx] + lines[idx + 1 :]).strip()
    return RerankResult(query_id, tuple(groups), rationale)


def fuse_head(
    initial: InitialRanking,
    n: int,
    groups: Sequence[Sequence[str]] | None,
    policy: DecayPolicy,
    weights: FusionWeights,
    normalize_s1: bool = False,
) -> tuple[dict[str, float], dict[str, float] | None, FinalRanking]:
    """Score the first ``n`` entries and merge; ``groups=None`` means bypass."""
    entries = initial.entries[: min(n, len(initial))]
    s1 = {i: s for i, s in entries}
    if normalize_s1:
        s1 = minmax_normalize(s1)
    if groups is None:
        s2 = None
        fused = {i: weights.alpha1 * v for i, v in s1.items()}
    else:
        s2 = decay_scores(groups, policy)
        fused = fuse_scores(s1, s2, weights)
    final = merge_ranking(initial, [(i, fused[i]) for i, _ in entries])
    return s1, s2, final


@dataclass
class RerankOutcome:
    final: FinalRanking
    result: RerankResult | None
    status: str
    s1: dict[str, float]
    s2: dict[str, float] | None
    ranking_line: str | None = None
    errors: list[str] = field(default_factory=list)

    @property
    def groups(self) -> list[list[str]] | None:
        return None if self.result is None else [list(g) for g in self.result.groups]


def compare(
    query: QueryRecord,
    masked: MaskedQuery,
    completions: Sequence[Completion],
    backend: Backend,
    templates: Templates = DEFAULT,
) -> tuple[RerankResult, str, str | None, list[str]]:
    """One comparison call with a single retry; falls back to all-tied.

    Returns ``(result, status, ranking_line, errors)``.
    """
    ids = [c.item_id for c in completions]
    prompt = build_comparison_prompt(query, masked, completions, templates)
    # the candidate set rides in the tag so a script can answer per head size
    tag = RequestTag(query.query_id, ",".join(ids))
    errors: list[str] = []
    messages = prompt.messages
    for attempt in range(2):
        try:
            response = backend.chat(ChatRequest(messages, Role.COMPARATOR, tag))
        except BackendError as exc:
            errors.append(f"{type(exc).__name__}: {exc}")
            log.warning("[%s] comparison call failed: %s", query.query_id, exc)
            return RerankResult.all_tied(query.query_id, ids), "fallback_backend", None, errors
        try:
            result = parse_rank_response(response, ids, query.query_id)
            return result, "reranked" if attempt == 0 else "reranked_after_retry", find_ranking_line(response), errors
        except RankParseError as exc:
            errors.append(f"RankParseError: {exc}")
            repair = templates.render("comparison_repair", ids=", ".join(ids))
            messages = prompt.messages + (Message("assistant", response), Message("user", repair))
    log.warning("[%s] unparseable ranking after retry; keeping the initial order", query.query_id)
    return RerankResult.all_tied(query.query_id, ids, "ranking could not be parsed"), "fallback_parse", None, errors


def rerank_query(
    query: QueryRecord,
    masked: MaskedQuery,
    initial: InitialRanking,
    completions: Sequence[Completion],
    policy: DecayPolicy,
    weights: FusionWeights,
    backend: Backend | None,
    n: int | None = None,
    normalize_s1: bool = False,
    templates: Templates = DEFAULT,
) -> RerankOutcome:
    """Compare, decay, fuse and merge for one query.

    ``n`` defaults to the number of completions; it only matters for the
    bypass path (no slots or fewer than two candidates), where the head keeps
    its initial order with ``alpha1 * s1`` scores.
    """
    n = len(completions) if n is None else min(n, len(initial))
    head_ids = initial.item_ids[: len(completions)]
    if [c.item_id for c in completions] != head_ids:
        raise InvalidInputError(f"completions for {query.query_id!r} do not match the head of its initial ranking")

    if masked.is_empty or len(completions) < 2:
        status = "bypass_no_slots" if masked.is_empty else "bypass_short_head"
        s1, _, final = fuse_head(initial, max(n, 1), None, policy, weights, normalize_s1)
        return RerankOutcome(final, None, status, s1, None)

    if backend is None:
        raise InvalidInputError("a comparator backend is required to re-rank")
    result, status, line, errors = compare(query, masked, completions, backend, templates)
    s1, s2, final = fuse_head(initial, len(completions), result.groups, policy, weights, normalize_s1)
    return RerankOutcome(final, result, status, s1, s2, line, errors)
