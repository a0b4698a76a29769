"""Cloze generation: find verbs and colors in a query and mask them."""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import Backend, ChatRequest, Message, RequestTag, Role
from .core import PLACEHOLDER_RE, MaskedQuery, Slot, SlotKind
from .errors import BackendError, InvalidInputError, MaskingError, PipelineError
from .templates import DEFAULT, Templates

log = logging.getLogger(__name__)

_EDGE_CHARS = "\"'`“”‘’*.,;:!?()[]{} \t"
_BULLET = re.compile(r"^\s*-\s+(.*)$")


@dataclass(frozen=True)
class MaskPrompt:
    kind: SlotKind
    messages: tuple[Message, ...]


def build_mask_prompt(text: str, kind: SlotKind | str, templates: Templates = DEFAULT) -> MaskPrompt:
    if not text or not text.strip():
        raise InvalidInputError("cannot build a mask prompt for empty text")
    kind = SlotKind(kind)
    name = "mask_verb" if kind is SlotKind.VERB else "mask_color"
    return MaskPrompt(kind, (Message("user", templates.render(name, query=text)),))


def parse_mask_response(text: str, response: str, kind: SlotKind | str = SlotKind.VERB) -> tuple[list[str], list[str]]:
    """Return ``(tokens, warnings)`` from a ``- token`` bullet list.

    Tokens are kept in response order, exact repeats dropped, and anything
    that does not occur verbatim in ``text`` is discarded with a warning.
    """
    kind = SlotKind(kind)
    tokens: list[str] = []
    warnings: list[str] = []
    for line in (response or "").splitlines():
        m = _BULLET.match(line)
        if not m:
            continue
        token = m.group(1).strip().strip(_EDGE_CHARS)
        if not token or token.upper() == "NONE":
            continue
        if token not in text:
            warnings.append(f"{kind.value} token {token!r} does not occur in the query; dropped")
            continue
        if token not in tokens:
            tokens.append(token)
    return tokens, warnings


def _token_pattern(token: str) -> re.Pattern:
    pre = r"(?<!\w)" if re.match(r"\w", token) else ""
    post = r"(?!\w)" if re.search(r"\w$", token) else ""
    return re.compile(pre + re.escape(token) + post)


def _mask(text: str, verbs: Sequence[str], colors: Sequence[str], strict: bool) -> tuple[MaskedQuery, list[str]]:
    if PLACEHOLDER_RE.search(text):
        raise InvalidInputError("query text already contains a placeholder token")
    taken: list[tuple[int, int, SlotKind, str]] = []
    warnings: list[str] = []
    for kind, tokens in ((SlotKind.VERB, verbs), (SlotKind.COLOR, colors)):
        for token in tokens:
            if not token:
                raise MaskingError(token, "cannot mask an empty token")
            for m in _token_pattern(token).finditer(text):
                s, e = m.span()
                if all(e <= ts or s >= te for ts, te, _, _ in taken):
                    taken.append((s, e, kind, token))
                    break
            else:
                if strict:
                    raise MaskingError(token)
                warnings.append(f"{kind.value} token {token!r} has no free whole-word occurrence; not masked")
    taken.sort()
    parts, slots, cursor = [], [], 0
    for i, (s, e, kind, token) in enumerate(taken):
        parts.append(text[cursor:s])
        parts.append(kind.placeholder)
        slots.append(Slot(i, kind, token, (s, e)))
        cursor = e
    parts.append(text[cursor:])
    return MaskedQuery(text, "".join(parts), tuple(slots), tuple(warnings)), warnings


def apply_masks(text: str, verbs: Sequence[str], colors: Sequence[str]) -> MaskedQuery:
    """Mask the first free whole-word occurrence of each token, verbs first."""
    return _mask(text, verbs, colors, strict=True)[0]


def _expand_occurrences(text: str, tokens: Sequence[str]) -> list[str]:
    # a listed token masks every whole-word occurrence of it
    out = []
    for t in tokens:
        out.extend([t] * max(1, len(_token_pattern(t).findall(text))))
    return out


def generate_masked_query(
    text: str,
    backend: Backend,
    query_id: str | None = None,
    templates: Templates = DEFAULT,
    concurrent: bool = False,
) -> MaskedQuery:
    """Ask the masking model for verbs and colors and mask them in ``text``.

    A query that ends up with no slots comes back with empty ``slots`` and a
    warning; callers skip re-ranking for it.
    """

    def extract(kind: SlotKind) -> tuple[list[str], list[str]]:
        prompt = build_mask_prompt(text, kind, templates)
        req = ChatRequest(prompt.messages, Role.MASKER, RequestTag(query_id, kind.value))
        try:
            response = backend.chat(req)
        except BackendError as exc:
            raise PipelineError(query_id or "?", f"masking ({kind.value}) failed: {exc}") from exc
        return parse_mask_response(text, response, kind)

    kinds = (SlotKind.VERB, SlotKind.COLOR)
    if concurrent:
        with ThreadPoolExecutor(max_workers=2) as pool:
            (verbs, w1), (colors, w2) = pool.map(extract, kinds)
    else:
        (verbs, w1), (colors, w2) = map(extract, kinds)

    masked, w3 = _mask(text, _expand_occurrences(text, verbs), _expand_occurrences(text, colors), strict=False)
    warnings = w1 + w2 + w3
    if masked.is_empty:
        warnings.append("no maskable verbs or colors; re-ranking will be skipped")
    for w in warnings:
        log.debug("[%s] %s", query_id, w)
    return MaskedQuery(masked.original_text, masked.masked_text, masked.slots, tuple(warnings))
