"""Cloze completion: one multimodal call per candidate image."""

from __future__ import annotations

import io
import logging
import mimetypes
import re
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import unquote, urlparse

import httpx
from PIL import Image, UnidentifiedImageError

from .backends import Backend, ChatRequest, ImagePart, Message, RequestTag, Role
from .core import UNKNOWN, Completion, GalleryItem, MaskedQuery, SlotKind
from .errors import BackendError, ImageLoadError, InvalidInputError
from .templates import DEFAULT, Templates

log = logging.getLogger(__name__)

MAX_FILL_WORDS = 6
_SLOT_LINE = re.compile(r"^\s*[*_`>\-]*\s*SLOT\s*(\d+)\s*[*_`]*\s*:\s*(.*)$", re.IGNORECASE)
_FILL_EDGES = "\"'`“”‘’*<>[]() \t."


def verify_image(data: bytes, where: str = "image") -> str:
    """Check that ``data`` decodes as an image and return its media type."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            fmt = img.format
            img.verify()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageLoadError(f"{where} is not a readable image: {exc}") from exc
    return Image.MIME.get(fmt or "", "") or mimetypes.types_map.get("." + (fmt or "").lower(), "application/octet-stream")


def load_image(image_ref: str, base_dir: str | Path | None = None, timeout: float = 30.0) -> ImagePart:
    """Read an image from a path, ``file://`` URL, or ``http(s)://`` URL."""
    parsed = urlparse(image_ref)
    try:
        if parsed.scheme in ("http", "https"):
            resp = httpx.get(image_ref, timeout=timeout, follow_redirects=True)
            resp.raise_for_status()
            data = resp.content
        else:
            path = Path(unquote(parsed.path)) if parsed.scheme == "file" else Path(image_ref)
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            data = path.read_bytes()
    except (OSError, httpx.HTTPError) as exc:
        raise ImageLoadError(f"cannot read image {image_ref!r}: {exc}") from exc
    return ImagePart(verify_image(data, repr(image_ref)), data)


@dataclass(frozen=True)
class CompletionPrompt:
    messages: tuple[Message, ...]
    slot_manifest: tuple[tuple[int, SlotKind], ...]


def build_completion_prompt(masked: MaskedQuery, image: ImagePart, templates: Templates = DEFAULT) -> CompletionPrompt:
    if masked.is_empty:
        raise InvalidInputError("masked query has no slots; completion must be bypassed")
    verify_image(image.data)
    manifest = tuple((s.index, s.kind) for s in masked.slots)
    text = templates.render(
        "completion",
        num_slots=len(manifest),
        masked_query=masked.masked_text,
        slot_manifest="\n".join(f"SLOT {i}: {k.placeholder}" for i, k in manifest),
    )
    return CompletionPrompt((Message("user", text, image),), manifest)


def _clean_fill(raw: str, index: int, warnings: list[str]) -> str | None:
    fill = raw.strip().strip(_FILL_EDGES).strip()
    if not fill:
        return None
    if fill.upper() == UNKNOWN:
        return UNKNOWN
    words = fill.split()
    if len(words) > MAX_FILL_WORDS:
        warnings.append(f"SLOT {index} fill truncated to {MAX_FILL_WORDS} words")
        fill = " ".join(words[:MAX_FILL_WORDS])
    return fill


def _parse(masked: MaskedQuery, response: str) -> tuple[list[str | None], list[str]]:
    n = len(masked.slots)
    fills: list[str | None] = [None] * n
    seen: set[int] = set()
    warnings: list[str] = []
    for line in (response or "").splitlines():
        m = _SLOT_LINE.match(line)
        if not m:
            continue
        idx = int(m.group(1))
        if idx >= n:
            warnings.append(f"SLOT {idx} is out of range for {n} slot(s); ignored")
            continue
        if idx in seen:
            warnings.append(f"duplicate SLOT {idx} line ignored")
            continue
        seen.add(idx)
        fills[idx] = _clean_fill(m.group(2), idx, warnings)
        if fills[idx] is None:
            warnings.append(f"SLOT {idx} has an empty fill")
    return fills, warnings


def _finish(masked, response, fills, warnings, query_id, item_id) -> Completion:
    missing = [i for i, f in enumerate(fills) if f is None]
    if missing:
        warnings = warnings + [f"missing SLOT {', '.join(map(str, missing))}; padded with {UNKNOWN}"]
    return Completion(query_id, item_id, tuple(f or UNKNOWN for f in fills), response or "", tuple(warnings))


def parse_completion_response(masked: MaskedQuery, response: str, query_id: str = "", item_id: str = "") -> Completion:
    """Read ``SLOT i: fill`` lines; always returns one fill per slot."""
    fills, warnings = _parse(masked, response)
    return _finish(masked, response, fills, warnings, query_id, item_id)


def complete_candidate(
    masked: MaskedQuery,
    item: GalleryItem,
    backend: Backend,
    query_id: str = "",
    image: ImagePart | None = None,
    base_dir: str | Path | None = None,
    templates: Templates = DEFAULT,
) -> Completion:
    """Fill the cloze for one candidate, with one format-repair retry.

    Raises :class:`BackendError` or :class:`ImageLoadError`; the caller
    decides how to degrade.
    """
    if image is None:
        image = load_image(item.image_ref, base_dir)
    prompt = build_completion_prompt(masked, image, templates)
    tag = RequestTag(query_id, item.item_id)
    response = backend.chat(ChatRequest(prompt.messages, Role.COMPLETER, tag))
    fills, warnings = _parse(masked, response)
    missing = [i for i, f in enumerate(fills) if f is None]
    if not missing:
        return _finish(masked, response, fills, warnings, query_id, item.item_id)

    repair = templates.render(
        "completion_repair",
        num_slots=len(masked.slots),
        indices=", ".join(str(s.index) for s in masked.slots),
    )
    messages = prompt.messages + (Message("assistant", response), Message("user", repair))
    retry = backend.chat(ChatRequest(messages, Role.COMPLETER, tag))
    fills2, warnings2 = _parse(masked, retry)
    note = "format repair retry issued"
    if sum(f is None for f in fills2) < len(missing):
        return _finish(masked, retry, fills2, [note] + warnings2, query_id, item.item_id)
    return _finish(masked, response, fills, [note] + warnings, query_id, item.item_id)


@dataclass(frozen=True)
class CandidateOutcome:
    completion: Completion
    error: str | None = None


def complete_candidates(
    masked: MaskedQuery,
    items: Sequence[GalleryItem],
    backend: Backend,
    query_id: str = "",
    base_dir: str | Path | None = None,
    parallelism: int = 1,
    templates: Templates = DEFAULT,
) -> list[CandidateOutcome]:
    """Complete every candidate, in the order given.

    A candidate whose image cannot be read or whose backend call fails gets an
    all-UNKNOWN completion so it stays in the list.
    """

    def one(item: GalleryItem) -> CandidateOutcome:
        try:
            return CandidateOutcome(complete_candidate(masked, item, backend, query_id, None, base_dir, templates))
        except (BackendError, ImageLoadError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            log.warning("[%s/%s] completion failed: %s", query_id, item.item_id, msg)
            fallback = Completion.all_unknown(query_id, item.item_id, len(masked.slots), [f"completion failed ({msg}); all {UNKNOWN}"])
            return CandidateOutcome(fallback, msg)

    if parallelism <= 1 or len(items) <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(items))) as pool:
        return list(pool.map(one, items))
