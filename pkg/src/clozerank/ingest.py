"""Loading and validating queries, gallery and initial rankings."""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import httpx

from .core import GalleryItem, InitialRanking, QueryRecord
from .errors import DatasetError, InvalidInputError, RetrieverError

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    queries: list[QueryRecord]
    gallery: dict[str, GalleryItem]
    rankings: dict[str, InitialRanking]
    base_dir: Path | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {q.query_id: q for q in self.queries}

    def query(self, query_id: str) -> QueryRecord:
        return self._by_id[query_id]

    def validate(self, sources: dict[str, str] | None = None):
        """Cross-check references; raise :class:`DatasetError` on the first problem."""
        src = sources or {}
        ids = [q.query_id for q in self.queries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DatasetError("duplicate query_id", src.get("manifest"), ident=dup)
        for qid, ranking in self.rankings.items():
            if qid not in self._by_id:
                raise DatasetError(f"ranking for unknown query {qid!r}", src.get("rankings"), ident=qid)
            for item_id in ranking.item_ids:
                if item_id not in self.gallery:
                    raise DatasetError(
                        f"ranking for {qid!r} references unknown item {item_id!r}", src.get("rankings"), ident=item_id
                    )
        for q in self.queries:
            if q.query_id not in self.rankings:
                raise DatasetError(f"query {q.query_id!r} has no initial ranking", src.get("manifest"), ident=q.query_id)
            truth = q.ground_truth_id
            if truth is None:
                continue
            if truth not in self.gallery:
                raise DatasetError(
                    f"ground truth {truth!r} of {q.query_id!r} is not in the gallery", src.get("manifest"), ident=truth
                )
            if truth not in self.rankings[q.query_id].item_ids:
                raise DatasetError(
                    f"ground truth {truth!r} of {q.query_id!r} is missing from its ranking; rankings must be complete",
                    src.get("rankings"),
                    ident=truth,
                )


def iter_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, dict]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot open: {exc.strerror}", str(path)) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", str(path), lineno) from exc
            if not isinstance(rec, dict):
                raise DatasetError("record is not an object", str(path), lineno)
            yield lineno, rec


def _field(rec: dict, path, lineno, *names: str, required: bool = True):
    for n in names:
        if n in rec and rec[n] is not None:
            return rec[n]
    if required:
        raise DatasetError(f"missing field {names[0]!r}", str(path), lineno)
    return None


def load_queries(path: str | os.PathLike) -> list[QueryRecord]:
    out, seen = [], set()
    for lineno, rec in iter_jsonl(path):
        qid = str(_field(rec, path, lineno, "query_id"))
        if qid in seen:
            raise DatasetError("duplicate query_id", str(path), lineno, qid)
        seen.add(qid)
        truth = _field(rec, path, lineno, "ground_truth", "ground_truth_id", required=False)
        try:
            out.append(QueryRecord(qid, str(_field(rec, path, lineno, "text")), None if truth is None else str(truth)))
        except InvalidInputError as exc:
            raise DatasetError(str(exc), str(path), lineno, qid) from exc
    return out


def load_gallery(path: str | os.PathLike) -> dict[str, GalleryItem]:
    out: dict[str, GalleryItem] = {}
    for lineno, rec in iter_jsonl(path):
        item_id = str(_field(rec, path, lineno, "item_id"))
        if item_id in out:
            raise DatasetError("duplicate item_id", str(path), lineno, item_id)
        try:
            out[item_id] = GalleryItem(item_id, str(_field(rec, path, lineno, "image_path", "image_ref")))
        except InvalidInputError as exc:
            raise DatasetError(str(exc), str(path), lineno, item_id) from exc
    return out


def make_ranking(
    query_id: str,
    raw: list,
    strict: bool = False,
    where: tuple[str | None, int | None] = (None, None),
    warnings: list[str] | None = None,
) -> InitialRanking:
    """Validate ``[{item_id, score}, ...]`` and sort it if needed."""
    path, lineno = where
    if not isinstance(raw, list) or not raw:
        raise DatasetError(f"ranking for {query_id!r} is empty or not a list", path, lineno, query_id)
    entries = []
    seen = set()
    for e in raw:
        try:
            item_id, score = str(e["item_id"]), float(e["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad ranking entry {e!r} for {query_id!r}", path, lineno, query_id) from exc
        if item_id in seen:
            raise DatasetError(f"ranking for {query_id!r} repeats item {item_id!r}", path, lineno, item_id)
        seen.add(item_id)
        entries.append((item_id, score))
    if any(b[1] > a[1] for a, b in zip(entries, entries[1:])):
        scores = [s for _, s in entries]
        if strict and len(set(scores)) != len(scores):
            raise DatasetError(
                f"ranking for {query_id!r} is unsorted and has tied scores; order is ambiguous", path, lineno, query_id
            )
        msg = f"ranking for {query_id!r} was not sorted by score; sorted it"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        entries.sort(key=lambda e: -e[1])
    return InitialRanking(query_id, tuple(entries))


def load_rankings(path: str | os.PathLike, strict: bool = False, warnings: list[str] | None = None) -> dict[str, InitialRanking]:
    out: dict[str, InitialRanking] = {}
    for lineno, rec in iter_jsonl(path):
        qid = str(_field(rec, path, lineno, "query_id"))
        if qid in out:
            raise DatasetError("duplicate ranking for query", str(path), lineno, qid)
        out[qid] = make_ranking(qid, _field(rec, path, lineno, "ranking"), strict, (str(path), lineno), warnings)
    return out


def load_dataset(
    manifest_path: str | os.PathLike,
    gallery_path: str | os.PathLike,
    rankings_path: str | os.PathLike | None = None,
    strict: bool = False,
    rankings: dict[str, InitialRanking] | None = None,
) -> Dataset:
    """Load the three files and cross-validate them.

    Pass ``rankings`` instead of ``rankings_path`` when they came from a
    retriever endpoint.  Relative image paths resolve against the gallery
    file's directory.
    """
    warnings: list[str] = []
    queries = load_queries(manifest_path)
    gallery = load_gallery(gallery_path)
    if rankings is None:
        if rankings_path is None:
            raise DatasetError("no rankings given")
        rankings = load_rankings(rankings_path, strict, warnings)
    ds = Dataset(queries, gallery, rankings, Path(gallery_path).resolve().parent, warnings)
    ds.validate(
        {"manifest": str(manifest_path), "gallery": str(gallery_path), "rankings": str(rankings_path or "<retriever>")}
    )
    return ds


class HeadTail(NamedTuple):
    head: InitialRanking
    tail: tuple[tuple[str, float], ...]


def top_n(ranking: InitialRanking, n: int) -> HeadTail:
    if n < 1:
        raise InvalidInputError("top_n needs n >= 1")
    k = min(n, len(ranking))
    return HeadTail(InitialRanking(ranking.query_id, ranking.entries[:k]), ranking.entries[k:])


def fetch_initial_scores(
    query: QueryRecord,
    endpoint: str,
    top_k: int = 100,
    timeout: float = 30.0,
    client: httpx.Client | None = None,
) -> InitialRanking:
    """POST ``{query_id, text, top_k}`` and validate the ``ranking`` reply."""
    payload = {"query_id": query.query_id, "text": query.text, "top_k": top_k}
    try:
        if client is not None:
            resp = client.post(endpoint, json=payload, timeout=timeout)
        else:
            resp = httpx.post(endpoint, json=payload, timeout=timeout)
        resp.raise_for_status()
        body = resp.json()
    except httpx.HTTPError as exc:
        raise RetrieverError(f"retriever request for {query.query_id!r} failed: {exc}") from exc
    except ValueError as exc:
        raise DatasetError(f"retriever reply for {query.query_id!r} is not JSON", endpoint, ident=query.query_id) from exc
    if not isinstance(body, dict) or "ranking" not in body:
        raise DatasetError(f"retriever reply for {query.query_id!r} has no ranking", endpoint, ident=query.query_id)
    return make_ranking(query.query_id, body["ranking"], where=(endpoint, None))


def fetch_rankings(queries: list[QueryRecord], endpoint: str, top_k: int = 100, timeout: float = 30.0) -> dict[str, InitialRanking]:
    with httpx.Client() as client:
        return {q.query_id: fetch_initial_scores(q, endpoint, top_k, timeout, client) for q in queries}
