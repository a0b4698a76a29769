"""End-to-end orchestration: mask, complete, re-rank, per query.

The three stage functions below are shared by ``run`` and by the staged
``mask``/``complete``/``rerank`` commands, so both paths produce the same
records.  Every per-query failure degrades to the initial order; nothing
here aborts a batch.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .backends import Backends
from .cloze import generate_masked_query
from .completion import complete_candidates
from .config import RunConfig
from .core import Completion, FinalRanking, MaskedQuery, QueryRecord, Slot, SlotKind
from .errors import PipelineError
from .ingest import Dataset, top_n
from .rerank import RerankOutcome, fuse_head, rerank_query
from .templates import Templates

log = logging.getLogger(__name__)


@dataclass
class MaskRecord:
    query_id: str
    masked: MaskedQuery | None
    error: str | None = None

    def to_dict(self) -> dict:
        m = self.masked
        return {
            "record": "mask",
            "query_id": self.query_id,
            "original_text": None if m is None else m.original_text,
            "masked_text": None if m is None else m.masked_text,
            "slots": [] if m is None else [slot_to_dict(s) for s in m.slots],
            "warnings": [] if m is None else list(m.warnings),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskRecord":
        if d.get("record") != "mask":
            raise ValueError("not a mask record")
        masked = None
        if d.get("masked_text") is not None:
            slots = tuple(
                Slot(s["index"], SlotKind(s["kind"]), s["token"], tuple(s["span"])) for s in d["slots"]
            )
            masked = MaskedQuery(d["original_text"], d["masked_text"], slots, tuple(d.get("warnings", ())))
        return cls(d["query_id"], masked, d.get("error"))


@dataclass
class CompletionRecord:
    query_id: str
    head: list[str]
    completions: list[Completion] = field(default_factory=list)
    errors: list[str | None] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "record": "completions",
            "query_id": self.query_id,
            "head": list(self.head),
            "completions": [
                {
                    "item_id": c.item_id,
                    "fills": list(c.fills),
                    "raw_response": c.raw_response,
                    "warnings": list(c.warnings),
                    "error": e,
                }
                for c, e in zip(self.completions, self.errors)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionRecord":
        if d.get("record") != "completions":
            raise ValueError("not a completions record")
        comps, errs = [], []
        for c in d["completions"]:
            comps.append(Completion(d["query_id"], c["item_id"], tuple(c["fills"]), c["raw_response"], tuple(c["warnings"])))
            errs.append(c.get("error"))
        return cls(d["query_id"], list(d["head"]), comps, errs)

    def prefix(self, head: list[str]) -> "CompletionRecord":
        """Reuse completions computed for a longer head."""
        if self.head[: len(head)] != head:
            raise ValueError(f"{self.query_id}: cached head does not extend the requested head")
        k = min(len(head), len(self.completions))
        return CompletionRecord(self.query_id, head, self.completions[:k], self.errors[:k])


def slot_to_dict(s: Slot) -> dict:
    return {"index": s.index, "kind": s.kind.value, "token": s.original_token, "span": list(s.span)}


def mask_one(query: QueryRecord, backends: Backends, templates: Templates | None = None) -> MaskRecord:
    try:
        masked = generate_masked_query(query.text, backends.masker, query.query_id, templates or Templates())
        return MaskRecord(query.query_id, masked)
    except PipelineError as exc:
        log.warning("%s", exc)
        return MaskRecord(query.query_id, None, str(exc))


def complete_one(
    query: QueryRecord,
    mask: MaskRecord,
    dataset: Dataset,
    backends: Backends,
    n: int,
    templates: Templates | None = None,
    reuse: CompletionRecord | None = None,
) -> CompletionRecord:
    head = top_n(dataset.rankings[query.query_id], n).head.item_ids
    if mask.masked is None or mask.masked.is_empty or len(head) < 2:
        return CompletionRecord(query.query_id, head)
    if reuse is not None and reuse.completions:
        return reuse.prefix(head)
    outcomes = complete_candidates(
        mask.masked,
        [dataset.gallery[i] for i in head],
        backends.completer,
        query.query_id,
        dataset.base_dir,
        backends.completer.config.parallelism,
        templates or Templates(),
    )
    return CompletionRecord(query.query_id, head, [o.completion for o in outcomes], [o.error for o in outcomes])


def rerank_one(
    query: QueryRecord,
    mask: MaskRecord,
    comps: CompletionRecord,
    dataset: Dataset,
    backends: Backends | None,
    cfg: RunConfig,
    templates: Templates | None = None,
) -> tuple[FinalRanking, dict]:
    initial = dataset.rankings[query.query_id]
    expected_head = top_n(initial, cfg.topn).head.item_ids
    if comps.head != expected_head:
        raise ValueError(f"{query.query_id}: completion head {comps.head} does not match top-{cfg.topn} {expected_head}")
    policy, weights = cfg.policy(), cfg.weights()
    if mask.masked is None:
        s1, _, final = fuse_head(initial, cfg.topn, None, policy, weights, cfg.normalize_s1)
        outcome = RerankOutcome(final, None, "degraded_mask_error", s1, None, errors=[mask.error or ""])
    else:
        outcome = rerank_query(
            query,
            mask.masked,
            initial,
            comps.completions,
            policy,
            weights,
            backends.comparator if backends is not None else None,
            n=cfg.topn,
            normalize_s1=cfg.normalize_s1,
            templates=templates or Templates(),
        )
    return outcome.final, build_trace(query, mask, comps, outcome)


def build_trace(query: QueryRecord, mask: MaskRecord, comps: CompletionRecord, outcome: RerankOutcome) -> dict:
    m = mask.to_dict()
    c = comps.to_dict()
    final = outcome.final
    return {
        "record": "trace",
        "query_id": query.query_id,
        "query": query.text,
        "masked_query": m["masked_text"],
        "slots": m["slots"],
        "mask_warnings": m["warnings"],
        "mask_error": mask.error,
        "head": list(comps.head),
        "completions": c["completions"],
        "status": outcome.status,
        "ranking_line": outcome.ranking_line,
        "rationale": None if outcome.result is None else outcome.result.rationale,
        "groups": outcome.groups,
        "s1": outcome.s1,
        "s2": outcome.s2,
        "fused": [[i, s] for i, s in final.entries[: final.head_size]],
        "errors": list(outcome.errors) + [e for e in comps.errors if e],
    }


@dataclass
class PipelineResult:
    rankings: dict[str, FinalRanking]
    traces: dict[str, dict]
    masks: dict[str, MaskRecord]
    completions: dict[str, CompletionRecord]


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_masking(dataset: Dataset, backends: Backends, cfg: RunConfig) -> dict[str, MaskRecord]:
    templates = Templates(cfg.templates_dir)
    recs = _map(lambda q: mask_one(q, backends, templates), dataset.queries, cfg.workers)
    return {r.query_id: r for r in recs}


def run_completion(
    dataset: Dataset,
    masks: dict[str, MaskRecord],
    backends: Backends,
    cfg: RunConfig,
    reuse: dict[str, CompletionRecord] | None = None,
) -> dict[str, CompletionRecord]:
    templates = Templates(cfg.templates_dir)

    def one(q: QueryRecord) -> CompletionRecord:
        return complete_one(q, masks[q.query_id], dataset, backends, cfg.topn, templates, (reuse or {}).get(q.query_id))

    recs = _map(one, dataset.queries, cfg.workers)
    return {r.query_id: r for r in recs}


def run_reranking(
    dataset: Dataset,
    masks: dict[str, MaskRecord],
    completions: dict[str, CompletionRecord],
    backends: Backends | None,
    cfg: RunConfig,
) -> tuple[dict[str, FinalRanking], dict[str, dict]]:
    templates = Templates(cfg.templates_dir)

    def one(q: QueryRecord):
        return rerank_one(q, masks[q.query_id], completions[q.query_id], dataset, backends, cfg, templates)

    out = _map(one, dataset.queries, cfg.workers)
    rankings = {q.query_id: r for q, (r, _) in zip(dataset.queries, out)}
    traces = {q.query_id: t for q, (_, t) in zip(dataset.queries, out)}
    return rankings, traces


def run_pipeline(
    dataset: Dataset,
    backends: Backends,
    cfg: RunConfig = RunConfig(),
    masks: dict[str, MaskRecord] | None = None,
    reuse_completions: dict[str, CompletionRecord] | None = None,
) -> PipelineResult:
    """Mask, complete and re-rank every query.

    Each query is carried through all three stages by one worker; ``masks``
    and ``reuse_completions`` let a caller skip stages it already ran.
    """
    templates = Templates(cfg.templates_dir)

    def one(q: QueryRecord):
        mask = masks[q.query_id] if masks is not None else mask_one(q, backends, templates)
        reuse = (reuse_completions or {}).get(q.query_id)
        comps = complete_one(q, mask, dataset, backends, cfg.topn, templates, reuse)
        final, trace = rerank_one(q, mask, comps, dataset, backends, cfg, templates)
        return mask, comps, final, trace

    out = _map(one, dataset.queries, cfg.workers)
    result = PipelineResult({}, {}, {}, {})
    for q, (mask, comps, final, trace) in zip(dataset.queries, out):
        result.masks[q.query_id] = mask
        result.completions[q.query_id] = comps
        result.rankings[q.query_id] = final
        result.traces[q.query_id] = trace
    return result


def rescore(dataset: Dataset, traces: dict[str, dict], cfg: RunConfig) -> dict[str, FinalRanking]:
    """Recompute decay, fusion and merge from stored comparator groups.

    No backend is touched; ``cfg.topn`` must equal the head size the traces
    were produced with.
    """
    out = {}
    policy, weights = cfg.policy(), cfg.weights()
    for q in dataset.queries:
        t = traces[q.query_id]
        initial = dataset.rankings[q.query_id]
        if len(t["head"]) != min(cfg.topn, len(initial)):
            raise ValueError(f"{q.query_id}: traces were made with a different head size")
        groups = t["groups"]
        _, _, final = fuse_head(initial, len(t["head"]), groups, policy, weights, cfg.normalize_s1)
        out[q.query_id] = final
    return out
