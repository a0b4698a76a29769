"""Metrics, hyper-parameter sweeps and report files."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import re
from collections.abc import Mapping, Sequence
from pathlib import Path

from .backends import Backends
from .config import RunConfig
from .core import DecayPolicy, EvalReport, FinalRanking, InitialRanking, mean_metrics
from .errors import ClozeRankError, InvalidInputError
from .ingest import Dataset
from .pipeline import CompletionRecord, MaskRecord, rescore, run_pipeline

log = logging.getLogger(__name__)

GRID_KEYS = {"beta": float, "linear_d": float, "d": float, "alpha1": float, "alpha2": float, "n": int, "topn": int}
SKIP_ERRORS = ("CacheMissError", "ScriptMissError")


def evaluate(
    rankings: Mapping[str, FinalRanking],
    dataset: Dataset,
    ks: Sequence[int] = (1, 5, 10),
    config_echo: dict | None = None,
) -> EvalReport:
    """Recall@K and mAP over every query that has a ground truth."""
    ranks: dict[str, int | None] = {}
    excluded = []
    for qid in sorted(rankings):
        truth = dataset.query(qid).ground_truth_id
        if truth is None:
            excluded.append(qid)
            continue
        final = rankings[qid]
        ranks[qid] = final.rank_of(truth) if truth in final.item_ids else None
    if excluded:
        log.warning("%d quer%s without ground truth excluded from metrics", len(excluded), "y" if len(excluded) == 1 else "ies")
    if not ranks:
        raise InvalidInputError("no query with a ground truth to evaluate")
    report = mean_metrics(ranks, ks)
    report.config_echo = dict(config_echo or {})
    report.excluded = excluded
    return report


def initial_as_final(initial: InitialRanking) -> FinalRanking:
    return FinalRanking(initial.query_id, initial.entries, 0)


def baseline_report(dataset: Dataset, ks: Sequence[int] = (1, 5, 10)) -> EvalReport:
    return evaluate({qid: initial_as_final(r) for qid, r in dataset.rankings.items()}, dataset, ks)


# -- sweeps ----------------------------------------------------------------


def parse_grid(specs: Sequence[str]) -> dict[str, list]:
    """``["beta=0.7,0.5", "alpha2=0.05,0.075"]`` -> ``{"beta": [...], ...}``."""
    grid: dict[str, list] = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in GRID_KEYS:
            raise InvalidInputError(f"bad grid spec {spec!r}; expected one of {sorted(GRID_KEYS)}=v1,v2,...")
        key = {"d": "linear_d", "topn": "n"}.get(key, key)
        try:
            parsed = [GRID_KEYS[key](v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise InvalidInputError(f"bad value in grid spec {spec!r}") from exc
        if not parsed:
            raise InvalidInputError(f"grid spec {spec!r} has no values")
        grid.setdefault(key, []).extend(parsed)
    if not grid:
        raise InvalidInputError("empty grid")
    return grid


def _policies(grid: dict, base: RunConfig) -> list[DecayPolicy]:
    out = [DecayPolicy.exponential(b) for b in grid.get("beta", [])]
    out += [DecayPolicy.linear(d) for d in grid.get("linear_d", [])]
    return out or [base.policy()]


def _skip_reason(traces: dict[str, dict]) -> str | None:
    for t in traces.values():
        for e in t["errors"]:
            if any(e.startswith(s) for s in SKIP_ERRORS):
                return f"uncached or unscripted model call ({e.split(':', 1)[0]}) for query {t['query_id']}"
    return None


def sweep(dataset: Dataset, backends: Backends, grid: dict[str, list], base: RunConfig = RunConfig()) -> list[dict]:
    """One metrics row per grid point, sorted by mAP (best first).

    The backends are queried once per distinct head size, largest first;
    smaller heads reuse the masks and completions of the largest one.  All
    decay and fusion settings are then recomputed from the stored comparator
    groups, so they cost no model calls.
    """
    ns = sorted(set(grid.get("n", [base.topn])), reverse=True)
    policies = _policies(grid, base)
    alpha1s = grid.get("alpha1", [base.alpha1])
    alpha2s = grid.get("alpha2", [base.alpha2])

    traces_by_n: dict[int, dict | str] = {}
    masks: dict[str, MaskRecord] | None = None
    comps: dict[str, CompletionRecord] | None = None
    for n in ns:
        res = run_pipeline(dataset, backends, base.replace(topn=n), masks, comps)
        reason = _skip_reason(res.traces)
        traces_by_n[n] = reason if reason else res.traces
        if masks is None and not reason:
            masks, comps = res.masks, res.completions

    rows = []
    order = 0
    for n in sorted(ns):
        for policy, a1, a2 in itertools.product(policies, alpha1s, alpha2s):
            row = {"n": n, **policy.describe(), "alpha1": a1, "alpha2": a2, "order": order}
            order += 1
            stored = traces_by_n[n]
            if isinstance(stored, str):
                row["status"] = "skipped: " + stored
                rows.append(row)
                continue
            try:
                cfg = base.replace(
                    topn=n,
                    beta=policy.value if policy.kind == "exponential" else base.beta,
                    linear_d=policy.value if policy.kind == "linear" else None,
                    alpha1=a1,
                    alpha2=a2,
                )
            except ClozeRankError as exc:
                row["status"] = f"invalid: {exc}"
                rows.append(row)
                continue
            report = evaluate(rescore(dataset, stored, cfg), dataset, base.ks)
            row.update({f"R@{k}": v for k, v in report.recall_at.items()})
            row["mAP"] = report.mean_ap
            row["status"] = "ok"
            rows.append(row)
    rows.sort(key=lambda r: (r["status"] != "ok", -r.get("mAP", 0.0), r["order"]))
    for r in rows:
        del r["order"]
    return rows


# -- report files ----------------------------------------------------------

_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def safe_name(query_id: str) -> str:
    name = _UNSAFE.sub("_", query_id)
    if name != query_id or name.startswith("."):
        name = f"{name}-{hashlib.sha1(query_id.encode()).hexdigest()[:8]}"
    return name


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_jsonl(path: str | os.PathLike, records) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                fh.write(_dump(r) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def report_record(report: EvalReport, baseline: EvalReport | None = None) -> dict:
    rec = {
        "record": "report",
        "num_queries": len(report.per_query),
        "recall_at": {str(k): v for k, v in sorted(report.recall_at.items())},
        "mean_ap": report.mean_ap,
        "summary": report.summary(),
        "excluded": list(report.excluded),
        "config": report.config_echo,
    }
    if baseline is not None:
        rec["baseline_summary"] = baseline.summary()
    return rec


def ranking_record(final: FinalRanking, report: EvalReport, truth: str | None) -> dict:
    m = report.per_query.get(final.query_id)
    return {
        "record": "ranking",
        "query_id": final.query_id,
        "head_size": final.head_size,
        "ground_truth": truth,
        "truth_rank": None if m is None else m.rank,
        "average_precision": None if m is None else m.average_precision,
        "entries": [[i, s] for i, s in final.entries],
    }


def _clear(directory: Path):
    if directory.is_dir():
        for p in directory.glob("*.jsonl"):
            p.unlink()


def emit_report(
    report: EvalReport,
    rankings: Mapping[str, FinalRanking],
    traces: Mapping[str, dict],
    out_dir: str | os.PathLike,
    dataset: Dataset | None = None,
    baseline: EvalReport | None = None,
) -> list[Path]:
    """Write ``report.jsonl``, ``rankings/<query>.jsonl`` and ``traces/<query>.jsonl``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    written = [out / "report.jsonl"]
    write_jsonl(written[0], [report_record(report, baseline)])
    _clear(out / "rankings")
    _clear(out / "traces")
    for qid in sorted(rankings):
        truth = dataset.query(qid).ground_truth_id if dataset is not None else None
        p = out / "rankings" / f"{safe_name(qid)}.jsonl"
        write_jsonl(p, [ranking_record(rankings[qid], report, truth)])
        written.append(p)
    for qid in sorted(traces):
        p = out / "traces" / f"{safe_name(qid)}.jsonl"
        write_jsonl(p, [traces[qid]])
        written.append(p)
    return written


SWEEP_COLUMNS = ("n", "decay", "beta", "linear_d", "alpha1", "alpha2", "R@1", "R@5", "R@10", "mAP", "status")


def emit_sweep(rows: list[dict], out_dir: str | os.PathLike, csv_too: bool = False) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "sweep.jsonl"]
    write_jsonl(paths[0], rows)
    if csv_too:
        cols = list(SWEEP_COLUMNS) + sorted({k for r in rows for k in r} - set(SWEEP_COLUMNS))
        p = out / "sweep.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
        paths.append(p)
    return paths


def format_sweep(rows: list[dict]) -> str:
    lines = [f"{'n':>3} {'decay':>11} {'param':>7} {'alpha1':>7} {'alpha2':>7} {'R@1':>7} {'mAP':>7}  status"]
    for r in rows:
        param = r.get("beta", r.get("linear_d"))
        r1 = f"{100 * r['R@1']:7.2f}" if "R@1" in r else f"{'-':>7}"
        mp = f"{100 * r['mAP']:7.2f}" if "mAP" in r else f"{'-':>7}"
        lines.append(f"{r['n']:>3} {r['decay']:>11} {param:>7.3f} {r['alpha1']:>7.3f} {r['alpha2']:>7.3f} {r1} {mp}  {r['status']}")
    return "\n".join(lines)
