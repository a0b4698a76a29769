"""Command-line entry point.

Subcommands: ``run`` (all stages), ``mask``, ``complete``, ``rerank`` (one
stage each), ``sweep`` (hyper-parameter grids) and ``fixture`` (write a
scripted synthetic dataset).  Every option can also come from ``--config``
(TOML or JSON, keys named like the long flags); flags win.

Exit codes: 0 ok, 2 usage, 3 validation, 4 backend configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import Backends, build_backends
from .config import FileConfig, RunConfig
from .errors import BackendConfigError, ClozeRankError, DatasetError, InvalidInputError, RetrieverError
from .evaluation import baseline_report, emit_report, emit_sweep, evaluate, format_sweep, parse_grid, sweep, write_jsonl
from .ingest import Dataset, fetch_rankings, iter_jsonl, load_dataset, load_gallery, load_queries
from .pipeline import CompletionRecord, MaskRecord, run_completion, run_masking, run_pipeline, run_reranking

log = logging.getLogger("clozerank")

EXIT_USAGE, EXIT_VALIDATION, EXIT_BACKEND = 2, 3, 4


class UsageError(Exception):
    pass


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML/JSON file with defaults for any flag")
    p.add_argument("--manifest", help="query manifest (JSONL)")
    p.add_argument("--gallery", help="gallery index (JSONL)")
    p.add_argument("--rankings", help="initial rankings (JSONL)")
    p.add_argument("--retriever-url", help="fetch initial rankings from this endpoint instead of --rankings")
    p.add_argument("--retriever-top-k", type=int, help="candidates requested from the retriever (default 100)")
    p.add_argument("--strict", action="store_true", default=None, help="reject unsorted rankings with tied scores")
    p.add_argument("--workers", type=int, help="queries processed concurrently")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_backend_flags(p: argparse.ArgumentParser):
    p.add_argument("--backends", help="backend config (TOML/JSON) with masker/completer/comparator sections")
    p.add_argument("--mock", help="scripted mock backend file (JSONL); no network")
    p.add_argument("--cache-dir", help="persistent response cache directory")
    p.add_argument("--offline", action="store_true", default=None, help="serve model calls from --cache-dir only")
    p.add_argument("--templates-dir", help="directory with prompt template overrides")


def _add_scoring_flags(p: argparse.ArgumentParser):
    p.add_argument("--topn", type=int, help="candidates re-ranked per query (default 3)")
    p.add_argument("--beta", type=float, help="exponential decay base (default 0.5)")
    p.add_argument("--linear-d", type=float, help="use linear decay 1 + n*d with this (negative) step")
    p.add_argument("--alpha1", type=float, help="weight of the initial score (default 1.0)")
    p.add_argument("--alpha2", type=float, help="weight of the re-rank score (default 0.075)")
    p.add_argument("--normalize-s1", action="store_true", default=None, help="min-max normalize initial head scores")
    p.add_argument("--ks", help="comma-separated K values for Recall@K (default 1,5,10)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clozerank", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="mask, complete, re-rank and evaluate")
    _add_data_flags(p)
    _add_backend_flags(p)
    _add_scoring_flags(p)

    p = sub.add_parser("mask", help="cloze generation only; writes masks.jsonl")
    _add_data_flags(p)
    _add_backend_flags(p)

    p = sub.add_parser("complete", help="cloze completion only; writes completions.jsonl")
    _add_data_flags(p)
    _add_backend_flags(p)
    p.add_argument("--masks", help="masks.jsonl from the mask stage")
    p.add_argument("--topn", type=int, help="candidates completed per query (default 3)")

    p = sub.add_parser("rerank", help="comparison, fusion and evaluation from staged files")
    _add_data_flags(p)
    _add_backend_flags(p)
    _add_scoring_flags(p)
    p.add_argument("--masks", help="masks.jsonl from the mask stage")
    p.add_argument("--completions", help="completions.jsonl from the complete stage")

    p = sub.add_parser("sweep", help="evaluate a hyper-parameter grid from cached or scripted calls")
    _add_data_flags(p)
    _add_backend_flags(p)
    _add_scoring_flags(p)
    p.add_argument("--grid", action="append", help="e.g. beta=0.7,0.5,0.3,0.2 (repeatable; keys beta, linear_d, alpha1, alpha2, n)")
    p.add_argument("--csv", action="store_true", default=None, help="also write sweep.csv")

    p = sub.add_parser("fixture", help="write a scripted synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--lift", type=int, default=20, help="queries the re-ranker should fix")
    p.add_argument("--harm", type=int, default=0, help="queries a large alpha2 should break")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _resolve(args: argparse.Namespace, fc: FileConfig, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    return fc.get(key, default)


def run_config(args: argparse.Namespace, fc: FileConfig) -> RunConfig:
    ks = _resolve(args, fc, "ks")
    if isinstance(ks, str):
        ks = tuple(int(k) for k in ks.split(",") if k.strip())
    try:
        return RunConfig(
            topn=int(_resolve(args, fc, "topn", 3)),
            beta=float(_resolve(args, fc, "beta", 0.5)),
            linear_d=_resolve(args, fc, "linear_d"),
            alpha1=float(_resolve(args, fc, "alpha1", 1.0)),
            alpha2=float(_resolve(args, fc, "alpha2", 0.075)),
            normalize_s1=bool(_resolve(args, fc, "normalize_s1", False)),
            workers=int(_resolve(args, fc, "workers", 4)),
            ks=tuple(ks) if ks else (1, 5, 10),
            templates_dir=_resolve(args, fc, "templates_dir"),
        )
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc


def load_data(args: argparse.Namespace, fc: FileConfig) -> Dataset:
    manifest, gallery = _resolve(args, fc, "manifest"), _resolve(args, fc, "gallery")
    rankings, retriever = _resolve(args, fc, "rankings"), _resolve(args, fc, "retriever_url")
    if not manifest or not gallery:
        raise UsageError("--manifest and --gallery are required")
    if not rankings and not retriever:
        raise UsageError("give --rankings or --retriever-url")
    strict = bool(_resolve(args, fc, "strict", False))
    if rankings:
        return load_dataset(manifest, gallery, rankings, strict)
    queries = load_queries(manifest)
    fetched = fetch_rankings(queries, retriever, int(_resolve(args, fc, "retriever_top_k", 100)))
    return load_dataset(manifest, gallery, None, strict, rankings=fetched)


def make_backends(args: argparse.Namespace, fc: FileConfig) -> Backends:
    return build_backends(
        config_path=_resolve(args, fc, "backends"),
        mock_path=_resolve(args, fc, "mock"),
        cache_dir=_resolve(args, fc, "cache_dir"),
        offline=bool(_resolve(args, fc, "offline", False)),
    )


def out_dir(args: argparse.Namespace, fc: FileConfig) -> Path:
    out = _resolve(args, fc, "out")
    if not out:
        raise UsageError("--out is required")
    return Path(out)


def _read_staged(path: str | None, flag: str, cls, dataset: Dataset) -> dict:
    if not path:
        raise UsageError(f"{flag} is required")
    if not Path(path).exists():
        raise DatasetError("staged file not found", path)
    out = {}
    for lineno, rec in iter_jsonl(path):
        try:
            r = cls.from_dict(rec)
        except (KeyError, ValueError, TypeError, ClozeRankError) as exc:
            raise DatasetError(f"record does not match the {cls.__name__} schema: {exc}", path, lineno) from exc
        out[r.query_id] = r
    missing = [q.query_id for q in dataset.queries if q.query_id not in out]
    if missing:
        raise DatasetError(f"no record for quer{'y' if len(missing) == 1 else 'ies'} {missing[:5]}", path)
    return out


def _echo(cfg: RunConfig, backends: Backends | None) -> dict:
    echo = cfg.echo()
    if backends is not None:
        echo["backends"] = backends.describe()
    return echo


def _finish(dataset, rankings, traces, cfg, backends, out: Path) -> None:
    report = evaluate(rankings, dataset, cfg.ks, _echo(cfg, backends))
    baseline = baseline_report(dataset, cfg.ks)
    emit_report(report, rankings, traces, out, dataset, baseline)
    s, b = report.summary(), baseline.summary()
    print("  ".join(f"{k} {v:.2f}" for k, v in s.items()) + f"   (initial ranking: {'  '.join(f'{k} {v:.2f}' for k, v in b.items())})")
    degraded = sorted(q for q, t in traces.items() if t["status"].startswith(("fallback", "degraded")) or t["errors"])
    if degraded:
        print(f"{len(degraded)} quer{'y' if len(degraded) == 1 else 'ies'} degraded: {', '.join(degraded[:10])}", file=sys.stderr)


def _stats(backends: Backends | None):
    if backends is not None:
        print("backend stats: " + json.dumps(backends.stats(), sort_keys=True), file=sys.stderr)


def cmd_run(args, fc) -> int:
    cfg = run_config(args, fc)
    out = out_dir(args, fc)
    dataset = load_data(args, fc)
    backends = make_backends(args, fc)
    res = run_pipeline(dataset, backends, cfg)
    write_jsonl(out / "masks.jsonl", [res.masks[q.query_id].to_dict() for q in dataset.queries])
    write_jsonl(out / "completions.jsonl", [res.completions[q.query_id].to_dict() for q in dataset.queries])
    _finish(dataset, res.rankings, res.traces, cfg, backends, out)
    _stats(backends)
    return 0


def cmd_mask(args, fc) -> int:
    cfg = run_config(args, fc)
    out = out_dir(args, fc)
    dataset = load_data(args, fc)
    backends = make_backends(args, fc)
    masks = run_masking(dataset, backends, cfg)
    write_jsonl(out / "masks.jsonl", [masks[q.query_id].to_dict() for q in dataset.queries])
    print(f"wrote {out / 'masks.jsonl'}")
    _stats(backends)
    return 0


def cmd_complete(args, fc) -> int:
    cfg = run_config(args, fc)
    out = out_dir(args, fc)
    dataset = load_data(args, fc)
    masks = _read_staged(_resolve(args, fc, "masks"), "--masks", MaskRecord, dataset)
    backends = make_backends(args, fc)
    comps = run_completion(dataset, masks, backends, cfg)
    write_jsonl(out / "masks.jsonl", [masks[q.query_id].to_dict() for q in dataset.queries])
    write_jsonl(out / "completions.jsonl", [comps[q.query_id].to_dict() for q in dataset.queries])
    print(f"wrote {out / 'completions.jsonl'}")
    _stats(backends)
    return 0


def cmd_rerank(args, fc) -> int:
    cfg = run_config(args, fc)
    out = out_dir(args, fc)
    dataset = load_data(args, fc)
    masks = _read_staged(_resolve(args, fc, "masks"), "--masks", MaskRecord, dataset)
    comps = _read_staged(_resolve(args, fc, "completions"), "--completions", CompletionRecord, dataset)
    for q in dataset.queries:
        head = dataset.rankings[q.query_id].item_ids[: cfg.topn]
        if comps[q.query_id].head != head:
            raise DatasetError(
                f"completions for {q.query_id!r} cover {comps[q.query_id].head}, not the top-{cfg.topn} {head}",
                _resolve(args, fc, "completions"),
                ident=q.query_id,
            )
    needs_model = any(
        m.masked is not None and not m.masked.is_empty and len(comps[qid].completions) >= 2 for qid, m in masks.items()
    )
    backends = make_backends(args, fc) if needs_model else None
    rankings, traces = run_reranking(dataset, masks, comps, backends, cfg)
    write_jsonl(out / "masks.jsonl", [masks[q.query_id].to_dict() for q in dataset.queries])
    write_jsonl(out / "completions.jsonl", [comps[q.query_id].to_dict() for q in dataset.queries])
    _finish(dataset, rankings, traces, cfg, backends, out)
    _stats(backends)
    return 0


def cmd_sweep(args, fc) -> int:
    cfg = run_config(args, fc)
    out = out_dir(args, fc)
    specs = args.grid or fc.get("grid") or []
    if isinstance(specs, str):
        specs = [specs]
    try:
        grid = parse_grid(specs)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    dataset = load_data(args, fc)
    backends = make_backends(args, fc)
    rows = sweep(dataset, backends, grid, cfg)
    emit_sweep(rows, out, bool(_resolve(args, fc, "csv", False)))
    print(format_sweep(rows))
    skipped = [r for r in rows if r["status"] != "ok"]
    if skipped:
        print(f"{len(skipped)} grid point(s) not computed", file=sys.stderr)
    _stats(backends)
    return 0


def cmd_fixture(args, fc) -> int:
    from .synthetic import build_fixture

    fx = build_fixture(args.out, n_lift=args.lift, n_harm=args.harm, seed=args.seed)
    print(f"wrote {len(fx.queries)} queries to {fx.root}")
    print(
        f"try: clozerank run --manifest {fx.manifest} --gallery {fx.gallery} "
        f"--rankings {fx.rankings} --mock {fx.script} --out {fx.root / 'out'}"
    )
    return 0


COMMANDS = {
    "run": cmd_run,
    "mask": cmd_mask,
    "complete": cmd_complete,
    "rerank": cmd_rerank,
    "sweep": cmd_sweep,
    "fixture": cmd_fixture,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        fc = FileConfig.load(getattr(args, "config", None))
        return COMMANDS[args.command](args, fc)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clozerank {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendConfigError, RetrieverError) as exc:
        print(f"backend configuration error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DatasetError, InvalidInputError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
