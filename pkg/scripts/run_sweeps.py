"""Sweep the four hyper-parameter grids: decay, head size, alpha1, alpha2.

Without data flags the script builds the scripted synthetic fixture (lift and
harm queries) and runs fully offline.  With real data, pass the three files
plus ``--mock`` or ``--backends``/``--cache-dir``; the first sweep fills the
cache and the rest replay it.

    python scripts/run_sweeps.py --out runs/sweeps
    python scripts/run_sweeps.py --manifest m.jsonl --gallery g.jsonl \\
        --rankings r.jsonl --backends backends.toml --cache-dir cache --out runs/real
"""

import argparse
import json
import tempfile
import time
from pathlib import Path

from clozerank.backends import build_backends
from clozerank.config import RunConfig
from clozerank.evaluation import baseline_report, emit_sweep, format_sweep, sweep
from clozerank.ingest import load_dataset
from clozerank.synthetic import build_fixture

TABLES = {
    "decay": {"beta": [0.7, 0.5, 0.3, 0.2], "linear_d": [-0.3, -0.2, -0.1]},
    "candidates": {"n": [2, 3, 4, 5]},
    "alpha1": {"alpha1": [0.7, 0.8, 0.9, 0.91, 0.95, 0.98, 0.995], "alpha2": [1.0]},
    "alpha2": {"alpha2": [0.01, 0.025, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3]},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--manifest")
    ap.add_argument("--gallery")
    ap.add_argument("--rankings")
    ap.add_argument("--mock")
    ap.add_argument("--backends")
    ap.add_argument("--cache-dir")
    ap.add_argument("--out", default="runs/sweeps")
    ap.add_argument("--tables", default=",".join(TABLES), help="subset of " + ",".join(TABLES))
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    out = Path(args.out)
    if args.manifest:
        ds = load_dataset(args.manifest, args.gallery, args.rankings)
        backends = build_backends(args.backends, args.mock, args.cache_dir)
    else:
        fx = build_fixture(tempfile.mkdtemp(prefix="clozerank-fx-"), n_lift=20, n_harm=8, seed=args.seed)
        print(f"synthetic fixture: {len(fx.queries)} queries in {fx.root}")
        ds = load_dataset(fx.manifest, fx.gallery, fx.rankings)
        backends = build_backends(mock_path=fx.script, cache_dir=args.cache_dir)

    base = baseline_report(ds)
    print("initial ranking: " + "  ".join(f"{k} {v:.2f}" for k, v in base.summary().items()))
    for name in args.tables.split(","):
        t0 = time.perf_counter()
        rows = sweep(ds, backends, TABLES[name], RunConfig())
        emit_sweep(rows, out / name, csv_too=True)
        print(f"\n== {name} ({time.perf_counter() - t0:.2f}s) ==")
        print(format_sweep(rows))
    print("\nbackend stats: " + json.dumps(backends.stats(), sort_keys=True))


if __name__ == "__main__":
    main()
