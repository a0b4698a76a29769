"""Scripted fixtures for offline runs, tests and sweeps.

Each synthetic query comes with a full initial ranking, one tiny PNG per
candidate, and a mock script answering every model call:

* ``lift`` queries put the ground truth at position 2 or 3 of the head, a
  little below the top score; only the truth's completion reproduces the
  masked words, so a correct comparator can lift it to rank 1.
* ``harm`` queries put the truth first, but its completion is wrong and the
  runner-up's is right, so a large ``alpha2`` demotes the truth.

The comparator answers are produced by exact word matching, which stands in
for a model that judges meaning.  Per-query metadata (scores, margins, fills)
is saved next to the files so tests can recompute expected metrics without
the package's scoring code.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from PIL import Image

from .backends import Role, Script, ScriptRecord

VERBS = [
    "falling", "tripping", "stumbling", "slipping", "lying", "running", "jumping", "kicking",
    "crawling", "climbing", "waving", "swinging", "pushing", "fighting", "dancing", "kneeling",
    "crouching", "sprinting", "skating", "collapsing",
]
COLORS = ["red", "blue", "green", "yellow", "black", "white", "gray", "orange", "purple", "brown", "pink"]
GARMENTS = ["coat", "jacket", "shirt", "hoodie", "dress", "sweater", "vest"]
PLACES = ["ladder", "bench", "crosswalk", "staircase", "fountain", "sidewalk", "doorway"]

# alpha2 values (at beta=0.5) where a lift/harm query flips; kept off the usual grid points
LIFT_MARGINS = (0.018, 0.022, 0.03, 0.035, 0.038, 0.045, 0.055, 0.062, 0.068)
HARM_MARGINS = (0.085, 0.12, 0.17, 0.22, 0.27)


@dataclass
class SyntheticQuery:
    query_id: str
    kind: str
    text: str
    verbs: list[str]
    colors: list[str]
    truth: str
    ranking: list[tuple[str, float]]
    fills: dict[str, list[str]]
    flip_alpha2: float


@dataclass
class Fixture:
    root: Path
    queries: list[SyntheticQuery] = field(default_factory=list)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.jsonl"

    @property
    def gallery(self) -> Path:
        return self.root / "gallery.jsonl"

    @property
    def rankings(self) -> Path:
        return self.root / "rankings.jsonl"

    @property
    def script(self) -> Path:
        return self.root / "script.jsonl"

    @property
    def meta(self) -> Path:
        return self.root / "fixture.json"

    @classmethod
    def load(cls, root: str | Path) -> "Fixture":
        root = Path(root)
        data = json.loads((root / "fixture.json").read_text(encoding="utf-8"))
        qs = []
        for q in data["queries"]:
            q["ranking"] = [tuple(e) for e in q["ranking"]]
            qs.append(SyntheticQuery(**q))
        return cls(root, qs)


def _tokens(q: SyntheticQuery) -> list[str]:
    # reading order of the slots for the two sentence shapes used below
    if len(q.verbs) == 1:
        return [q.colors[0], q.verbs[0]]
    return [q.colors[0], q.verbs[0], q.verbs[1], q.colors[1]]


def _wrong(tokens: list[str], rng: random.Random, unknown_rate: float = 0.3) -> list[str]:
    out = []
    for t in tokens:
        pool = VERBS if t in VERBS else COLORS
        out.append("UNKNOWN" if rng.random() < unknown_rate else rng.choice([w for w in pool if w != t]))
    return out


def _write_png(path: Path, seed: str):
    r = random.Random(seed)
    img = Image.new("RGB", (8, 8), (r.randrange(256), r.randrange(256), r.randrange(256)))
    img.putpixel((r.randrange(8), r.randrange(8)), (r.randrange(256), r.randrange(256), r.randrange(256)))
    img.save(path, format="PNG")


def comparator_answer(ids: list[str], fills: dict[str, list[str]], tokens: list[str]) -> str:
    """Exact-match judge: more matching blanks ranks higher, equal counts tie."""
    score = {i: sum(f == t for f, t in zip(fills[i], tokens)) for i in ids}
    levels = sorted(set(score.values()), reverse=True)
    groups = [[i for i in ids if score[i] == lv] for lv in levels]
    line = "RANKING: " + " > ".join(" = ".join(g) for g in groups)
    why = "; ".join(f"{i}: {score[i]}/{len(tokens)} blanks match" for i in ids)
    return f"{line}\n{why}"


def make_query(idx: int, kind: str, rng: random.Random, ranking_len: int, truth_pos: int, margin: float) -> SyntheticQuery:
    qid = f"q{idx:03d}"
    c1, c2 = rng.sample(COLORS, 2)
    v1, v2 = rng.sample(VERBS, 2)
    g, p = rng.choice(GARMENTS), rng.choice(PLACES)
    if rng.random() < 0.5:
        text, verbs, colors = f"A person in a {c1} {g} is {v1} near the {p}.", [v1], [c1]
    else:
        text, verbs, colors = f"A man in a {c1} {g} is {v1} while {v2} a {c2} bag.", [v1, v2], [c1, c2]
    ids = [f"{qid}_g{k}" for k in range(ranking_len)]
    # flip condition at beta=0.5: alpha2 * (1 - 0.5) > score gap
    gap = margin * 0.5
    top = round(rng.uniform(0.6, 0.9), 4)
    scores = [top]
    if kind == "lift":
        steps = [gap / truth_pos] * truth_pos
    else:
        steps = [gap]
    for s in steps:
        scores.append(scores[-1] - s)
    while len(scores) < ranking_len:
        scores.append(scores[-1] - rng.uniform(0.005, 0.02))
    truth = ids[truth_pos]
    q = SyntheticQuery(qid, kind, text, verbs, colors, truth, list(zip(ids, scores)), {}, margin)
    tokens = _tokens(q)
    for i in ids:
        q.fills[i] = _wrong(tokens, rng)
    if kind == "lift":
        q.fills[truth] = list(tokens)
    else:
        q.fills[ids[1]] = list(tokens)
    return q


def build_fixture(
    root: str | Path,
    n_lift: int = 20,
    n_harm: int = 0,
    ranking_len: int = 8,
    max_head: int = 5,
    seed: int = 0,
) -> Fixture:
    """Write a complete scripted fixture under ``root`` and return its metadata."""
    rng = random.Random(seed)
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    fx = Fixture(root)
    kinds = ["lift"] * n_lift + ["harm"] * n_harm
    for idx, kind in enumerate(kinds):
        if kind == "lift":
            pos = 1 + idx % 2
            # one-step lifts keep each gap <= 0.02
            choices = [m for m in LIFT_MARGINS if m * 0.5 <= 0.02 * pos]
            margin = choices[idx % len(choices)]
        else:
            pos, margin = 0, HARM_MARGINS[idx % len(HARM_MARGINS)]
        fx.queries.append(make_query(idx, kind, rng, ranking_len, pos, margin))

    records = []
    with open(fx.manifest, "w", encoding="utf-8") as man, open(fx.gallery, "w", encoding="utf-8") as gal, open(
        fx.rankings, "w", encoding="utf-8"
    ) as rk:
        for q in fx.queries:
            man.write(json.dumps({"query_id": q.query_id, "text": q.text, "ground_truth": q.truth}) + "\n")
            rk.write(
                json.dumps({"query_id": q.query_id, "ranking": [{"item_id": i, "score": s} for i, s in q.ranking]})
                + "\n"
            )
            for i, _ in q.ranking:
                _write_png(root / "images" / f"{i}.png", i)
                gal.write(json.dumps({"item_id": i, "image_path": f"images/{i}.png"}) + "\n")
            records.append(ScriptRecord(Role.MASKER, "\n".join(f"- {v}" for v in q.verbs), q.query_id, "VERB"))
            records.append(ScriptRecord(Role.MASKER, "\n".join(f"- {c}" for c in q.colors), q.query_id, "COLOR"))
            tokens = _tokens(q)
            ids = [i for i, _ in q.ranking]
            for i in ids[:max_head]:
                resp = "\n".join(f"SLOT {k}: {f}" for k, f in enumerate(q.fills[i]))
                records.append(ScriptRecord(Role.COMPLETER, resp, q.query_id, i))
            for k in range(2, min(max_head, len(ids)) + 1):
                head = ids[:k]
                records.append(ScriptRecord(Role.COMPARATOR, comparator_answer(head, q.fills, tokens), q.query_id, ",".join(head)))
    Script(records).dump(fx.script)
    fx.meta.write_text(
        json.dumps({"queries": [asdict(q) for q in fx.queries]}, indent=1, sort_keys=True), encoding="utf-8"
    )
    return fx
