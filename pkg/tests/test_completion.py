import io
import random
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from clozerank.backends import ImagePart, Role, scripted_backend
from clozerank.cloze import apply_masks
from clozerank.completion import (
    MAX_FILL_WORDS,
    build_completion_prompt,
    complete_candidate,
    complete_candidates,
    load_image,
    parse_completion_response,
)
from clozerank.core import UNKNOWN, GalleryItem, MaskedQuery, Slot, SlotKind
from clozerank.errors import BackendError, ImageLoadError, InvalidInputError

TEXT = "A man in a red coat is swinging on a gray rope."
MASKED = apply_masks(TEXT, ["swinging"], ["red", "gray"])


def png_bytes(color=(10, 20, 30)):
    buf = io.BytesIO()
    Image.new("RGB", (4, 4), color).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def images(tmp_path):
    for k in range(4):
        (tmp_path / f"g{k}.png").write_bytes(png_bytes((k * 40, 0, 0)))
    (tmp_path / "bad.png").write_bytes(b"not an image")
    return tmp_path


def items(n):
    return [GalleryItem(f"g{k}", f"g{k}.png") for k in range(n)]


def test_prompt_has_manifest_image_and_masked_text():
    p = build_completion_prompt(MASKED, ImagePart("image/png", png_bytes()))
    assert p.slot_manifest == ((0, SlotKind.COLOR), (1, SlotKind.VERB), (2, SlotKind.COLOR))
    assert sum(m.image is not None for m in p.messages) == 1
    text = p.messages[0].text
    assert MASKED.masked_text in text
    assert "UNKNOWN" in text
    for i in range(3):
        assert f"SLOT {i}:" in text


def test_prompt_rejects_zero_slots():
    empty = apply_masks("A man stands.", [], [])
    with pytest.raises(InvalidInputError):
        build_completion_prompt(empty, ImagePart("image/png", png_bytes()))


def test_unreadable_image_fails_before_network(images):
    calls = []

    class Spy:
        def chat(self, request):
            calls.append(request)
            return "SLOT 0: red"

    with pytest.raises(ImageLoadError):
        complete_candidate(MASKED, GalleryItem("x", "bad.png"), Spy(), "q", base_dir=images)
    with pytest.raises(ImageLoadError):
        complete_candidate(MASKED, GalleryItem("x", "missing.png"), Spy(), "q", base_dir=images)
    with pytest.raises(ImageLoadError):
        build_completion_prompt(MASKED, ImagePart("image/png", b"garbage"))
    assert calls == []


def test_load_image_file_url(images):
    part = load_image((images / "g0.png").as_uri())
    assert part.media_type == "image/png"
    assert part.data == (images / "g0.png").read_bytes()


@st.composite
def masked_queries(draw):
    words = draw(st.lists(st.sampled_from(["red", "blue", "runs", "jumps", "man", "the", "hat"]), min_size=1, max_size=10))
    text = " ".join(words)
    verbs = [w for w in words if w in ("runs", "jumps")]
    colors = [w for w in words if w in ("red", "blue")]
    return apply_masks(text, verbs, colors)


@given(masked_queries())
def test_manifest_order_follows_slots(masked):
    if masked.is_empty:
        return
    p = build_completion_prompt(masked, ImagePart("image/png", png_bytes()))
    assert p.slot_manifest == tuple((s.index, s.kind) for s in masked.slots)


def test_parse_examples():
    c = parse_completion_response(MASKED, "SLOT 0: swinging\nSLOT 1: UNKNOWN\nSLOT 2: gray")
    assert c.fills == ("swinging", UNKNOWN, "gray")
    assert c.warnings == ()

    c = parse_completion_response(MASKED, "SLOT 0: x\nSLOT 2: z")
    assert c.fills == ("x", UNKNOWN, "z")
    assert any("missing" in w for w in c.warnings)

    c = parse_completion_response(MASKED, "SLOT 0: first\nSLOT 0: second\nSLOT 1: a\nSLOT 2: b")
    assert c.fills == ("first", "a", "b")
    assert any("duplicate" in w for w in c.warnings)


def test_parse_tolerates_decoration():
    c = parse_completion_response(MASKED, "Sure!\n**SLOT 0:** \"blue\".\n- SLOT 1: unknown\nslot 2: dark gray\nSLOT 7: extra")
    assert c.fills == ("blue", UNKNOWN, "dark gray")
    assert any("out of range" in w for w in c.warnings)


def test_parse_caps_fill_length():
    c = parse_completion_response(MASKED, "SLOT 0: " + " ".join(["w"] * 10) + "\nSLOT 1: a\nSLOT 2: b")
    assert len(c.fills[0].split()) == MAX_FILL_WORDS
    assert any("truncated" in w for w in c.warnings)


def test_parse_preserves_raw_response():
    raw = "SLOT 0: a\nSLOT 1: b\nSLOT 2: c\n"
    assert parse_completion_response(MASKED, raw, "q", "g").raw_response == raw


def fuzz_response(rng, n_slots):
    lines = []
    for _ in range(rng.randint(0, 8)):
        kind = rng.random()
        idx = rng.randint(-1, n_slots + 2)
        if kind < 0.4:
            lines.append(f"SLOT {idx}: {rng.choice(['red', 'UNKNOWN', '', '  ', 'a b c d e f g h', '<VERB>'])}")
        elif kind < 0.6:
            lines.append(f"slot{idx}:{rng.choice(['x', ':', 'SLOT 1: y'])}")
        elif kind < 0.8:
            lines.append("".join(rng.choice("SLOT :\n0123abc*-") for _ in range(rng.randint(0, 20))))
        else:
            lines.append(rng.choice(["", "RANKING: a > b", "I cannot see the image.", "SLOT", "SLOT x: y"]))
    return "\n".join(lines)


def test_fuzzed_responses_always_align():
    rng = random.Random(1)
    for _ in range(2000):
        n = rng.randint(1, 5)
        text = " ".join(f"w{k}" for k in range(n))
        masked = apply_masks(text, [f"w{k}" for k in range(n)], [])
        c = parse_completion_response(masked, fuzz_response(rng, n))
        assert len(c.fills) == n
        assert all(f and len(f.split()) <= MAX_FILL_WORDS for f in c.fills)


@settings(max_examples=300)
@given(st.text(max_size=200), st.integers(1, 6))
def test_arbitrary_text_always_aligns(response, n):
    masked = apply_masks(" ".join(f"w{k}" for k in range(n)), [f"w{k}" for k in range(n)], [])
    assert len(parse_completion_response(masked, response).fills) == n


def test_scripted_fills_verbatim(images):
    b = scripted_backend({("COMPLETER", "q", "g0"): "SLOT 0: blue\nSLOT 1: swinging\nSLOT 2: gray"})
    c = complete_candidate(MASKED, GalleryItem("g0", "g0.png"), b, "q", base_dir=images)
    assert c.fills == ("blue", "swinging", "gray")
    assert (c.query_id, c.item_id) == ("q", "g0")
    assert b.lookups == 1


def test_repair_retry_then_padding(images):
    b = scripted_backend({("COMPLETER", "q", "g0"): "I see a person."})
    c = complete_candidate(MASKED, GalleryItem("g0", "g0.png"), b, "q", base_dir=images)
    assert c.fills == (UNKNOWN,) * 3
    assert any("retry" in w for w in c.warnings)
    assert any("missing" in w for w in c.warnings)
    assert b.lookups == 2


def test_repair_retry_accepts_better_answer(images):
    seen = []

    class TwoStep:
        def chat(self, request):
            seen.append(request)
            return "SLOT 0: red" if len(seen) == 1 else "SLOT 0: red\nSLOT 1: swinging\nSLOT 2: gray"

    c = complete_candidate(MASKED, GalleryItem("g0", "g0.png"), TwoStep(), "q", base_dir=images)
    assert c.fills == ("red", "swinging", "gray")
    assert len(seen) == 2
    assert [m.role for m in seen[1].messages] == ["user", "assistant", "user"]
    assert seen[1].target is Role.COMPLETER


def test_n3_in_order_and_call_bound(images):
    script = {("COMPLETER", "q", f"g{k}"): f"SLOT 0: c{k}\nSLOT 1: v{k}\nSLOT 2: d{k}" for k in range(3)}
    script[("COMPLETER", "q", "g1")] = "nothing useful"
    b = scripted_backend(script)
    outs = complete_candidates(MASKED, items(3), b, "q", base_dir=images, parallelism=3)
    assert [o.completion.item_id for o in outs] == ["g0", "g1", "g2"]
    assert all(o.completion.query_id == "q" for o in outs)
    assert outs[1].completion.fills == (UNKNOWN,) * 3
    assert 3 <= b.lookups <= 6


def test_order_independent_of_arrival(images):
    class Slow:
        def chat(self, request):
            # later candidates answer first
            k = int(request.tag.item_id[1:])
            time.sleep(0.02 * (4 - k))
            return f"SLOT 0: c{k}\nSLOT 1: v{k}\nSLOT 2: d{k}"

    outs = complete_candidates(MASKED, items(4), Slow(), "q", base_dir=images, parallelism=4)
    assert [o.completion.fills[0] for o in outs] == ["c0", "c1", "c2", "c3"]


def test_hard_failure_substitutes_all_unknown(images):
    class Flaky:
        def chat(self, request):
            if request.tag.item_id == "g1":
                raise BackendError("boom", status=500, retryable=True, attempts=3)
            return "SLOT 0: a\nSLOT 1: b\nSLOT 2: c"

    outs = complete_candidates(MASKED, items(3) + [GalleryItem("g9", "bad.png")], Flaky(), "q", base_dir=images)
    assert len(outs) == 4
    assert outs[1].completion.fills == (UNKNOWN,) * 3 and "boom" in outs[1].error
    assert outs[3].completion.fills == (UNKNOWN,) * 3 and "ImageLoadError" in outs[3].error
    assert outs[0].error is None and outs[0].completion.fills == ("a", "b", "c")


def test_repeat_runs_identical(images):
    script = {("COMPLETER", "q", f"g{k}"): f"SLOT 0: c{k}\nSLOT 2: d{k}" for k in range(3)}
    a = complete_candidates(MASKED, items(3), scripted_backend(script), "q", base_dir=images, parallelism=2)
    b = complete_candidates(MASKED, items(3), scripted_backend(script), "q", base_dir=images, parallelism=2)
    assert a == b


def test_parallelism_bound(images):
    lock = threading.Lock()
    state = {"now": 0, "max": 0}

    class Counting:
        def chat(self, request):
            with lock:
                state["now"] += 1
                state["max"] = max(state["max"], state["now"])
            time.sleep(0.02)
            with lock:
                state["now"] -= 1
            return "SLOT 0: a\nSLOT 1: b\nSLOT 2: c"

    many = [GalleryItem(f"x{k}", "g0.png") for k in range(8)]
    complete_candidates(MASKED, many, Counting(), "q", base_dir=images, parallelism=2)
    assert state["max"] <= 2


def test_masked_query_slots_sanity():
    # the fixture masked query used above
    assert MASKED == MaskedQuery(
        TEXT,
        "A man in a <COLOR> coat is <VERB> on a <COLOR> rope.",
        (
            Slot(0, SlotKind.COLOR, "red", (11, 14)),
            Slot(1, SlotKind.VERB, "swinging", (23, 31)),
            Slot(2, SlotKind.COLOR, "gray", (37, 41)),
        ),
    )
