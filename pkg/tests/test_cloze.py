import random

import pytest

from clozerank.backends import ChatRequest, Role, scripted_backend
from clozerank.cloze import apply_masks, build_mask_prompt, generate_masked_query, parse_mask_response
from clozerank.core import SlotKind
from clozerank.errors import InvalidInputError, MaskingError, PipelineError

TEXT = "A man in a red hoodie is tripping over a ladder and falling."


def test_apply_masks_example():
    m = apply_masks(TEXT, ["tripping", "falling"], ["red"])
    assert m.masked_text == "A man in a <COLOR> hoodie is <VERB> over a ladder and <VERB>."
    assert [(s.index, s.kind, s.original_token) for s in m.slots] == [
        (0, SlotKind.COLOR, "red"),
        (1, SlotKind.VERB, "tripping"),
        (2, SlotKind.VERB, "falling"),
    ]
    assert m.unmask() == TEXT


def test_apply_masks_missing_token():
    with pytest.raises(MaskingError) as ei:
        apply_masks(TEXT, ["jumping"], [])
    assert ei.value.token == "jumping"


def test_apply_masks_whole_word_only():
    # "red" inside "tired" must not be touched
    m = apply_masks("A tired man in red", [], ["red"])
    assert m.masked_text == "A tired man in <COLOR>"


def test_apply_masks_repeated_token_uses_next_occurrence():
    m = apply_masks("red hat and red shoes", [], ["red", "red"])
    assert m.masked_text == "<COLOR> hat and <COLOR> shoes"


def test_apply_masks_rejects_placeholder_input():
    with pytest.raises(InvalidInputError):
        apply_masks("a <VERB> man", [], [])


def test_apply_masks_nothing_to_mask():
    m = apply_masks("A man stands.", [], [])
    assert m.is_empty and m.masked_text == "A man stands."


def test_mask_prompt_contents():
    p = build_mask_prompt(TEXT, "VERB")
    assert p.kind is SlotKind.VERB and len(p.messages) == 1
    assert TEXT in p.messages[0].text
    assert p.messages[0].image is None
    assert build_mask_prompt(TEXT, SlotKind.COLOR).messages[0].text != p.messages[0].text
    with pytest.raises(InvalidInputError):
        build_mask_prompt("  ", "VERB")


def test_parse_mask_response():
    resp = "Here you go:\n- tripping\n-  \"falling\".\n- jumping\n- tripping\nnot a bullet"
    tokens, warnings = parse_mask_response(TEXT, resp, "VERB")
    assert tokens == ["tripping", "falling"]
    assert len(warnings) == 1 and "jumping" in warnings[0]


def test_parse_mask_response_none():
    assert parse_mask_response(TEXT, "- NONE", "COLOR") == ([], [])
    assert parse_mask_response(TEXT, "", "COLOR") == ([], [])


VERBS = ["running", "falling", "tripping", "jumping", "lying", "kicking", "pushing", "waving"]
COLORS = ["red", "blue", "dark green", "gray", "white", "black"]
FILLER = ["a", "man", "woman", "in", "the", "near", "with", "hat", "coat", "and", "street", "bag", "tired", "bored"]
PUNCT = ["", ",", ".", "!", ";"]


def random_case(rng):
    words, verbs, colors = [], [], []
    for _ in range(rng.randint(3, 14)):
        r = rng.random()
        if r < 0.2:
            v = rng.choice(VERBS)
            verbs.append(v)
            words.append(v + rng.choice(PUNCT))
        elif r < 0.35:
            c = rng.choice(COLORS)
            colors.append(c)
            words.append(c + rng.choice(PUNCT))
        else:
            words.append(rng.choice(FILLER) + rng.choice(PUNCT))
    return " ".join(words), verbs, colors


def test_round_trip_random_cases():
    rng = random.Random(0)
    for _ in range(1000):
        text, verbs, colors = random_case(rng)
        m = apply_masks(text, verbs, colors)
        assert m.masked_text.count("<VERB>") == len(verbs)
        assert m.masked_text.count("<COLOR>") == len(colors)
        assert len(m.slots) == len(verbs) + len(colors)
        assert m.unmask().encode() == text.encode()


def masker(verbs_resp, colors_resp, qid="q1"):
    return scripted_backend({("MASKER", qid, "VERB"): verbs_resp, ("MASKER", qid, "COLOR"): colors_resp})


def test_generate_masked_query():
    m = generate_masked_query(TEXT, masker("- tripping\n- falling", "- red"), "q1")
    assert m.masked_text == "A man in a <COLOR> hoodie is <VERB> over a ladder and <VERB>."
    assert m.warnings == ()


def test_generate_masks_every_occurrence():
    m = generate_masked_query("red cap, red coat", masker("- NONE", "- red"), "q1")
    assert m.masked_text == "<COLOR> cap, <COLOR> coat"


def test_generate_concurrent_matches_serial():
    b = masker("- tripping\n- falling", "- red")
    assert generate_masked_query(TEXT, b, "q1", concurrent=True) == generate_masked_query(TEXT, b, "q1")


def test_generate_zero_slots_warns():
    m = generate_masked_query("A person stands here.", masker("- NONE", "- NONE"), "q1")
    assert m.is_empty
    assert any("no maskable" in w for w in m.warnings)


def test_generate_malformed_response_drops_tokens():
    m = generate_masked_query(TEXT, masker("- flying\nrandom text", "- red"), "q1")
    assert m.masked_text == "A man in a <COLOR> hoodie is tripping over a ladder and falling."
    assert any("flying" in w for w in m.warnings)


def test_generate_backend_failure_becomes_pipeline_error():
    b = scripted_backend({("MASKER", "q1", "VERB"): "- falling"})  # no COLOR record
    with pytest.raises(PipelineError) as ei:
        generate_masked_query(TEXT, b, "q1")
    assert ei.value.query_id == "q1"


def test_generate_request_tags():
    seen = []

    class Spy:
        def chat(self, request: ChatRequest):
            seen.append((request.target, request.tag.query_id, request.tag.item_id))
            return "- NONE"

    generate_masked_query(TEXT, Spy(), "q9")
    assert seen == [(Role.MASKER, "q9", "VERB"), (Role.MASKER, "q9", "COLOR")]
