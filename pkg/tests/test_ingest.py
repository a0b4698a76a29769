import json

import pytest

from clozerank.core import InitialRanking, QueryRecord
from clozerank.errors import DatasetError, InvalidInputError, RetrieverError
from clozerank.ingest import fetch_initial_scores, load_dataset, load_rankings, top_n


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def files(tmp_path):
    man = write_jsonl(
        tmp_path / "manifest.jsonl",
        [
            {"query_id": "q1", "text": "a man in red falling", "ground_truth": "b"},
            {"query_id": "q2", "text": "a woman running", "ground_truth_id": "a"},
            {"query_id": "q3", "text": "someone waving"},
        ],
    )
    gal = write_jsonl(tmp_path / "gallery.jsonl", [{"item_id": i, "image_path": f"{i}.png"} for i in "abc"])
    rk = write_jsonl(
        tmp_path / "rankings.jsonl",
        [
            {"query_id": q, "ranking": [{"item_id": "a", "score": 0.9}, {"item_id": "b", "score": 0.5}, {"item_id": "c", "score": 0.1}]}
            for q in ("q1", "q2", "q3")
        ],
    )
    return tmp_path, man, gal, rk


def test_load_ok(files):
    root, man, gal, rk = files
    ds = load_dataset(man, gal, rk)
    assert [q.query_id for q in ds.queries] == ["q1", "q2", "q3"]
    assert ds.query("q2").ground_truth_id == "a"
    assert ds.query("q3").ground_truth_id is None
    assert ds.rankings["q1"].item_ids == ["a", "b", "c"]
    assert ds.base_dir == root.resolve()


def test_dangling_item(files):
    root, man, gal, rk = files
    write_jsonl(rk, [{"query_id": "q1", "ranking": [{"item_id": "zz", "score": 1}]}])
    with pytest.raises(DatasetError) as ei:
        load_dataset(man, gal, rk)
    assert ei.value.ident == "zz"


def test_query_without_ranking(files):
    root, man, gal, rk = files
    write_jsonl(rk, [{"query_id": "q1", "ranking": [{"item_id": "a", "score": 1}, {"item_id": "b", "score": 0.5}]}])
    with pytest.raises(DatasetError, match="no initial ranking"):
        load_dataset(man, gal, rk)


def test_truth_missing_from_ranking(files):
    root, man, gal, rk = files
    rows = [{"query_id": q, "ranking": [{"item_id": "a", "score": 1}, {"item_id": "c", "score": 0.5}]} for q in ("q1", "q2", "q3")]
    write_jsonl(rk, rows)
    with pytest.raises(DatasetError, match="missing from its ranking"):
        load_dataset(man, gal, rk)


def test_truth_not_in_gallery(files):
    root, man, gal, rk = files
    write_jsonl(gal, [{"item_id": i, "image_path": f"{i}.png"} for i in "ac"])
    with pytest.raises(DatasetError):
        load_dataset(man, gal, rk)


def test_duplicates(files):
    root, man, gal, rk = files
    write_jsonl(man, [{"query_id": "q1", "text": "x"}, {"query_id": "q1", "text": "y"}])
    with pytest.raises(DatasetError) as ei:
        load_dataset(man, gal, rk)
    assert ei.value.line == 2
    write_jsonl(rk, [{"query_id": "q1", "ranking": [{"item_id": "a", "score": 1}, {"item_id": "a", "score": 0.5}]}])
    with pytest.raises(DatasetError):
        load_rankings(rk)


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"query_id": "q1", "ranking": [{"item_id": "a", "score": 1}]}\n\n{oops\n')
    with pytest.raises(DatasetError) as ei:
        load_rankings(p)
    assert ei.value.line == 3 and str(p) in str(ei.value)


def test_unsorted_is_sorted_with_warning(tmp_path):
    p = write_jsonl(tmp_path / "r.jsonl", [{"query_id": "q", "ranking": [{"item_id": "a", "score": 0.1}, {"item_id": "b", "score": 0.9}]}])
    warnings = []
    r = load_rankings(p, warnings=warnings)["q"]
    assert r.item_ids == ["b", "a"] and len(warnings) == 1


def test_strict_rejects_unsorted_ties(tmp_path):
    rows = [{"query_id": "q", "ranking": [{"item_id": "a", "score": 0.1}, {"item_id": "b", "score": 0.9}, {"item_id": "c", "score": 0.1}]}]
    p = write_jsonl(tmp_path / "r.jsonl", rows)
    with pytest.raises(DatasetError):
        load_rankings(p, strict=True)
    # lenient mode keeps tied items in file order
    assert load_rankings(p)["q"].item_ids == ["b", "a", "c"]


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_rankings(tmp_path / "nope.jsonl")


def test_top_n():
    r = InitialRanking("q", (("a", 3.0), ("b", 2.0), ("c", 1.0)))
    head, tail = top_n(r, 2)
    assert head.item_ids == ["a", "b"] and tail == (("c", 1.0),)
    head, tail = top_n(r, 10)
    assert len(head) == 3 and tail == ()
    with pytest.raises(InvalidInputError):
        top_n(r, 0)


Q = QueryRecord("q1", "a man falling")


def test_retriever_ok(stub_server):
    srv = stub_server(lambda p, b, h: (200, {"ranking": [{"item_id": "a", "score": 0.9}, {"item_id": "b", "score": 0.2}]}))
    r = fetch_initial_scores(Q, srv.url + "/search", top_k=5)
    assert r.item_ids == ["a", "b"]
    assert srv.requests[0]["body"] == {"query_id": "q1", "text": "a man falling", "top_k": 5}


@pytest.mark.parametrize(
    "reply",
    [
        {"ranking": [{"item_id": "a", "score": 0.9}, {"item_id": "a", "score": 0.2}]},
        {"ranking": []},
        {"results": []},
    ],
)
def test_retriever_bad_reply(stub_server, reply):
    srv = stub_server(lambda p, b, h: (200, reply))
    with pytest.raises(DatasetError):
        fetch_initial_scores(Q, srv.url)


def test_retriever_http_error(stub_server):
    srv = stub_server(lambda p, b, h: (500, {}))
    with pytest.raises(RetrieverError):
        fetch_initial_scores(Q, srv.url)


def test_load_dataset_with_fetched_rankings(files):
    root, man, gal, rk = files
    rankings = load_rankings(rk)
    ds = load_dataset(man, gal, rankings=rankings)
    assert set(ds.rankings) == {"q1", "q2", "q3"}
