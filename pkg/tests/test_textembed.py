import json

import numpy as np
import pytest

from beat import textembed as te


def write(path, head, recs):
    lines = [json.dumps(head)] + [r if isinstance(r, str) else json.dumps(r) for r in recs]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_fnv1a64_reference_values():
    assert te.fnv1a64("") == 0xCBF29CE484222325
    assert te.fnv1a64("a") == 0xAF63DC4C8601EC8C
    assert te.fnv1a64("foobar") == 0x85944171F73967E8


def test_mock_determinism_norm_and_distinct():
    p = te.MockProvider(16)
    a, b = p.embed_text("abc"), p.embed_text("abc")
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a) - 1.0) < 1e-12
    assert float(a @ p.embed_text("abd")) < 1.0
    expect = np.random.default_rng(te.fnv1a64("abc")).standard_normal(16)
    assert np.allclose(a, expect / np.linalg.norm(expect), atol=0, rtol=0)


def test_review_record_exactly_one_source():
    with pytest.raises(ValueError):
        te.ReviewRecord("u", "i")
    with pytest.raises(ValueError):
        te.ReviewRecord("u", "i", cls_embedding=np.zeros(2), text="x")


def test_embed_cls_modes():
    mock = te.MockProvider(4)
    r = te.ReviewRecord("u", "i", text="lovely")
    assert np.array_equal(te.embed_cls(r, mock), mock.embed_text("lovely"))
    stored = te.FileProvider(2, {("u", "i"): [1.0, 2.0]})
    assert te.embed_cls(r, stored).tolist() == [1.0, 2.0]
    with pytest.raises(KeyError, match="user='v'.*item='i'"):
        te.embed_cls(te.ReviewRecord("v", "i", text="x"), stored)
    with pytest.raises(ValueError):
        te.embed_cls(te.ReviewRecord("u", "i", cls_embedding=np.zeros(3)), mock)


def test_load_micro_intents_vectors_and_texts(tmp_path):
    head = {"format": "beat-embed", "version": 1, "dim": 2}
    f = write(tmp_path / "m.jsonl", head, [
        {"user": "a", "intents": [[1, 0], [0, 1], [1, 1]]},
        {"user": "b", "intents": [[2, 0], [0, 2], [2, 2]]},
    ])
    seqs = te.load_micro_intents(f, te.MockProvider(2))
    assert [s.owner for s in seqs] == ["a", "b"] and all(s.embeddings.shape == (3, 2) for s in seqs)

    head8 = dict(head, dim=8)
    g = write(tmp_path / "t.jsonl", head8, [
        {"user": "a", "intent_texts": ["spicy food", "quiet"]},
        {"user": "b", "intent_texts": ["quiet"]},
    ])
    a, b = te.load_micro_intents(g, te.MockProvider(8))
    assert a.embeddings[1].tobytes() == b.embeddings[0].tobytes()


@pytest.mark.parametrize("bad, line, msg", [
    ({"user": "a", "intents": []}, 3, "empty intent list"),
    ({"user": "a", "intents": [[1.0]]}, 3, "expected 2 finite"),
    ({"intents": [[1.0, 2.0]]}, 3, "string 'user'"),
    ("{not json", 3, ":3:"),
])
def test_malformed_intent_records_name_line(tmp_path, bad, line, msg):
    head = {"format": "beat-embed", "version": 1, "dim": 2}
    f = write(tmp_path / "m.jsonl", head, [{"user": "z", "intents": [[0, 0]]}, bad])
    with pytest.raises(te.FormatError, match=msg) as err:
        te.load_micro_intents(f, te.MockProvider(2))
    assert f":{line}:" in str(err.value)


def test_bad_header_rejected(tmp_path):
    f = write(tmp_path / "h.jsonl", {"format": "other", "version": 1, "dim": 2}, [])
    with pytest.raises(te.FormatError, match=":1:"):
        te.load_reviews(f)
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(te.FormatError, match="missing header"):
        te.load_reviews(tmp_path / "e.jsonl")


def test_load_reviews_width_enforced(tmp_path):
    head = {"format": "beat-embed", "version": 1, "dim": 3}
    ok = write(tmp_path / "r.jsonl", head, [{"user": "u", "item": "i", "cls": [1, 2, 3]},
                                            {"user": "u", "item": "j", "text": "fine"}])
    dim, recs = te.load_reviews(ok)
    assert dim == 3 and recs[0].cls_embedding.dtype == np.float64 and recs[1].text == "fine"
    bad = write(tmp_path / "b.jsonl", head, [{"user": "u", "item": "i", "cls": [1, 2]}])
    with pytest.raises(te.FormatError, match=":2:"):
        te.load_reviews(bad)


def test_embed_words_examples():
    p = te.MockProvider(8)
    out = te.embed_words("Great book", p)
    assert [w for w, _ in out] == ["great", "book"]
    twice = te.embed_words("Book, book!", p)
    assert twice[0][1].tobytes() == twice[1][1].tobytes()
    assert te.embed_words("", p) == []


def test_ingest_is_bit_identical(tmp_path):
    head = {"format": "beat-embed", "version": 1, "dim": 6}
    f = write(tmp_path / "m.jsonl", head, [{"user": "a", "intent_texts": ["x", "y z"]}])
    a = te.load_micro_intents(f, te.MockProvider(6))
    b = te.load_micro_intents(f, te.MockProvider(6))
    assert a[0].embeddings.tobytes() == b[0].embeddings.tobytes()


def test_mock_words_nearly_uncorrelated():
    dim = 32
    p = te.MockProvider(dim)
    rng = np.random.default_rng(7)
    cos = []
    for _ in range(1000):
        a, b = rng.integers(0, 10**9, 2)
        cos.append(abs(float(p.embed_text(f"w{a}") @ p.embed_text(f"w{b}x"))))
    assert np.mean(cos) < 3 / np.sqrt(dim)


def test_file_provider_words(tmp_path):
    head = {"format": "beat-embed", "version": 1, "dim": 2}
    f = write(tmp_path / "w.jsonl", head, [{"word": "good", "vec": [0.5, 0.5]}])
    p = te.FileProvider.from_words(f)
    assert p.embed_text("good").tolist() == [0.5, 0.5]
    with pytest.raises(KeyError):
        p.embed_text("bad")
    with pytest.raises(ValueError):
        te.FileProvider(3, {"x": [1.0]})
