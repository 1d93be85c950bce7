import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beat import align as al
from beat import numeric as nm
from beat import textembed as te
from beat.train import Adam


def test_project_tokens_counts_and_zero_weights(rng):
    proj = al.Projector.create(rng, 4, 6)
    u, i = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    tokens = al.project_tokens(u, i, proj)
    assert tokens.shape == (12, 6)
    same = al.project_tokens(np.tile(u[0], (6, 1)), i, proj)
    assert np.all(same.data[:6] == same.data[0])
    for k in ("W1", "b1", "W2", "b2"):
        proj.store.set(f"projector.{k}", np.zeros_like(proj[k].data))
    assert not al.project_tokens(u, i, proj).data.any()
    with pytest.raises(nm.ShapeError):
        al.project_tokens(u[:, :3], i[:, :3], proj)
    assert al.Projector.create(rng, 4, 6)["W1"].shape == (4, 12)


def test_nearest_behavior_token_examples(rng):
    assert al.nearest_behavior_token([0.9, 0.1], [[1.0, 0.0], [0.0, 1.0]]) == 0
    t = rng.standard_normal((5, 3))
    assert al.nearest_behavior_token(t[3], t) == 3
    assert al.nearest_behavior_token([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]) == 0
    with pytest.raises(ValueError):
        al.nearest_behavior_token([1.0], np.zeros((0, 1)))


def test_nearest_matches_exhaustive_scan_500_cases():
    rng = np.random.default_rng(11)
    for _ in range(500):
        n, d = int(rng.integers(1, 13)), int(rng.integers(1, 6))
        t, w = rng.standard_normal((n, d)), rng.standard_normal(d)
        best = min(range(n), key=lambda k: (float(((w - t[k]) ** 2).sum()), k))
        assert al.nearest_behavior_token(w, t) == best


def test_sample_word_pairs():
    assert al.sample_word_pairs(3, 64, np.random.default_rng(0)).tolist() == [[0, 1], [0, 2], [1, 2]]
    a = al.sample_word_pairs(30, 64, np.random.default_rng(4))
    b = al.sample_word_pairs(30, 64, np.random.default_rng(4))
    assert np.array_equal(a, b) and a.shape == (64, 2)
    assert len({tuple(p) for p in a.tolist()}) == 64 and np.all(a[:, 0] < a[:, 1])
    assert al.sample_word_pairs(1, 64, np.random.default_rng(0)).shape == (0, 2)


def ctx(tokens, words, pairs):
    return al.AlignmentContext(nm.Tensor(np.asarray(tokens, float)), np.asarray(words, float),
                               np.asarray(pairs, dtype=np.int64).reshape(-1, 2))


def test_sar_examples(rng):
    w = rng.standard_normal((4, 3))
    assert al.sar_loss(ctx(w, w, al.sample_word_pairs(4, 64, rng))).item() < 1e-24
    assert abs(al.sar_loss(ctx([[1.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [[0, 1]])).item() - 1.0) < 1e-12
    assert al.sar_loss(ctx(w, w[:1], np.zeros((0, 2)))).item() == 0.0


def test_sar_oracle(rng):
    t, w = rng.standard_normal((6, 4)), rng.standard_normal((7, 4))
    p = al.sample_word_pairs(7, 10, rng)
    assign = [int(np.argmin(((t - x) ** 2).sum(axis=1))) for x in w]
    c = t[assign]
    cos = lambda a, b: a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    expect = sum((cos(c[i], c[j]) - cos(w[i], w[j])) ** 2 for i, j in p)
    assert abs(al.sar_loss(ctx(t, w, p)).item() - expect) < 1e-12


def test_sar_zero_norm_counted():
    diag = type("D", (), {"zero_norm": 0})()
    v = al.sar_loss(ctx([[0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]], [[0, 1]]), diag)
    assert diag.zero_norm >= 1 and v.item() == 0.0


@given(st.integers(0, 2000), st.floats(0.1, 10.0))
def test_sar_rescale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    t, w = rng.standard_normal((6, 4)), rng.standard_normal((5, 4))
    p = al.sample_word_pairs(5, 64, rng)
    base = ctx(t, w, p)
    fixed = base.assignments()
    scaled = ctx(t, scale * w, p)
    scaled.assignments = lambda: fixed
    assert abs(al.sar_loss(scaled).item() - al.sar_loss(base).item()) < 1e-10
    joint = ctx(scale * t, scale * w, p)
    assert np.array_equal(joint.assignments(), fixed)


WORDS = ["great", "book", "history", "lovely", "quite"]


def backbone(uniform=False, seed=0, dim=8):
    return al.StandInBackbone.create(WORDS + al.template_words(al.DEFAULT_TEMPLATE), te.MockProvider(dim),
                                     seed, uniform=uniform)


def test_nll_uniform_is_ln_v(rng):
    small = al.StandInBackbone.create(["a", "b", "c", "d"], te.MockProvider(4), 0, uniform=True)
    prefix = nm.Tensor(rng.standard_normal((3, 4)))
    assert abs(al.nll_loss(small, prefix, [2]).item() - math.log(4)) < 1e-12
    bb = backbone(uniform=True)
    for target in ([0], [3, 1, 4]):
        v = al.nll_loss(bb, nm.Tensor(rng.standard_normal((2, 8))), target).item()
        assert abs(v - len(target) * math.log(bb.vocab_size)) < 1e-10


def test_nll_certain_targets_is_zero(rng):
    bb = al.StandInBackbone.create(["a", "b", "c", "d"], te.MockProvider(4), 0, uniform=True)
    bb.weights["bout"] = nm.Tensor(np.array([0.0, 0.0, 1000.0, 0.0]))
    assert al.nll_loss(bb, nm.Tensor(rng.standard_normal((2, 4))), [2, 2, 2]).item() == 0.0


def oracle_log_probs(bb, x):
    w = {k: v.data for k, v in bb.weights.items()}
    q, k, v = x @ w["Wq"], x @ w["Wk"], x @ w["Wv"]
    s = q @ k.T / math.sqrt(x.shape[1])
    s[np.triu_indices(len(x), 1)] = -np.inf
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    logits = (x + a @ v @ w["Wo"]) @ w["Wout"] + w["bout"]
    return logits - np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) \
        - logits.max(axis=1, keepdims=True)


def test_nll_matches_softmax_cross_entropy_oracle(rng):
    bb = backbone(seed=3)
    prefix = rng.standard_normal((4, 8))
    target = np.array([1, 5, 0, 2])
    x = np.concatenate([prefix, bb.embeddings.data[target[:-1]]])
    lp = oracle_log_probs(bb, x)
    expect = -sum(lp[3 + c, t] for c, t in enumerate(target))
    assert abs(al.nll_loss(bb, nm.Tensor(prefix), target).item() - expect) < 1e-10
    probs = bb.probs(nm.Tensor(x))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_nll_errors(rng):
    bb = backbone()
    with pytest.raises(ValueError, match="outside"):
        al.nll_loss(bb, nm.Tensor(rng.standard_normal((2, 8))), [bb.vocab_size])
    with pytest.raises(ValueError, match="empty"):
        al.nll_loss(bb, nm.Tensor(rng.standard_normal((2, 8))), [])


def examples(bb, rng, n=3, m=4):
    text = "great history book quite lovely book"
    return [al.make_example(rng.standard_normal((3, m)), rng.standard_normal((3, m)), text, bb, 64, rng)
            for _ in range(n)]


def test_stage2_gamma_zero_and_frozen_backbone(rng):
    bb = backbone()
    proj = al.Projector.create(rng, 4, 8)
    batch = examples(bb, rng)
    total, nll, _, _ = al.stage2_objective(batch, proj, bb, 0.0)
    assert total.item() == nll.item()
    before = bb.checksum()
    raw = {k: v.data.copy() for k, v in bb.weights.items()}
    opt = Adam(1e-2)
    first = al.stage2_step(batch, proj, bb, 1.0, opt)
    for _ in range(99):
        last = al.stage2_step(batch, proj, bb, 1.0, opt)
    assert bb.checksum() == before
    assert all(np.array_equal(raw[k], bb.weights[k].data) for k in raw)
    assert last.total < first.total
    assert set(opt.m) == set(proj.store.names())


def test_stage2_finite_difference(rng):
    bb = backbone()
    proj = al.Projector.create(rng, 4, 8)
    batch = examples(bb, rng, n=2)
    report = nm.finite_diff_check(lambda: al.stage2_objective(batch, proj, bb, 1.0)[0], proj.store)
    assert report.passed, report.summary()


def test_prefix_template_checks(rng):
    bb = backbone()
    tokens = nm.Tensor(rng.standard_normal((12, 8)))
    prefix = al.build_prefix(bb, al.DEFAULT_TEMPLATE, tokens, 6)
    assert prefix.shape[0] == 12 + len(al.template_words(al.DEFAULT_TEMPLATE))
    with pytest.raises(ValueError, match="two"):
        al.build_prefix(bb, "user <Tokens> item", tokens, 6)


def sides(rng, n_micro=5, m=3):
    k = n_micro + 1
    return [al.SideEncoding("user", ["u0", "u1"], rng.integers(0, 9, (2, k)), rng.standard_normal((2, k, m))),
            al.SideEncoding("item", ["x"], rng.integers(0, 9, (1, k)), rng.standard_normal((1, k, m)))]


def test_export_tokens_layout_and_byte_identity(tmp_path, rng):
    s = sides(rng)
    proj = al.Projector.create(rng, 3, 8)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    info = al.export_tokens(s, proj, a, [("user", "u1"), ("item", "nope"), ("item", "x")])
    al.export_tokens(s, proj, b, [("user", "u1"), ("item", "nope"), ("item", "x")])
    assert a.read_bytes() == b.read_bytes()
    head, recs, rejects = al.read_tokens(a)
    assert head == {"format": "beat-tokens", "version": 1, "micro_count": 5, "codeword_dim": 3, "projected_dim": 8}
    assert [r["entity"] for r in recs] == ["u1", "x"] and all(len(r["indices"]) == 6 for r in recs)
    assert np.array_equal(np.array(recs[0]["codewords"]), s[0].codewords[1])
    assert np.allclose(np.array(recs[1]["projected"]), proj(s[1].codewords[0]).data)
    assert rejects == [{"entity": "nope", "kind": "item"}] and info["written"] == 2
    assert (tmp_path / "a.jsonl.prompt.txt").read_text().count(al.PLACEHOLDER) == 2
