import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from beat import numeric as nm
from beat.graph import PropagationConfig, slice_slots
from beat.vocab import (BehaviorVocabulary, codebook_stats, encode_entity, quantize_slot, recon_loss,
                        reset_dead_codes, straight_through, vq_loss)


def scan(p, code):
    d = [float(((p - c) ** 2).sum()) for c in code]
    return int(np.argmin(d))  # first minimum


def test_quantize_slot_examples():
    k, c = quantize_slot(np.array([0.2, 0.1]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert k == 0 and c.tolist() == [0.0, 0.0]
    code = np.random.default_rng(0).standard_normal((6, 3))
    k, c = quantize_slot(code[3].copy(), code)
    assert k == 3 and c.tobytes() == code[3].tobytes()
    with pytest.raises(ValueError, match="empty"):
        quantize_slot(np.zeros(2), np.zeros((0, 2)))


def test_quantize_slot_scan_oracle_1000_cases():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        k, m = int(rng.integers(2, 20)), int(rng.integers(1, 6))
        code = rng.standard_normal((k, m))
        p = rng.standard_normal(m)
        assert quantize_slot(p, code)[0] == scan(p, code)


def make_vocab(rng, d=3, m=3, n=2, k=4):
    store = nm.ParameterStore()
    vocab = BehaviorVocabulary.create(store, "user", rng, d, m, k, k, n)
    return store, vocab


def test_encode_entity_selects_matching_codeword(rng):
    store, vocab = make_vocab(rng)
    for role in ("macro", "micro"):
        store.set(f"user.{role}.W", np.eye(3))
    code = store["user.macro.codebook"].data
    micro = store["user.micro.codebook"].data
    row = np.concatenate([code[2], micro[1], micro[3]])
    enc = encode_entity(slice_slots(nm.Tensor(row), PropagationConfig(1, 3, 2)), vocab)
    assert enc.indices.tolist() == [2, 1, 3]
    assert np.array_equal(enc.q.data, row)


def test_encode_width_and_determinism(rng):
    store = nm.ParameterStore()
    vocab = BehaviorVocabulary.create(store, "item", rng, 4, 4, 8, 8, 5)
    cfg = PropagationConfig(1, 4, 5)
    rows = np.tile(rng.standard_normal(cfg.width), (2, 1))
    enc = encode_entity(slice_slots(nm.Tensor(rows), cfg), vocab)
    assert enc.q.shape == (2, 24) and enc.indices.shape == (2, 6)
    assert np.array_equal(enc.indices[0], enc.indices[1])


def test_encoding_indices_are_exact_argmins(rng):
    store, vocab = make_vocab(rng, k=7)
    cfg = PropagationConfig(1, 3, 2)
    rows = rng.standard_normal((20, cfg.width))
    enc = encode_entity(slice_slots(nm.Tensor(rows), cfg), vocab)
    for j, role in enumerate(["macro", "micro", "micro"]):
        code = vocab.codebook(role).data
        for r in range(20):
            assert enc.indices[r, j] == scan(enc.projected[j].data[r], code)
        assert np.array_equal(enc.codewords[j].data, code[enc.indices[:, j]])


def vec(*x):
    return nm.Tensor(np.array(x, dtype=float))


def test_recon_loss_examples():
    assert recon_loss(vec(1, 0, 0), vec(1, 0, 0), 1).item() == 0.0
    assert recon_loss(vec(0.5, 0), vec(1, 0), 0).item() == 0.5
    assert abs(recon_loss(vec(-0.3, 0), vec(1, 0), 1).item() - 1.3) < 1e-15
    batch = recon_loss(nm.Tensor([[1.0, 0], [0.5, 0]]), nm.Tensor([[1.0, 0], [1.0, 0]]), [1, 0])
    assert batch.item() == 0.25


def test_vq_loss_examples():
    assert vq_loss(vec(0.3, -2), vec(0.3, -2)).item() == 0.0
    assert vq_loss(vec(1, 0), vec(0, 0), 0.5).item() == 1.5
    with pytest.raises(ValueError):
        vq_loss(vec(1), vec(0), 0.0)


def test_vq_terms_route_gradients_separately():
    p = nm.Tensor([1.0, 2.0], requires_grad=True)
    c = nm.Tensor([0.0, 1.0], requires_grad=True)
    gp, gc = nm.grad(vq_loss(p, c, 0.5), [p, c])
    # codebook term moves only c; commitment term (weight eta) moves only p
    assert np.allclose(gc, -2 * (p.data - c.data)) and np.allclose(gp, 0.5 * 2 * (p.data - c.data))


GRID = st.integers(-24, 24).map(lambda x: x / 8)  # avoids squares underflowing to zero


@given(arrays(np.float64, 4, elements=GRID), arrays(np.float64, 4, elements=GRID))
def test_vq_nonnegative_zero_iff_equal(p, c):
    v = vq_loss(nm.Tensor(p), nm.Tensor(c)).item()
    assert v >= 0 and ((v == 0) == np.array_equal(p, c))


def test_straight_through_value_and_identity_gradient(rng):
    p = nm.Tensor(rng.standard_normal(3), requires_grad=True)
    c = nm.Tensor(rng.standard_normal(3))
    out = straight_through(p, c)
    assert np.allclose(out.data, c.data, atol=1e-15)
    (g,) = nm.grad(nm.sum_sq(out), [p])
    assert np.allclose(g, 2 * c.data, atol=1e-14)
    same = straight_through(p, nm.Tensor(p.data.copy()))
    assert np.array_equal(same.data, p.data)


def test_straight_through_finite_difference_contract(rng):
    store = nm.ParameterStore()
    p = store.add("p", rng.standard_normal((3, 2)))
    code = nm.Tensor(rng.standard_normal((5, 2)))
    from beat.vocab import quantize

    def fn():
        _, c = quantize(p, code)
        return nm.sum(nm.tanh(straight_through(p, c)))
    report = nm.finite_diff_check(fn, store)
    assert report.passed, report.summary()


@given(st.floats(0.0, 2 * np.pi), arrays(np.float64, 2, elements=st.floats(-2, 2)),
       arrays(np.float64, 2, elements=st.floats(-2, 2)), st.sampled_from([0, 1]))
def test_recon_rotation_invariance(theta, a, b, label):
    r = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    x = recon_loss(nm.Tensor(a), nm.Tensor(b), label).item()
    y = recon_loss(nm.Tensor(r @ a), nm.Tensor(r @ b), label).item()
    assert abs(x - y) < 1e-12


def test_codebook_stats_examples(rng):
    s = codebook_stats([2] * 10, 4)
    assert s.utilization == 0.25 and s.perplexity == 1.0
    s = codebook_stats([0, 1, 2, 3] * 5, 4)
    assert abs(s.perplexity - 4.0) < 1e-12 and s.utilization == 1.0
    a = rng.integers(0, 512, 1000)
    s = codebook_stats(a, 512)
    hist = np.zeros(512, dtype=int)
    for x in a:
        hist[x] += 1
    p = hist[hist > 0] / 1000
    assert np.array_equal(s.histogram, hist)
    assert abs(s.utilization - (hist > 0).mean()) < 1e-15
    assert abs(s.perplexity - np.exp(-(p * np.log(p)).sum())) < 1e-9


def test_reset_dead_codes_examples():
    code = np.arange(8.0).reshape(4, 2)
    proj = np.array([[10.0, 10.0], [20.0, 20.0]])
    new, reset = reset_dead_codes(code, np.array([1, 2, 3, 1]), proj, np.random.default_rng(0))
    assert reset.size == 0 and np.array_equal(new, code)
    new, reset = reset_dead_codes(code, np.array([0, 4, 0, 1]), proj, np.random.default_rng(0))
    assert reset.tolist() == [0, 2]
    for k in reset:
        assert np.min(np.abs(proj - new[k]).max(axis=1)) < 1e-2
    again, _ = reset_dead_codes(code, np.array([0, 4, 0, 1]), proj, np.random.default_rng(0))
    assert np.array_equal(new, again)
