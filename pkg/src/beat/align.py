"""Stage 2: project behavior tokens into a frozen backbone's word space.

The backbone is a seeded single-layer causal attention decoder standing in for
a real language model. Its weights never receive updates; only the two-layer
projector is trained, against next-token NLL plus semantic alignment between
pairwise word similarities and the similarities of their nearest tokens.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from . import numeric as nm
from . import textembed as te

PLACEHOLDER = "<Tokens>"
DEFAULT_TEMPLATE = f"user {PLACEHOLDER} item {PLACEHOLDER} explain why the user enjoyed the item"
MAX_EXPLANATION_WORDS = 50
TOKEN_FORMAT = "beat-tokens"
HEAD_SCALE = 4.0  # output-head init std in units of 1/sqrt(D_w)


@dataclass
class Projector:
    store: nm.ParameterStore
    prefix: str = "projector"

    @classmethod
    def create(cls, rng, codeword_dim: int, word_dim: int, hidden: int | None = None,
               prefix: str = "projector") -> "Projector":
        h = hidden or 2 * word_dim
        store = nm.ParameterStore()
        store.add(f"{prefix}.W1", rng.normal(0.0, 1.0 / math.sqrt(codeword_dim), (codeword_dim, h)))
        store.add(f"{prefix}.b1", np.zeros(h))
        store.add(f"{prefix}.W2", rng.normal(0.0, 1.0 / math.sqrt(h), (h, word_dim)))
        store.add(f"{prefix}.b2", np.zeros(word_dim))
        return cls(store, prefix)

    def __getitem__(self, key: str) -> nm.Tensor:
        return self.store[f"{self.prefix}.{key}"]

    @property
    def in_dim(self) -> int:
        return self["W1"].shape[0]

    @property
    def out_dim(self) -> int:
        return self["W2"].shape[1]

    def __call__(self, codewords) -> nm.Tensor:
        x = nm.as_tensor(codewords)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise nm.ShapeError(f"projector: expected (n, {self.in_dim}) codewords, got {x.shape}")
        h = nm.tanh(nm.add_bias(nm.matmul(x, self["W1"]), self["b1"]))
        return nm.add_bias(nm.matmul(h, self["W2"]), self["b2"])


def project_tokens(user_codewords, item_codewords, projector: Projector) -> nm.Tensor:
    """The pair's 2(N+1) tokens: user macro, user micro 1..N, item macro, item micro 1..N."""
    u = np.asarray(getattr(user_codewords, "data", user_codewords), dtype=np.float64)
    i = np.asarray(getattr(item_codewords, "data", item_codewords), dtype=np.float64)
    if u.shape != i.shape or u.ndim != 2:
        raise nm.ShapeError(f"project_tokens: shape mismatch {u.shape} vs {i.shape}")
    return projector(np.concatenate([u, i], axis=0))


def nearest_behavior_token(word_emb, tokens) -> int:
    """Position of the token closest (L2) to ``word_emb``; lowest position wins ties."""
    t = np.asarray(getattr(tokens, "data", tokens), dtype=np.float64)
    if t.ndim != 2 or t.shape[0] == 0:
        raise ValueError("nearest_behavior_token: empty token set")
    w = np.asarray(word_emb, dtype=np.float64).reshape(1, -1)
    return int(kernels.nearest(w, t)[0][0])


def sample_word_pairs(n_words: int, max_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct position pairs ``(i, j)``, ``i < j``, sampled without replacement."""
    if n_words < 2:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = np.triu_indices(n_words, k=1)
    all_pairs = np.stack([i, j], axis=1).astype(np.int64)
    if all_pairs.shape[0] <= max_pairs:
        return all_pairs
    pick = np.sort(rng.choice(all_pairs.shape[0], size=max_pairs, replace=False))
    return all_pairs[pick]


@dataclass
class AlignmentContext:
    tokens: nm.Tensor  # (2(N+1), D_w) projected tokens of the pair (or candidate set)
    words: np.ndarray  # (n, D_w) word embeddings
    pairs: np.ndarray  # (k, 2)
    target_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def assignments(self) -> np.ndarray:
        if self.words.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return nm.discrete(lambda: kernels.nearest(self.words, self.tokens.data)[0])


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    return np.where(denom > 0, (a * b).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)


def sar_loss(ctx: AlignmentContext, diagnostics=None) -> nm.Tensor:
    """Sum over sampled pairs of the squared gap between token and word cosine similarity."""
    if ctx.pairs.shape[0] == 0:
        return nm.constant(0.0)
    assign = ctx.assignments()
    chosen = nm.take(ctx.tokens, assign)
    a, b = ctx.pairs[:, 0], ctx.pairs[:, 1]
    if diagnostics is not None:
        zero = (np.linalg.norm(chosen.data, axis=1) == 0).sum() + (np.linalg.norm(ctx.words, axis=1) == 0).sum()
        diagnostics.zero_norm += int(zero)
    s_tok = nm.cosine(nm.take(chosen, a), nm.take(chosen, b))
    s_word = _cosines(ctx.words[a], ctx.words[b])
    return nm.sum_sq(nm.sub(s_tok, nm.constant(s_word)))


def sar_discrepancy(ctx: AlignmentContext) -> float:
    """Mean per-pair squared similarity gap (the SAR value divided by the pair count)."""
    if ctx.pairs.shape[0] == 0:
        return 0.0
    return sar_loss(ctx).item() / ctx.pairs.shape[0]


# ---------------------------------------------------------------------------
# frozen stand-in backbone


class StandInBackbone:
    """Frozen word table plus one causal self-attention layer and a softmax head."""

    def __init__(self, vocab: Sequence[str], embeddings: np.ndarray, weights: dict[str, np.ndarray]):
        self.vocab = list(vocab)
        self.index = {w: k for k, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("backbone vocabulary has duplicates")
        self.embeddings = nm.Tensor(embeddings)
        self.weights = {k: nm.Tensor(v) for k, v in weights.items()}

    @classmethod
    def create(cls, words, provider: te.EmbeddingProvider, seed: int, uniform: bool = False,
               head_scale: float = HEAD_SCALE) -> "StandInBackbone":
        vocab = sorted(set(words))
        emb = np.stack([provider.embed_text(w) for w in vocab]) if vocab else np.zeros((0, provider.dim))
        d, v = provider.dim, len(vocab)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        s = 1.0 / math.sqrt(d)
        weights = {name: rng.normal(0.0, s, (d, d)) for name in ("Wq", "Wk", "Wv", "Wo")}
        weights["Wout"] = np.zeros((d, v)) if uniform else rng.normal(0.0, s * head_scale, (d, v))
        weights["bout"] = np.zeros(v)
        return cls(vocab, emb, weights)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def ids(self, words: Sequence[str]) -> np.ndarray:
        missing = [w for w in words if w not in self.index]
        if missing:
            raise KeyError(f"words outside the backbone vocabulary: {missing[:5]}")
        return np.asarray([self.index[w] for w in words], dtype=np.int64)

    def embed_ids(self, ids) -> nm.Tensor:
        return nm.take(self.embeddings, ids)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.embeddings.data).tobytes())
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name].data).tobytes())
        return h.hexdigest()

    def log_probs(self, inputs: nm.Tensor) -> nm.Tensor:
        """Next-token log-probabilities at every position of ``inputs`` (L, D)."""
        w = self.weights
        n = inputs.shape[0]
        q = nm.matmul(inputs, w["Wq"])
        k = nm.matmul(inputs, w["Wk"])
        v = nm.matmul(inputs, w["Wv"])
        future = np.triu(np.full((n, n), -1e30), k=1)
        logits = nm.add(nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(self.dim)), nm.constant(future))
        h = nm.add(inputs, nm.matmul(nm.matmul(nm.softmax(logits), v), w["Wo"]))
        return nm.log_softmax(nm.add_bias(nm.matmul(h, w["Wout"]), w["bout"]))

    def probs(self, inputs: nm.Tensor) -> np.ndarray:
        return np.exp(self.log_probs(inputs).data)


def template_words(template: str) -> list[str]:
    return [w for part in template.split() if part != PLACEHOLDER for w in te.tokenize_words(part)]


def build_prefix(backbone: StandInBackbone, template: str, tokens: nm.Tensor, per_entity: int) -> nm.Tensor:
    """Template embeddings with each placeholder replaced by one entity's projected tokens."""
    parts, slot = [], 0
    for piece in template.split():
        if piece == PLACEHOLDER:
            if slot >= 2:
                raise ValueError("template has more than two token placeholders")
            parts.append(nm.slice_axis(tokens, slot * per_entity, (slot + 1) * per_entity, axis=0))
            slot += 1
        else:
            words = te.tokenize_words(piece)
            if words:
                parts.append(backbone.embed_ids(backbone.ids(words)))
    if slot != 2:
        raise ValueError("template needs exactly two token placeholders (user, item)")
    return nm.concat(parts, axis=0)


def nll_loss(backbone: StandInBackbone, prefix: nm.Tensor, target_ids) -> nm.Tensor:
    """Summed negative log-likelihood of ``target_ids`` following ``prefix`` (teacher forcing)."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.size < 1:
        raise ValueError("nll_loss: empty target")
    if target_ids.min() < 0 or target_ids.max() >= backbone.vocab_size:
        raise ValueError(f"nll_loss: target id outside vocabulary of size {backbone.vocab_size}")
    p = prefix.shape[0]
    if p < 1:
        raise ValueError("nll_loss: empty prefix")
    inputs = prefix if target_ids.size == 1 else nm.concat([prefix, backbone.embed_ids(target_ids[:-1])], axis=0)
    logp = backbone.log_probs(inputs)
    c = target_ids.size
    pick = np.zeros(logp.shape)
    pick[np.arange(p - 1, p - 1 + c), target_ids] = 1.0
    return nm.scale(nm.sum(nm.mul(logp, nm.constant(pick))), -1.0)


# ---------------------------------------------------------------------------
# stage-2 training step


@dataclass
class AlignmentExample:
    user_codewords: np.ndarray  # (N+1, M)
    item_codewords: np.ndarray
    target_ids: np.ndarray  # explanation word ids (truncated)
    pairs: np.ndarray  # sampled word-position pairs


@dataclass
class Stage2Losses:
    total: float
    nll: float
    sar: float
    discrepancy: float


def make_example(user_cw, item_cw, text: str, backbone: StandInBackbone, max_pairs: int,
                 rng: np.random.Generator) -> AlignmentExample:
    words = te.tokenize_words(text)[:MAX_EXPLANATION_WORDS]
    ids = backbone.ids(words)
    return AlignmentExample(np.asarray(user_cw), np.asarray(item_cw), ids, sample_word_pairs(len(ids), max_pairs, rng))


def example_context(ex: AlignmentExample, projector: Projector, backbone: StandInBackbone,
                    candidates: np.ndarray | None = None) -> tuple[nm.Tensor, AlignmentContext]:
    tokens = project_tokens(ex.user_codewords, ex.item_codewords, projector)
    cand = tokens if candidates is None else projector(candidates)
    words = backbone.embeddings.data[ex.target_ids]
    return tokens, AlignmentContext(cand, words, ex.pairs, ex.target_ids)


def stage2_objective(batch: Sequence[AlignmentExample], projector: Projector, backbone: StandInBackbone,
                     gamma: float, template: str = DEFAULT_TEMPLATE,
                     candidates: np.ndarray | None = None) -> tuple[nm.Tensor, nm.Tensor, nm.Tensor, float]:
    """Batch-mean NLL, batch-mean SAR, their combination and the mean per-pair discrepancy."""
    if not batch:
        raise ValueError("stage2: empty batch")
    nll_terms, sar_terms, gaps, pair_count = [], [], 0.0, 0
    for ex in batch:
        tokens, ctx = example_context(ex, projector, backbone, candidates)
        per_entity = ex.user_codewords.shape[0]
        prefix = build_prefix(backbone, template, tokens, per_entity)
        nll_terms.append(nll_loss(backbone, prefix, ex.target_ids))
        sar = sar_loss(ctx)
        sar_terms.append(sar)
        gaps += sar.item()
        pair_count += ex.pairs.shape[0]
    nll = nm.scale(_add_all(nll_terms), 1.0 / len(batch))
    sar = nm.scale(_add_all(sar_terms), 1.0 / len(batch))
    total = nll if gamma == 0 else nm.add(nll, nm.scale(sar, gamma))
    return total, nll, sar, gaps / max(pair_count, 1)


def _add_all(terms):
    out = terms[0]
    for t in terms[1:]:
        out = nm.add(out, t)
    return out


def stage2_step(batch, projector: Projector, backbone: StandInBackbone, gamma: float, optimizer,
                template: str = DEFAULT_TEMPLATE, candidates=None) -> Stage2Losses:
    """One update of the projector on ``L_NLL + gamma * L_SAR``; the backbone is untouched."""
    total, nll, sar, gap = stage2_objective(batch, projector, backbone, gamma, template, candidates)
    grads = nm.backward(total, projector.store)
    optimizer.step(projector.store, grads)
    return Stage2Losses(total.item(), nll.item(), sar.item(), gap)


# ---------------------------------------------------------------------------
# token export


@dataclass
class SideEncoding:
    kind: str  # "user" or "item"
    ids: list[str]
    indices: np.ndarray  # (n, N+1)
    codewords: np.ndarray  # (n, N+1, M)


def export_tokens(sides: Sequence[SideEncoding], projector: Projector | None, path,
                  entities: Sequence[tuple[str, str]] | None = None,
                  template: str = DEFAULT_TEMPLATE) -> dict:
    """Write the token file (and ``<path>.prompt.txt``); returns counts and rejects."""
    path = Path(path)
    micro_count = sides[0].indices.shape[1] - 1
    m = sides[0].codewords.shape[2]
    lookup = {(s.kind, eid): (s, k) for s in sides for k, eid in enumerate(s.ids)}
    if entities is None:
        wanted = [(s.kind, eid) for s in sides for eid in s.ids]
    else:
        wanted = list(entities)
    rejects = [{"entity": e, "kind": k} for k, e in wanted if (k, e) not in lookup]
    head = {
        "format": TOKEN_FORMAT, "version": 1, "micro_count": int(micro_count), "codeword_dim": int(m),
        "projected_dim": int(projector.out_dim) if projector is not None else 0,
    }
    written = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(head) + "\n")
        for kind, eid in wanted:
            if (kind, eid) not in lookup:
                continue
            side, k = lookup[(kind, eid)]
            cw = side.codewords[k]
            proj = projector(cw).data.tolist() if projector is not None else []
            rec = {"entity": eid, "kind": kind, "indices": [int(x) for x in side.indices[k]],
                   "codewords": cw.tolist(), "projected": proj}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            written += 1
        if rejects:
            fh.write(json.dumps({"rejects": rejects}, separators=(",", ":")) + "\n")
    prompt = path.with_name(path.name + ".prompt.txt")
    prompt.write_text(template + "\n", encoding="utf-8")
    return {"written": written, "rejects": rejects, "prompt": str(prompt)}


def read_tokens(path) -> tuple[dict, list[dict], list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = json.loads(lines[0])
    if head.get("format") != TOKEN_FORMAT:
        raise te.FormatError(f"{path}:1: not a {TOKEN_FORMAT} file")
    records, rejects = [], []
    for line in lines[1:]:
        rec = json.loads(line)
        if "rejects" in rec:
            rejects.extend(rec["rejects"])
        else:
            records.append(rec)
    return head, records, rejects
