"""Text-side supervision of behavior tokens.

Macro: contrastive (InfoNCE) agreement between review embeddings and a fusion
of the user and item macro codewords. Micro: reconstruct masked intent
embeddings with a single-head cross-attention whose keys and values are the
entity's micro codewords.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm


@dataclass
class Diagnostics:
    zero_norm: int = 0
    duplicate_users: int = 0
    truncated_sequences: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _count_zero_rows(a: np.ndarray) -> int:
    return int((np.sqrt((a * a).sum(axis=-1)) == 0).sum())


# ---------------------------------------------------------------------------
# macro


@dataclass
class FusionHead:
    store: nm.ParameterStore
    prefix: str = "fusion"

    @classmethod
    def create(cls, store, rng, codeword_dim: int, text_dim: int, prefix: str = "fusion") -> "FusionHead":
        fan_in = 2 * codeword_dim
        store.add(f"{prefix}.W", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, text_dim)))
        store.add(f"{prefix}.b", np.zeros(text_dim))
        return cls(store, prefix)

    @property
    def weight(self) -> nm.Tensor:
        return self.store[f"{self.prefix}.W"]

    @property
    def bias(self) -> nm.Tensor:
        return self.store[f"{self.prefix}.b"]

    @property
    def text_dim(self) -> int:
        return self.bias.shape[0]


def fuse_macro(c_u: nm.Tensor, c_i: nm.Tensor, head: FusionHead) -> nm.Tensor:
    """Linear map of ``[c_u || c_i]`` into the text-embedding space (vector or batch)."""
    nm._same_shape("fuse_macro", c_u, c_i)
    cat = nm.concat([c_u, c_i], axis=-1)
    if cat.shape[-1] != head.weight.shape[0]:
        raise nm.ShapeError(f"fuse_macro: input width {cat.shape[-1]} != head input {head.weight.shape[0]}")
    if cat.data.ndim == 1:
        row = nm.reshape(cat, (1, cat.shape[0]))
        return nm.reshape(nm.add_bias(nm.matmul(row, head.weight), head.bias), (head.text_dim,))
    return nm.add_bias(nm.matmul(cat, head.weight), head.bias)


def macro_infonce(fused: nm.Tensor, cls, diagnostics: Diagnostics | None = None) -> nm.Tensor:
    """Batch-summed InfoNCE with cosine logits; row ``i`` of ``cls`` is positive for row ``i`` of ``fused``."""
    cls = nm.as_tensor(cls)
    if fused.data.ndim != 2 or fused.shape != cls.shape:
        raise nm.ShapeError(f"macro_infonce: shape mismatch {fused.shape} vs {cls.shape}")
    if fused.shape[0] < 1:
        raise ValueError("macro_infonce: empty batch")
    if diagnostics is not None:
        diagnostics.zero_norm += _count_zero_rows(fused.data) + _count_zero_rows(cls.data)
    sim = nm.matmul(nm.normalize_rows(cls), nm.transpose(nm.normalize_rows(fused)))
    logp = nm.log_softmax(sim)
    return nm.scale(nm.sum(nm.mul(logp, nm.constant(np.eye(fused.shape[0])))), -1.0)


# ---------------------------------------------------------------------------
# micro


@dataclass
class MicroIntentSequence:
    owner: str
    embeddings: np.ndarray  # (n, D_t)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError(f"micro-intent sequence for {self.owner!r} must hold at least one vector")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class MaskState:
    store: nm.ParameterStore
    prefix: str = "mask"

    @classmethod
    def create(cls, store, rng, text_dim: int, max_len: int = 32, prefix: str = "mask") -> "MaskState":
        store.add(f"{prefix}.vector", rng.normal(0.0, 0.02, text_dim))
        store.add(f"{prefix}.positions", rng.normal(0.0, 0.02, (max_len, text_dim)))
        return cls(store, prefix)

    @property
    def vector(self) -> nm.Tensor:
        return self.store[f"{self.prefix}.vector"]

    @property
    def positions(self) -> nm.Tensor:
        return self.store[f"{self.prefix}.positions"]

    @property
    def max_len(self) -> int:
        return self.positions.shape[0]


@dataclass
class MaskedSequence:
    corrupted: nm.Tensor  # (n, D_t)
    masked: np.ndarray  # sorted positions
    truth: np.ndarray  # (t, D_t)


def default_mask_count(n: int) -> int:
    return max(1, math.ceil(n / 4))


def truncate(embeddings: np.ndarray, max_len: int) -> np.ndarray:
    """Keep the most recent ``max_len`` entries."""
    return embeddings[-max_len:] if embeddings.shape[0] > max_len else embeddings


def choose_masked(n: int, t: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= t <= n:
        raise ValueError(f"mask_sequence: need 1 <= t <= n, got t={t}, n={n}")
    return np.sort(rng.choice(n, size=t, replace=False))


def mask_sequence(seq: MicroIntentSequence, t: int, mask: MaskState, rng: np.random.Generator) -> MaskedSequence:
    """Replace ``t`` distinct positions with the learned mask vector."""
    e = seq.embeddings
    n, dim = e.shape
    masked = choose_masked(n, t, rng)
    keep = np.ones((n, 1))
    keep[masked] = 0.0
    hit = nm.constant(1.0 - keep)
    corrupted = nm.add(nm.constant(e * keep), nm.matmul(hit, nm.reshape(mask.vector, (1, dim))))
    return MaskedSequence(corrupted, masked, e[masked].copy())


@dataclass
class CrossAttentionHead:
    store: nm.ParameterStore
    prefix: str = "attn"

    @classmethod
    def create(cls, store, rng, codeword_dim: int, text_dim: int, attn_dim: int | None = None,
               prefix: str = "attn") -> "CrossAttentionHead":
        a = attn_dim or text_dim
        shapes = {"q": (text_dim, a), "k": (codeword_dim, a), "v": (codeword_dim, a), "o": (a, text_dim)}
        for key, (fan_in, fan_out) in shapes.items():
            store.add(f"{prefix}.W{key}", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
            store.add(f"{prefix}.b{key}", np.zeros(fan_out))
        return cls(store, prefix)

    def linear(self, key: str, x: nm.Tensor) -> nm.Tensor:
        return nm.add_bias(nm.matmul(x, self.store[f"{self.prefix}.W{key}"]), self.store[f"{self.prefix}.b{key}"])

    @property
    def attn_dim(self) -> int:
        return self.store[f"{self.prefix}.Wq"].shape[1]


def attend(
    queries: nm.Tensor, keys_src: nm.Tensor, owner: np.ndarray, n_keys: int, head: CrossAttentionHead
) -> tuple[nm.Tensor, np.ndarray]:
    """Each query row attends over the ``n_keys`` codeword rows of its owner group.

    ``keys_src`` stacks groups of ``n_keys`` rows; ``owner[t]`` selects the group
    for query ``t``. Returns outputs (T, D_t) and attention weights (T, n_keys).
    """
    owner = np.asarray(owner, dtype=np.int64)
    t = queries.shape[0]
    q = head.linear("q", queries)
    k = head.linear("k", keys_src)
    v = head.linear("v", keys_src)
    key_rows = (owner[:, None] * n_keys + np.arange(n_keys)[None, :]).reshape(-1)
    q_rep = nm.take(q, np.repeat(np.arange(t), n_keys))
    logits = nm.reshape(nm.rowdot(q_rep, nm.take(k, key_rows)), (t, n_keys))
    weights = nm.softmax(nm.scale(logits, 1.0 / math.sqrt(head.attn_dim)))
    mixed = nm.scale_rows(nm.take(v, key_rows), nm.reshape(weights, (t * n_keys,)))
    hidden = nm.sum(nm.reshape(mixed, (t, n_keys, head.attn_dim)), axis=1)
    return head.linear("o", hidden), weights.data


def _stack_codewords(c_micro) -> nm.Tensor:
    if isinstance(c_micro, nm.Tensor):
        return c_micro if c_micro.data.ndim == 2 else nm.reshape(c_micro, (1, c_micro.shape[0]))
    rows = [c if c.data.ndim == 2 else nm.reshape(c, (1, c.shape[0])) for c in c_micro]
    return nm.concat(rows, axis=0)


def cross_attend_reconstruct(
    c_micro, corrupted: nm.Tensor, head: CrossAttentionHead, mask: MaskState
) -> tuple[nm.Tensor, np.ndarray]:
    """Predict every position of one corrupted sequence from the entity's N micro codewords."""
    keys = _stack_codewords(c_micro)
    n = corrupted.shape[0]
    if keys.shape[0] < 1:
        raise ValueError("cross_attend_reconstruct: need at least one micro codeword")
    if n > mask.max_len:
        raise ValueError(f"sequence length {n} exceeds positional table {mask.max_len}")
    queries = nm.add(corrupted, nm.slice_axis(mask.positions, 0, n, axis=0))
    return attend(queries, keys, np.zeros(n, dtype=np.int64), keys.shape[0], head)


def micro_loss(pred: nm.Tensor, truth) -> nm.Tensor:
    """Mean L2 distance between predicted and true masked embeddings."""
    truth = nm.as_tensor(truth)
    nm._same_shape("micro_loss", pred, truth)
    if pred.data.ndim != 2 or pred.shape[0] == 0:
        raise ValueError("micro_loss: empty masked set")
    sq = nm.sum_sq(nm.sub(pred, truth), axis=1)
    return nm.mean(nm.sqrt(nm.add(sq, nm.constant(np.full(sq.shape, 1e-12)))))


@dataclass
class MaskedBatch:
    owner: np.ndarray  # entity row (in the codeword batch) per masked instance
    position: np.ndarray
    truth: np.ndarray
    per_owner: np.ndarray  # masked count per entity row


def sample_masks(
    sequences: Sequence[np.ndarray], rng: np.random.Generator, max_len: int,
    diagnostics: Diagnostics | None = None,
) -> MaskedBatch:
    """Draw masked positions for a batch of intent sequences (one per entity row)."""
    owners, positions, truths, counts = [], [], [], []
    for row, emb in enumerate(sequences):
        if emb.shape[0] > max_len and diagnostics is not None:
            diagnostics.truncated_sequences += 1
        emb = truncate(emb, max_len)
        masked = choose_masked(emb.shape[0], default_mask_count(emb.shape[0]), rng)
        owners.append(np.full(masked.size, row))
        positions.append(masked)
        truths.append(emb[masked])
        counts.append(masked.size)
    return MaskedBatch(
        np.concatenate(owners).astype(np.int64),
        np.concatenate(positions).astype(np.int64),
        np.concatenate(truths, axis=0),
        np.asarray(counts),
    )


def masked_predictions(
    micro_rows: Sequence[nm.Tensor], batch: MaskedBatch, head: CrossAttentionHead, mask: MaskState
) -> nm.Tensor:
    """Predictions at masked positions for many entities at once.

    ``micro_rows`` holds N tensors of shape (rows, M), slot ``j`` of every entity.
    Only masked positions are evaluated: each output depends on its own query
    and the owner's codewords, never on other positions.
    """
    n_keys = len(micro_rows)
    rows, m = micro_rows[0].shape
    keys = nm.reshape(nm.concat(list(micro_rows), axis=1), (rows * n_keys, m))
    dim = mask.vector.shape[0]
    mask_rows = nm.take(nm.reshape(mask.vector, (1, dim)), np.zeros(batch.position.size, dtype=np.int64))
    queries = nm.add(mask_rows, nm.take(mask.positions, batch.position))
    out, _ = attend(queries, keys, batch.owner, n_keys, head)
    return out


def batch_micro_loss(pred: nm.Tensor, batch: MaskedBatch) -> nm.Tensor:
    """Average over entities of each entity's mean masked-position distance."""
    sq = nm.sum_sq(nm.sub(pred, nm.constant(batch.truth)), axis=1)
    dist = nm.sqrt(nm.add(sq, nm.constant(np.full(sq.shape, 1e-12))))
    weights = 1.0 / (batch.per_owner[batch.owner] * batch.per_owner.size)
    return nm.sum(nm.mul(dist, nm.constant(weights)))
