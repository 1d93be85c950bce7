"""Token-quality scores against planted structure and the micro reconstruction probe."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import supervise as sv


def cluster_purity(assign: np.ndarray, labels: np.ndarray) -> float:
    """Share of entities whose token's majority label matches their own."""
    assign = np.asarray(assign, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if assign.shape != labels.shape or assign.size == 0:
        raise ValueError("cluster_purity: need equal-length, non-empty inputs")
    total = 0
    for a in np.unique(assign):
        total += np.bincount(labels[assign == a]).max()
    return float(total / assign.size)


def micro_alignment(indices: np.ndarray, factors: np.ndarray) -> float:
    """How well micro codewords track planted factors.

    For every codeword, find the factor held by the largest share of the
    entities using it; the score is that share averaged over all
    (entity, slot) assignments. An entity counts once per codeword.
    """
    indices = np.asarray(indices, dtype=np.int64)
    factors = np.asarray(factors, dtype=np.int64)
    if indices.shape[0] != factors.shape[0] or indices.size == 0:
        raise ValueError("micro_alignment: need one factor row per entity")
    pool = int(factors.max()) + 1
    hot = np.zeros((factors.shape[0], pool), dtype=bool)
    np.put_along_axis(hot, factors, True, axis=1)
    total, count = 0.0, 0
    for k in np.unique(indices):
        users = np.flatnonzero((indices == k).any(axis=1))
        total += hot[users].sum(axis=0).max()
        count += users.size
    return float(total / count)


@dataclass
class ReconProbe:
    model_error: float
    baseline_error: float
    instances: int

    @property
    def ratio(self) -> float:
        return self.model_error / self.baseline_error if self.baseline_error > 0 else float("inf")


def visible_mean(seq: np.ndarray, masked: np.ndarray) -> np.ndarray:
    keep = np.ones(seq.shape[0], dtype=bool)
    keep[masked] = False
    return seq[keep].mean(axis=0) if keep.any() else np.zeros(seq.shape[1])


def micro_recon_probe(model, sequences: dict[int, np.ndarray], rng: np.random.Generator) -> ReconProbe:
    """Masked-position L2 error of the trained head versus predicting the mean of the visible entries.

    Both scores use the same masks and are averaged per user, then over users.
    """
    if model.attn is None:
        raise ValueError("micro_recon_probe: model has no micro head")
    users = sorted(sequences)
    if not users:
        raise ValueError("micro_recon_probe: no sequences")
    seqs = [sv.truncate(sequences[u], model.mask.max_len) for u in users]
    batch = sv.sample_masks(seqs, rng, model.mask.max_len)
    table = model.table()
    enc = model.encode_rows(table, np.asarray(users), "user")
    pred = sv.masked_predictions(enc.micro, batch, model.attn, model.mask).data
    base = np.empty_like(pred)
    start = 0
    for row, seq in enumerate(seqs):
        t = int(batch.per_owner[row])
        masked = batch.position[start:start + t]
        base[start:start + t] = visible_mean(seq, masked)
        start += t
    weights = 1.0 / (batch.per_owner[batch.owner] * len(users))
    model_err = float(np.sum(weights * np.sqrt(((pred - batch.truth) ** 2).sum(axis=1))))
    base_err = float(np.sum(weights * np.sqrt(((base - batch.truth) ** 2).sum(axis=1))))
    return ReconProbe(model_err, base_err, int(batch.position.size))


def score_table(enc: dict, evalset, k: int) -> dict:
    q_u, q_i = enc["user"]["q"], enc["item"]["q"]
    return {"hr": evalset.hit_ratio(q_u, q_i, k), "auc": evalset.auc(q_u, q_i), "evaluated": int(evalset.pairs.shape[0])}

