"""Behavior vocabulary: macro/micro codebooks, slot projections and behavior losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numeric as nm
from .graph import SlotEmbedding


@dataclass
class BehaviorVocabulary:
    """Parameters of one side (user or item) living in a :class:`ParameterStore`.

    Names are ``{side}.macro.codebook``, ``{side}.micro.codebook``,
    ``{side}.macro.W``/``.b`` and ``{side}.micro.W``/``.b``; the micro projection
    is shared by all micro slots.
    """

    store: nm.ParameterStore
    side: str
    micro_count: int

    @classmethod
    def create(
        cls,
        store: nm.ParameterStore,
        side: str,
        rng: np.random.Generator,
        slot_dim: int,
        codeword_dim: int | None = None,
        k_macro: int = 512,
        k_micro: int = 512,
        micro_count: int = 5,
        init_scale: float = 0.1,
    ) -> "BehaviorVocabulary":
        m = codeword_dim or slot_dim
        if k_macro < 2 or k_micro < 2:
            raise ValueError("codebooks need at least 2 codewords")
        store.add(f"{side}.macro.codebook", rng.normal(0.0, init_scale, (k_macro, m)))
        store.add(f"{side}.micro.codebook", rng.normal(0.0, init_scale, (k_micro, m)))
        for role in ("macro", "micro"):
            # identity-like start keeps projected slots on the scale of the embeddings
            w = np.eye(slot_dim, m) + rng.normal(0.0, init_scale / np.sqrt(slot_dim), (slot_dim, m))
            store.add(f"{side}.{role}.W", w)
            store.add(f"{side}.{role}.b", np.zeros(m))
        return cls(store, side, micro_count)

    def codebook(self, role: str) -> nm.Tensor:
        return self.store[f"{self.side}.{role}.codebook"]

    def projection(self, role: str) -> tuple[nm.Tensor, nm.Tensor]:
        return self.store[f"{self.side}.{role}.W"], self.store[f"{self.side}.{role}.b"]

    @property
    def codeword_dim(self) -> int:
        return self.codebook("macro").shape[1]

    @property
    def assembled_dim(self) -> int:
        return (self.micro_count + 1) * self.codeword_dim

    def project(self, slot: nm.Tensor, role: str) -> nm.Tensor:
        w, b = self.projection(role)
        if slot.shape[-1] != w.shape[0]:
            raise nm.ShapeError(f"project: slot width {slot.shape[-1]} != projection input {w.shape[0]}")
        if slot.data.ndim == 1:
            row = nm.reshape(slot, (1, slot.shape[0]))
            return nm.reshape(nm.add_bias(nm.matmul(row, w), b), (w.shape[1],))
        return nm.add_bias(nm.matmul(slot, w), b)


def quantize(projected: nm.Tensor, codebook: nm.Tensor) -> tuple[np.ndarray, nm.Tensor]:
    """Nearest codeword per row; the gathered rows stay differentiable w.r.t. the codebook."""
    if codebook.shape[0] == 0:
        raise ValueError("quantize: empty codebook")
    rows = projected.data.reshape(-1, projected.shape[-1])
    idx = nm.discrete(lambda: kernels.nearest(rows, codebook.data)[0])
    return idx, nm.take(codebook, idx)


def quantize_slot(projected, codebook) -> tuple[int, np.ndarray]:
    """Index and codeword of the nearest row of ``codebook`` to one vector."""
    p = np.asarray(projected.data if isinstance(projected, nm.Tensor) else projected, dtype=np.float64)
    c = np.asarray(codebook.data if isinstance(codebook, nm.Tensor) else codebook, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0:
        raise ValueError("quantize_slot: empty codebook")
    idx, _ = kernels.nearest(p.reshape(1, -1), c)
    k = int(idx[0])
    return k, c[k]


def straight_through(projected: nm.Tensor, codeword: nm.Tensor) -> nm.Tensor:
    """Forward value of ``codeword`` with the gradient routed to ``projected`` unchanged."""
    return nm.add(projected, nm.stop_gradient(nm.sub(codeword, projected)))


@dataclass
class EntityEncoding:
    """Quantized slots of a batch of entities (rows) or a single entity (vectors)."""

    projected: list[nm.Tensor]
    indices: np.ndarray  # (rows, N+1) or (N+1,)
    codewords: list[nm.Tensor]
    passthrough: list[nm.Tensor]
    q: nm.Tensor

    @property
    def macro(self) -> nm.Tensor:
        return self.passthrough[0]

    @property
    def micro(self) -> list[nm.Tensor]:
        return self.passthrough[1:]


def encode_entity(slots: SlotEmbedding, vocab: BehaviorVocabulary) -> EntityEncoding:
    """Project every slot, quantize macro/micro against their codebooks and assemble ``q``."""
    roles = ["macro"] + ["micro"] * len(slots.micro)
    single = slots.macro.data.ndim == 1
    projected, codewords, passthrough, indices = [], [], [], []
    for slot, role in zip(slots.slots(), roles):
        p = vocab.project(slot, role)
        idx, c = quantize(p, vocab.codebook(role))
        if single:
            c = nm.reshape(c, (c.shape[-1],))
        projected.append(p)
        codewords.append(c)
        passthrough.append(straight_through(p, c))
        indices.append(idx)
    index_arr = np.stack(indices, axis=-1)
    if single:
        index_arr = index_arr.reshape(-1)
    return EntityEncoding(projected, index_arr, codewords, passthrough, nm.concat(passthrough, axis=-1))


def recon_loss(q_u: nm.Tensor, q_i: nm.Tensor, labels) -> nm.Tensor:
    """Mean absolute residual ``|I_ui - q_u . q_i|`` over pairs."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise ValueError("recon_loss: labels must be 0 or 1")
    if q_u.data.ndim == 1:
        return nm.abs(nm.sub(nm.constant(labels.reshape(())), nm.dot(q_u, q_i)))
    return nm.mean(nm.abs(nm.sub(nm.constant(labels.reshape(-1)), nm.rowdot(q_u, q_i))))


def vq_loss(projected: nm.Tensor, codeword: nm.Tensor, eta: float = 0.5) -> nm.Tensor:
    """Codebook term on ``codeword`` plus ``eta`` times the commitment term on ``projected``.

    For batches the per-row values are averaged.
    """
    if eta <= 0:
        raise ValueError("vq_loss: eta must be positive")
    codebook_term = nm.sum_sq(nm.sub(nm.stop_gradient(projected), codeword))
    commit_term = nm.sum_sq(nm.sub(projected, nm.stop_gradient(codeword)))
    total = nm.add(codebook_term, nm.scale(commit_term, eta))
    rows = 1 if projected.data.ndim == 1 else projected.shape[0]
    return nm.scale(total, 1.0 / rows)


@dataclass
class CodebookStats:
    histogram: np.ndarray
    utilization: float
    perplexity: float


def codebook_stats(assignments, k: int) -> CodebookStats:
    a = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if a.size and (a.min() < 0 or a.max() >= k):
        raise ValueError(f"codebook_stats: assignment outside [0, {k})")
    hist = np.bincount(a, minlength=k)
    if a.size == 0:
        return CodebookStats(hist, 0.0, 0.0)
    p = hist[hist > 0] / a.size
    return CodebookStats(hist, float((hist > 0).sum()) / k, float(np.exp(-(p * np.log(p)).sum())))


def reset_dead_codes(
    codebook: np.ndarray,
    usage: np.ndarray,
    projected: np.ndarray,
    rng: np.random.Generator,
    noise: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """Re-seed codewords with zero usage from random rows of ``projected`` plus small noise.

    Returns the new codebook and the indices that were reset.
    """
    dead = np.flatnonzero(np.asarray(usage) == 0)
    out = np.array(codebook, dtype=np.float64)
    if dead.size == 0 or len(projected) == 0:
        return out, dead[:0]
    src = rng.integers(0, len(projected), size=dead.size)
    out[dead] = projected[src] + noise * rng.standard_normal((dead.size, out.shape[1]))
    return out, dead
