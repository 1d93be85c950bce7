"""Bipartite interaction graph and degree-normalized multi-layer propagation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numeric as nm
from .kernels import CSR


@dataclass(frozen=True)
class InteractionGraph:
    user_count: int
    item_count: int
    edges: np.ndarray  # (E, 2) int64, sorted by (user, item), no duplicates
    user_degrees: np.ndarray
    item_degrees: np.ndarray
    _adjacency: list = field(default_factory=list, repr=False, compare=False)

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    @property
    def node_count(self) -> int:
        return self.user_count + self.item_count

    def normalized_adjacency(self) -> CSR:
        """Symmetric (U+I)x(U+I) matrix with entries 1/sqrt(|N_u| |N_i|) on each edge.

        Users occupy rows ``0..U-1`` and items rows ``U..U+I-1``.
        """
        if not self._adjacency:
            u = self.edges[:, 0]
            i = self.edges[:, 1] + self.user_count
            w = 1.0 / (np.sqrt(self.user_degrees[self.edges[:, 0]]) * np.sqrt(self.item_degrees[self.edges[:, 1]]))
            n = self.node_count
            self._adjacency.append(
                CSR.from_coo((n, n), np.concatenate([u, i]), np.concatenate([i, u]), np.concatenate([w, w]))
            )
        return self._adjacency[0]

    def neighbors_of_user(self, u: int) -> np.ndarray:
        return self.edges[self.edges[:, 0] == u, 1]


def build_graph(interactions: Iterable[tuple[int, int]], user_count: int, item_count: int) -> InteractionGraph:
    """Deduplicate ``(user, item)`` index pairs into a graph with degree counts."""
    pairs = list(interactions)
    for rec in pairs:
        u, i = rec
        if not (0 <= u < user_count and 0 <= i < item_count):
            raise ValueError(f"build_graph: interaction {rec!r} out of range for {user_count} users x {item_count} items")
    if pairs:
        edges = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    user_degrees = np.bincount(edges[:, 0], minlength=user_count).astype(np.int64)
    item_degrees = np.bincount(edges[:, 1], minlength=item_count).astype(np.int64)
    return InteractionGraph(user_count, item_count, edges, user_degrees, item_degrees)


@dataclass(frozen=True)
class PropagationConfig:
    layers: int = 2
    slot_dim: int = 16
    micro_count: int = 5

    def __post_init__(self):
        if self.layers < 0 or self.slot_dim < 1 or self.micro_count < 1:
            raise ValueError(f"invalid propagation config {self}")

    @property
    def width(self) -> int:
        return (self.micro_count + 1) * self.slot_dim


def propagate(emb: nm.Tensor, graph: InteractionGraph, cfg: PropagationConfig) -> list[nm.Tensor]:
    """Layers ``0..L`` of neighbor propagation over the stacked user+item table."""
    if emb.shape != (graph.node_count, cfg.width):
        raise nm.ShapeError(
            f"propagate: expected table ({graph.node_count}, {cfg.width}), got {emb.shape}"
        )
    adj = graph.normalized_adjacency()
    layers = [emb]
    for _ in range(cfg.layers):
        layers.append(nm.spmm(adj, layers[-1]))
    return layers


def layer_average(layers: Sequence[nm.Tensor]) -> nm.Tensor:
    if not layers:
        raise ValueError("layer_average: no layers")
    total = layers[0]
    for layer in layers[1:]:
        total = nm.add(total, layer)
    return nm.scale(total, 1.0 / len(layers))


@dataclass
class SlotEmbedding:
    macro: nm.Tensor
    micro: list[nm.Tensor]
    owner: object = None

    def slots(self) -> list[nm.Tensor]:
        return [self.macro, *self.micro]

    def concat(self) -> nm.Tensor:
        return nm.concat(self.slots(), axis=-1)


def slice_slots(row: nm.Tensor, cfg: PropagationConfig, owner=None) -> SlotEmbedding:
    """Split the last axis of ``row`` (a vector or a batch of rows) into macro + micro slots."""
    if row.shape[-1] != cfg.width:
        raise nm.ShapeError(f"slice_slots: width {row.shape[-1]} != (N+1)*d = {cfg.width}")
    d = cfg.slot_dim
    macro = nm.slice_axis(row, 0, d)
    micro = [nm.slice_axis(row, (j + 1) * d, (j + 2) * d) for j in range(cfg.micro_count)]
    return SlotEmbedding(macro, micro, owner)
