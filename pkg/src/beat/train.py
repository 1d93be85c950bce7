"""Stage-1 training of the behavior tokenizer."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import numeric as nm
from . import align as al
from . import supervise as sv
from . import textembed as te
from .checkpoint import Checkpoint
from .data import Corpus
from .graph import InteractionGraph, PropagationConfig, build_graph, layer_average, propagate, slice_slots
from .vocab import BehaviorVocabulary, EntityEncoding, codebook_stats, encode_entity, recon_loss, reset_dead_codes, vq_loss

log = logging.getLogger(__name__)

STREAMS = {"init": 1, "text_init": 2, "batches": 3, "mask": 4, "reset": 5, "eval": 6, "backbone": 7, "stage2": 8}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per purpose, so one consumer never shifts another."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))


class NumericalFailure(RuntimeError):
    """Training hit a non-finite loss; ``checkpoint`` is the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    alpha: float = 0.2
    beta: float = 1.0
    eta: float = 0.5
    gamma: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 30
    patience: int = 5
    eval_k: int = 20
    negatives_per_eval: int = 99
    seed: int = 0
    slot_dim: int = 16
    codeword_dim: int = 0  # 0 means equal to slot_dim
    micro_count: int = 5
    layers: int = 2
    k_macro: int = 512
    k_micro: int = 512
    init_scale: float = 0.1
    optimizer: str = "adam"
    dead_code_reset: bool = True
    item_micro: bool = False
    max_len: int = 32
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.split = tuple(self.split)
        for name in ("alpha", "beta", "eta", "gamma", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def m(self) -> int:
        return self.codeword_dim or self.slot_dim

    @property
    def propagation(self) -> PropagationConfig:
        return PropagationConfig(self.layers, self.slot_dim, self.micro_count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0

    def step(self, store: nm.ParameterStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            p = store[name]
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                # decoupled decay
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def reset_rows(self, name: str, rows) -> None:
        if name in self.m:
            self.m[name][rows] = 0.0
            self.v[name][rows] = 0.0

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"opt.m/{k}": v for k, v in self.m.items()}
        arrays.update({f"opt.v/{k}": v for k, v in self.v.items()})
        return {"t": self.t, "skipped": self.skipped}, arrays

    def load(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t, self.skipped = int(meta["t"]), int(meta["skipped"])
        self.m = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt.m/")}
        self.v = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt.v/")}


class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.skipped = 0

    def step(self, store: nm.ParameterStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                continue
            store[name].data = store[name].data - self.lr * g

    def reset_rows(self, name, rows) -> None:
        pass

    def state(self):
        return {"t": self.t, "skipped": self.skipped}, {}

    def load(self, meta, arrays) -> None:
        self.t, self.skipped = int(meta["t"]), int(meta["skipped"])


def make_optimizer(name: str, lr: float):
    return Adam(lr) if name == "adam" else SGD(lr)


def optimizer_update(store: nm.ParameterStore, grads: dict[str, np.ndarray], state, lr: float | None = None):
    """Apply one update from ``state`` (an :class:`Adam` or :class:`SGD`)."""
    if lr is not None:
        state.lr = lr
    state.step(store, grads)
    return store


# ---------------------------------------------------------------------------
# model


class TokenizerModel:
    """Entity embeddings, both vocabularies and the text-supervision heads in one store."""

    def __init__(self, cfg: TrainConfig, graph: InteractionGraph, text_dim: int, store: nm.ParameterStore):
        self.cfg = cfg
        self.graph = graph
        self.text_dim = text_dim
        self.store = store
        self.user_vocab = BehaviorVocabulary(store, "user", cfg.micro_count)
        self.item_vocab = BehaviorVocabulary(store, "item", cfg.micro_count)
        has_text = text_dim > 0
        self.fusion = sv.FusionHead(store) if has_text else None
        self.mask = sv.MaskState(store) if has_text else None
        self.attn = sv.CrossAttentionHead(store) if has_text else None

    @classmethod
    def create(cls, cfg: TrainConfig, graph: InteractionGraph, text_dim: int) -> "TokenizerModel":
        store = nm.ParameterStore()
        rng = stream(cfg.seed, "init")
        width = cfg.propagation.width
        store.add("user.emb", rng.normal(0.0, cfg.init_scale, (graph.user_count, width)))
        store.add("item.emb", rng.normal(0.0, cfg.init_scale, (graph.item_count, width)))
        for side in ("user", "item"):
            BehaviorVocabulary.create(store, side, rng, cfg.slot_dim, cfg.m, cfg.k_macro, cfg.k_micro,
                                      cfg.micro_count, cfg.init_scale)
        if text_dim > 0:
            trng = stream(cfg.seed, "text_init")
            sv.FusionHead.create(store, trng, cfg.m, text_dim)
            sv.MaskState.create(store, trng, text_dim, cfg.max_len)
            sv.CrossAttentionHead.create(store, trng, cfg.m, text_dim)
        return cls(cfg, graph, text_dim, store)

    def vocab(self, side: str) -> BehaviorVocabulary:
        return self.user_vocab if side == "user" else self.item_vocab

    def table(self) -> nm.Tensor:
        """Layer-averaged propagated embeddings, users first."""
        stacked = nm.concat([self.store["user.emb"], self.store["item.emb"]], axis=0)
        return layer_average(propagate(stacked, self.graph, self.cfg.propagation))

    def encode_rows(self, table: nm.Tensor, rows, side: str) -> EntityEncoding:
        rows = np.asarray(rows, dtype=np.int64)
        if side == "item":
            rows = rows + self.graph.user_count
        slots = slice_slots(nm.take(table, rows), self.cfg.propagation)
        return encode_entity(slots, self.vocab(side))

    def encode_all(self) -> dict[str, dict[str, np.ndarray]]:
        """Indices, codewords and assembled vectors for every user and item."""
        table = self.table()
        out = {}
        for side, n in (("user", self.graph.user_count), ("item", self.graph.item_count)):
            enc = self.encode_rows(table, np.arange(n), side)
            out[side] = {
                "indices": enc.indices.reshape(n, -1),
                "codewords": np.stack([c.data for c in enc.codewords], axis=1),
                "q": enc.q.data,
                "macro_projected": enc.projected[0].data,
                "micro_projected": np.concatenate([p.data for p in enc.projected[1:]], axis=0),
            }
        return out


@dataclass
class TextSupervision:
    reviews: dict[tuple[int, int], np.ndarray]
    micro: dict[int, np.ndarray]
    item_micro: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "TextSupervision":
        train = {(int(u), int(i)) for u, i in corpus.pairs("train")}
        reviews = {k: v for k, v in corpus.reviews.items() if k in train}
        return cls(reviews, dict(corpus.micro), dict(getattr(corpus, "item_micro", {}) or {}))


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.users.size


@dataclass
class LossBreakdown:
    total: float
    behave: float
    recon: float
    vq: float
    macro: float
    micro: float
    reviewed: int = 0
    micro_users: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepOutput:
    total: nm.Tensor
    parts: dict[str, nm.Tensor]
    user_enc: EntityEncoding
    item_enc: EntityEncoding
    reviewed: int
    micro_users: int


def _micro_term(model, enc, owners, sequences, rng, diagnostics):
    first: dict[int, int] = {}
    for r, e in enumerate(owners):
        if int(e) in sequences and int(e) not in first:
            first[int(e)] = r
    if not first:
        return None, 0
    rows = np.fromiter(first.values(), dtype=np.int64, count=len(first))
    seqs = [sequences[e] for e in first]
    masks = sv.sample_masks(seqs, rng, model.mask.max_len, diagnostics)
    micro_rows = [nm.take(slot, rows) for slot in enc.micro]
    pred = sv.masked_predictions(micro_rows, masks, model.attn, model.mask)
    return sv.batch_micro_loss(pred, masks), len(first)


def stage1_objective(model: TokenizerModel, batch: Batch, cfg: TrainConfig, text: TextSupervision,
                     mask_rng: np.random.Generator, diagnostics: sv.Diagnostics | None = None) -> StepOutput:
    """Forward pass of ``alpha * L_macro + beta * L_micro + L_recon + L_vq`` on one batch."""
    if len(batch) == 0:
        raise ValueError("stage1: empty batch")
    table = model.table()
    enc_u = model.encode_rows(table, batch.users, "user")
    enc_i = model.encode_rows(table, batch.items, "item")
    recon = recon_loss(enc_u.q, enc_i.q, batch.labels)
    vq_terms = [vq_loss(p, c, cfg.eta) for enc in (enc_u, enc_i) for p, c in zip(enc.projected, enc.codewords)]
    vq = vq_terms[0]
    for term in vq_terms[1:]:
        vq = nm.add(vq, term)
    behave = nm.add(recon, vq)
    parts = {"recon": recon, "vq": vq, "behave": behave}
    total = behave
    reviewed = micro_users = 0

    if cfg.alpha > 0 and model.fusion is not None and text.reviews:
        rows = [r for r in range(len(batch))
                if batch.labels[r] == 1 and (int(batch.users[r]), int(batch.items[r])) in text.reviews]
        if rows:
            rows_a = np.asarray(rows, dtype=np.int64)
            fused = sv.fuse_macro(nm.take(enc_u.macro, rows_a), nm.take(enc_i.macro, rows_a), model.fusion)
            cls = np.stack([text.reviews[(int(batch.users[r]), int(batch.items[r]))] for r in rows])
            if diagnostics is not None:
                users = batch.users[rows_a]
                diagnostics.duplicate_users += int(users.size - np.unique(users).size)
            # batch-summed InfoNCE normalized per reviewed pair
            macro = nm.scale(sv.macro_infonce(fused, cls, diagnostics), 1.0 / len(rows))
            parts["macro"] = macro
            total = nm.add(total, nm.scale(macro, cfg.alpha))
            reviewed = len(rows)

    if cfg.beta > 0 and model.attn is not None:
        terms = []
        micro, n = _micro_term(model, enc_u, batch.users, text.micro, mask_rng, diagnostics)
        if micro is not None:
            terms.append(micro)
            micro_users += n
        if cfg.item_micro and text.item_micro:
            micro_i, n = _micro_term(model, enc_i, batch.items, text.item_micro, mask_rng, diagnostics)
            if micro_i is not None:
                terms.append(micro_i)
                micro_users += n
        if terms:
            micro = terms[0] if len(terms) == 1 else nm.scale(nm.add(terms[0], terms[1]), 0.5)
            parts["micro"] = micro
            total = nm.add(total, nm.scale(micro, cfg.beta))
    return StepOutput(total, parts, enc_u, enc_i, reviewed, micro_users)


def breakdown(out: StepOutput) -> LossBreakdown:
    val = {k: t.item() for k, t in out.parts.items()}
    return LossBreakdown(
        out.total.item(), val["behave"], val["recon"], val["vq"], val.get("macro", 0.0), val.get("micro", 0.0),
        out.reviewed, out.micro_users,
    )


def stage1_step(model: TokenizerModel, batch: Batch, cfg: TrainConfig, text: TextSupervision, optimizer,
                mask_rng: np.random.Generator, diagnostics: sv.Diagnostics | None = None) -> tuple[LossBreakdown, StepOutput]:
    out = stage1_objective(model, batch, cfg, text, mask_rng, diagnostics)
    losses = breakdown(out)
    if not math.isfinite(losses.total):
        return losses, out
    grads = nm.backward(out.total, model.store)
    optimizer.step(model.store, grads)
    return losses, out


# ---------------------------------------------------------------------------
# evaluation


def sample_candidates(pairs: np.ndarray, interacted: Sequence[np.ndarray], n_items: int, negatives: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Positive pairs that have ``negatives`` never-interacted items, and those items."""
    keep, negs, skipped = [], [], 0
    all_items = np.arange(n_items)
    for r, (u, _) in enumerate(pairs):
        pool = np.setdiff1d(all_items, interacted[u], assume_unique=True)
        if pool.size < negatives:
            skipped += 1
            continue
        keep.append(r)
        negs.append(rng.choice(pool, size=negatives, replace=False))
    keep = np.asarray(keep, dtype=np.int64)
    neg = np.stack(negs) if negs else np.zeros((0, negatives), dtype=np.int64)
    return pairs[keep] if keep.size else pairs[:0], neg, skipped


@dataclass
class HitResult:
    hit_ratio: float
    evaluated: int
    skipped: int


def hits_from_scores(pos: np.ndarray, neg: np.ndarray, k: int) -> np.ndarray:
    """Hit iff fewer than ``k`` negatives score at least as high as the positive."""
    return (neg >= pos[:, None]).sum(axis=1) < k


def hit_ratio_at_k(score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], pairs: np.ndarray,
                   interacted: Sequence[np.ndarray], n_items: int, k: int, negatives: int,
                   rng: np.random.Generator) -> HitResult:
    """``score_fn(users, items)`` scores each (user, candidate) with items shaped (P, C)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    kept, neg, skipped = sample_candidates(pairs, interacted, n_items, negatives, rng)
    if kept.shape[0] == 0:
        return HitResult(0.0, 0, skipped)
    cand = np.concatenate([kept[:, 1:2], neg], axis=1)
    scores = score_fn(kept[:, 0], cand)
    hits = hits_from_scores(scores[:, 0], scores[:, 1:], k)
    return HitResult(float(hits.mean()), int(kept.shape[0]), skipped)


def dot_scorer(q_users: np.ndarray, q_items: np.ndarray):
    def score(users, items):
        return np.einsum("pd,pcd->pc", q_users[users], q_items[items])
    return score


def auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    greater = (pos[:, None] > neg).sum()
    ties = (pos[:, None] == neg).sum()
    return float((greater + 0.5 * ties) / neg.size)


def interacted_items(corpus: Corpus, splits=None) -> list[np.ndarray]:
    pairs = corpus.interactions if splits is None else np.concatenate([corpus.pairs(s) for s in splits])
    out = [[] for _ in range(corpus.user_count)]
    for u, i in pairs:
        out[u].append(i)
    return [np.unique(np.asarray(x, dtype=np.int64)) for x in out]


@dataclass
class EvalSet:
    """Frozen candidate lists so validation scores compare across epochs."""

    pairs: np.ndarray
    negatives: np.ndarray
    skipped: int

    @classmethod
    def build(cls, corpus: Corpus, split: str, negatives: int, rng) -> "EvalSet":
        kept, neg, skipped = sample_candidates(corpus.pairs(split), interacted_items(corpus), corpus.item_count,
                                               negatives, rng)
        return cls(kept, neg, skipped)

    def scores(self, q_users, q_items) -> tuple[np.ndarray, np.ndarray]:
        cand = np.concatenate([self.pairs[:, 1:2], self.negatives], axis=1)
        s = dot_scorer(q_users, q_items)(self.pairs[:, 0], cand)
        return s[:, 0], s[:, 1:]

    def hit_ratio(self, q_users, q_items, k: int) -> float:
        if self.pairs.shape[0] == 0:
            return 0.0
        pos, neg = self.scores(q_users, q_items)
        return float(hits_from_scores(pos, neg, k).mean())

    def auc(self, q_users, q_items) -> float:
        if self.pairs.shape[0] == 0:
            return 0.0
        return auc_from_scores(*self.scores(q_users, q_items))


# ---------------------------------------------------------------------------
# training loop


CODEBOOKS = ("user.macro", "user.micro", "item.macro", "item.micro")


def sample_negatives(positives: np.ndarray, n_items: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn non-interacting item per positive pair."""
    code = set((positives[:, 0] * n_items + positives[:, 1]).tolist())
    users = positives[:, 0]
    items = rng.integers(0, n_items, users.size)
    bad = np.fromiter(((u * n_items + i) in code for u, i in zip(users, items)), dtype=bool, count=users.size)
    while bad.any():
        items[bad] = rng.integers(0, n_items, int(bad.sum()))
        idx = np.flatnonzero(bad)
        bad[idx] = np.fromiter(((users[j] * n_items + items[j]) in code for j in idx), dtype=bool, count=idx.size)
        if idx.size and np.all(np.bincount(users[idx], minlength=1)[users[idx]] >= n_items):
            raise ValueError("sample_negatives: a user interacted with every item")
    return np.stack([users, items], axis=1)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]
    stopped_early: bool


def model_checkpoint(model: TokenizerModel, corpus: Corpus, meta: dict) -> Checkpoint:
    arrays = {name: t.data.copy() for name, t in model.store.items()}
    arrays["graph.edges"] = model.graph.edges.astype(np.float64)
    base = {
        "kind": "tokenizer",
        "config": model.cfg.to_dict(),
        "users": list(corpus.users),
        "items": list(corpus.items),
        "text_dim": model.text_dim,
    }
    base.update(meta)
    return Checkpoint(arrays, base)


def model_from_checkpoint(ckpt: Checkpoint) -> TokenizerModel:
    if ckpt.meta.get("kind") != "tokenizer":
        raise ValueError("not a tokenizer checkpoint")
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    edges = ckpt.arrays["graph.edges"].astype(np.int64).reshape(-1, 2)
    graph = build_graph(map(tuple, edges.tolist()), len(ckpt.meta["users"]), len(ckpt.meta["items"]))
    store = nm.ParameterStore()
    for name, arr in ckpt.arrays.items():
        if name == "graph.edges" or "/" in name:
            continue
        store.add(name, arr.copy())
    return TokenizerModel(cfg, graph, int(ckpt.meta["text_dim"]), store)


def _epoch_metrics(model: TokenizerModel, usage: dict, sums: dict, steps: int, hr: float, resets: dict,
                   epoch: int, skipped: int) -> dict:
    row = {"epoch": epoch, "steps": steps, "hr": hr}
    for key in ("total", "behave", "recon", "vq", "macro", "micro"):
        row[key] = sums.get(key, 0.0) / max(steps, 1)
    for name in CODEBOOKS:
        k = model.store[f"{name}.codebook"].shape[0]
        s = codebook_stats(np.repeat(np.arange(k), usage[name]), k) if usage[name].sum() else None
        row[f"{name}.utilization"] = s.utilization if s else 0.0
        row[f"{name}.perplexity"] = s.perplexity if s else 0.0
        row[f"{name}.resets"] = int(resets.get(name, 0))
    row["skipped_grads"] = skipped
    return row


def train_tokenizer(corpus: Corpus, cfg: TrainConfig, resume: Checkpoint | None = None,
                    on_epoch: Callable[[dict], None] | None = None,
                    stop_after: int | None = None,
                    on_step: Callable[[LossBreakdown], None] | None = None) -> TrainResult:
    """Epoch loop with per-epoch negatives, validation HR@k and early stopping.

    ``resume`` continues from a ``last`` checkpoint; ``stop_after`` ends the run
    after that many epochs in this call (used to produce resumable snapshots).
    """
    if not corpus.is_split:
        raise ValueError("train_tokenizer: corpus must be split first")
    train_pairs = corpus.pairs("train")
    graph = build_graph(map(tuple, train_pairs.tolist()), corpus.user_count, corpus.item_count)
    text = TextSupervision.from_corpus(corpus)
    model = TokenizerModel.create(cfg, graph, corpus.text_dim if (text.reviews or text.micro) else 0)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    rng_batches = stream(cfg.seed, "batches")
    rng_mask = stream(cfg.seed, "mask")
    rng_reset = stream(cfg.seed, "reset")
    val = EvalSet.build(corpus, "val", cfg.negatives_per_eval, stream(cfg.seed, "eval"))
    diagnostics = sv.Diagnostics()

    history: list[dict] = []
    best_hr, bad_evals, start_epoch = -1.0, 0, 0
    best_arrays = {n: t.data.copy() for n, t in model.store.items()}
    best_epoch = 0
    if resume is not None:
        if resume.meta.get("config") != cfg.to_dict():
            raise ValueError("resume: checkpoint config differs from the requested config")
        for name in model.store.names():
            model.store.set(name, resume.arrays[name])
        state = resume.meta["train_state"]
        optimizer.load(state["optimizer"], resume.arrays)
        rng_batches.bit_generator.state = state["rng"]["batches"]
        rng_mask.bit_generator.state = state["rng"]["mask"]
        rng_reset.bit_generator.state = state["rng"]["reset"]
        best_hr, bad_evals, start_epoch = state["best_hr"], state["bad_evals"], state["epoch"]
        best_epoch = state["best_epoch"]
        diagnostics = sv.Diagnostics(**state["diagnostics"])
        best_arrays = {n: resume.arrays[f"best/{n}"].copy() for n in model.store.names()}
        history = list(resume.meta["history"])

    def snapshot(epoch: int) -> tuple[Checkpoint, Checkpoint]:
        opt_meta, opt_arrays = optimizer.state()
        last = model_checkpoint(model, corpus, {"epoch": epoch, "history": history})
        last.arrays.update(opt_arrays)
        last.arrays.update({f"best/{n}": a for n, a in best_arrays.items()})
        last.meta["train_state"] = {
            "epoch": epoch, "best_hr": best_hr, "bad_evals": bad_evals, "best_epoch": best_epoch,
            "optimizer": opt_meta, "diagnostics": diagnostics.as_dict(),
            "rng": {"batches": rng_batches.bit_generator.state, "mask": rng_mask.bit_generator.state,
                    "reset": rng_reset.bit_generator.state},
        }
        best = Checkpoint(dict(best_arrays), dict(last.meta))
        del best.meta["train_state"]
        best.arrays["graph.edges"] = last.arrays["graph.edges"]
        best.meta.update({"epoch": best_epoch, "best_hr": best_hr, "diagnostics": diagnostics.as_dict()})
        return best, last

    stopped = False
    epochs_run = 0
    for epoch in range(start_epoch, cfg.max_epochs):
        if stop_after is not None and epochs_run >= stop_after:
            break
        negatives = sample_negatives(train_pairs, corpus.item_count, rng_batches)
        pairs = np.concatenate([train_pairs, negatives], axis=0)
        labels = np.concatenate([np.ones(len(train_pairs)), np.zeros(len(negatives))])
        order = rng_batches.permutation(len(pairs))
        usage = {name: np.zeros(model.store[f"{name}.codebook"].shape[0], dtype=np.int64) for name in CODEBOOKS}
        last_projected: dict[str, np.ndarray] = {}
        sums: dict[str, float] = {}
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            batch = Batch(pairs[sel, 0], pairs[sel, 1], labels[sel])
            losses, out = stage1_step(model, batch, cfg, text, optimizer, rng_mask, diagnostics)
            if not math.isfinite(losses.total):
                good, _ = snapshot(epoch)
                raise NumericalFailure(f"non-finite loss at epoch {epoch} step {steps}", good)
            steps += 1
            if on_step is not None:
                on_step(losses)
            for key, value in losses.as_dict().items():
                sums[key] = sums.get(key, 0.0) + value
            for side, enc in (("user", out.user_enc), ("item", out.item_enc)):
                idx = enc.indices
                usage[f"{side}.macro"] += np.bincount(idx[:, 0], minlength=usage[f"{side}.macro"].size)
                usage[f"{side}.micro"] += np.bincount(idx[:, 1:].reshape(-1), minlength=usage[f"{side}.micro"].size)
                last_projected[f"{side}.macro"] = enc.projected[0].data
                last_projected[f"{side}.micro"] = np.concatenate([p.data for p in enc.projected[1:]], axis=0)
        resets = {}
        if cfg.dead_code_reset:
            for name in CODEBOOKS:
                param = f"{name}.codebook"
                new, dead = reset_dead_codes(model.store[param].data, usage[name],
                                             last_projected.get(name, np.zeros((0, cfg.m))), rng_reset)
                model.store.set(param, new)
                optimizer.reset_rows(param, dead)
                resets[name] = dead.size
        enc = model.encode_all()
        hr = val.hit_ratio(enc["user"]["q"], enc["item"]["q"], cfg.eval_k)
        row = _epoch_metrics(model, usage, sums, steps, hr, resets, epoch + 1, optimizer.skipped)
        history.append(row)
        log.info("epoch %d: %s", epoch + 1, row)
        if on_epoch is not None:
            on_epoch(row)
        epochs_run += 1
        if hr > best_hr:
            best_hr, bad_evals, best_epoch = hr, 0, epoch + 1
            best_arrays = {n: t.data.copy() for n, t in model.store.items()}
        else:
            bad_evals += 1
            if bad_evals >= cfg.patience:
                stopped = True
                best, last = snapshot(epoch + 1)
                return TrainResult(best, last, history, True)
    final_epoch = history[-1]["epoch"] if history else 0
    best, last = snapshot(final_epoch)
    return TrainResult(best, last, history, stopped)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Config:
    gamma: float = 1.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 8
    steps: int = 500
    max_pairs: int = 64
    word_dim: int = 32
    hidden: int = 0  # 0 means 2 * word_dim
    template: str = al.DEFAULT_TEMPLATE
    candidates: str = "pair"
    head_scale: float = al.HEAD_SCALE
    probe_size: int = 256
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0 or self.learning_rate < 0:
            raise ValueError("gamma and learning_rate must be non-negative")
        if self.batch_size < 1 or self.steps < 0 or self.max_pairs < 0:
            raise ValueError("batch_size must be positive; steps and max_pairs non-negative")
        if self.candidates not in ("pair", "codebook"):
            raise ValueError(f"candidates must be 'pair' or 'codebook', got {self.candidates!r}")
        if al.PLACEHOLDER not in self.template:
            raise ValueError(f"template needs {al.PLACEHOLDER} placeholders")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage2Config":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Stage2Result:
    checkpoint: Checkpoint
    history: list[dict]
    backbone: al.StandInBackbone
    checksum_before: str
    checksum_after: str
    probe_start: float
    probe_end: float


def stage2_examples(corpus: Corpus, enc: dict, backbone: al.StandInBackbone, cfg: Stage2Config,
                    rng: np.random.Generator) -> list[al.AlignmentExample]:
    """One example per training-split pair with an explanation, in sorted pair order."""
    train = {(int(u), int(i)) for u, i in corpus.pairs("train")}
    out = []
    for (u, i) in sorted(corpus.explanations):
        if (u, i) not in train:
            continue
        text = corpus.explanations[(u, i)]
        if not te.tokenize_words(text):
            continue
        out.append(al.make_example(enc["user"]["codewords"][u], enc["item"]["codewords"][i], text, backbone,
                                   cfg.max_pairs, rng))
    return out


def probe_discrepancy(examples, projector, backbone, candidates=None) -> float:
    """Mean per-pair squared similarity gap over a fixed example set."""
    total, pairs = 0.0, 0
    for ex in examples:
        _, ctx = al.example_context(ex, projector, backbone, candidates)
        total += al.sar_loss(ctx).item()
        pairs += ex.pairs.shape[0]
    return total / max(pairs, 1)


def codebook_candidates(ckpt: Checkpoint) -> np.ndarray:
    return np.concatenate([ckpt.arrays[f"{name}.codebook"] for name in CODEBOOKS], axis=0)


def train_projector(corpus: Corpus, tokenizer: Checkpoint, cfg: Stage2Config,
                    provider: te.EmbeddingProvider | None = None,
                    on_log: Callable[[dict], None] | None = None) -> Stage2Result:
    """Fit the projector on ``L_NLL + gamma * L_SAR`` against a frozen stand-in backbone."""
    model = model_from_checkpoint(tokenizer)
    enc = model.encode_all()
    provider = provider or te.MockProvider(cfg.word_dim)
    if provider.dim != cfg.word_dim:
        raise ValueError(f"provider width {provider.dim} != word_dim {cfg.word_dim}")
    words = [w for text in corpus.explanations.values() for w in te.tokenize_words(text)]
    words += al.template_words(cfg.template)
    backbone = al.StandInBackbone.create(words, provider, cfg.seed, head_scale=cfg.head_scale)
    before = backbone.checksum()
    rng = stream(cfg.seed, "stage2")
    examples = stage2_examples(corpus, enc, backbone, cfg, rng)
    if not examples:
        raise ValueError("train_projector: no training pairs with explanations")
    projector = al.Projector.create(rng, model.cfg.m, cfg.word_dim, cfg.hidden or None)
    optimizer = Adam(cfg.learning_rate, weight_decay=cfg.weight_decay)
    candidates = codebook_candidates(tokenizer) if cfg.candidates == "codebook" else None
    probe = examples[:cfg.probe_size]
    start = probe_discrepancy(probe, projector, backbone, candidates)
    history = [{"step": 0, "probe_discrepancy": start}]
    order = rng.permutation(len(examples))
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(examples)), 0
        batch = [examples[k] for k in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        losses = al.stage2_step(batch, projector, backbone, cfg.gamma, optimizer, cfg.template, candidates)
        if not math.isfinite(losses.total):
            raise NumericalFailure(f"non-finite stage-2 loss at step {step}")
        row = {"step": step, "total": losses.total, "nll": losses.nll, "sar": losses.sar,
               "discrepancy": losses.discrepancy}
        if step % cfg.log_every == 0 or step == cfg.steps:
            row["probe_discrepancy"] = probe_discrepancy(probe, projector, backbone, candidates)
            if on_log is not None:
                on_log(row)
        history.append(row)
    end = probe_discrepancy(probe, projector, backbone, candidates)
    after = backbone.checksum()
    arrays = {name: t.data.copy() for name, t in projector.store.items()}
    meta = {
        "kind": "projector", "config": cfg.to_dict(), "backbone_checksum": after,
        "tokenizer_digest": tokenizer.digest(), "codeword_dim": model.cfg.m, "examples": len(examples),
        "probe_start": start, "probe_end": end,
    }
    return Stage2Result(Checkpoint(arrays, meta), history, backbone, before, after, start, end)


def projector_from_checkpoint(ckpt: Checkpoint) -> al.Projector:
    if ckpt.meta.get("kind") != "projector":
        raise ValueError("not a projector checkpoint")
    store = nm.ParameterStore()
    for name, arr in ckpt.arrays.items():
        store.add(name, arr.copy())
    return al.Projector(store)
