"""Corpus ingestion, splitting and a synthetic generator with planted structure."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import textembed as te

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
UNSPLIT = -1


@dataclass
class Corpus:
    users: list[str]
    items: list[str]
    interactions: np.ndarray  # (E, 2) dense indices, file order, deduplicated
    split: np.ndarray  # (E,) int8 codes into SPLITS, or UNSPLIT
    reviews: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    micro: dict[int, np.ndarray] = field(default_factory=dict)
    explanations: dict[tuple[int, int], str] = field(default_factory=dict)
    text_dim: int = 0
    duplicates: int = 0

    def __post_init__(self):
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.item_index = {i: k for k, i in enumerate(self.items)}

    @property
    def user_count(self) -> int:
        return len(self.users)

    @property
    def item_count(self) -> int:
        return len(self.items)

    def pairs(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return self.interactions
        return self.interactions[self.split == SPLITS.index(split)]

    @property
    def is_split(self) -> bool:
        return bool(self.split.size) and bool(np.all(self.split != UNSPLIT))

    def zero_shot_interactions(self) -> int:
        return sum(1 for u, i in self.interactions if (int(u), int(i)) not in self.reviews)

    def cold_users(self) -> list[int]:
        """Users with interactions but no review."""
        reviewed = {u for u, _ in self.reviews}
        return sorted(int(u) for u in set(self.interactions[:, 0].tolist()) - reviewed)

    def without_text(self) -> "Corpus":
        """The same interactions with every review, intent and explanation dropped."""
        return replace(self, reviews={}, micro={}, explanations={})


def _str_field(path, line, rec, key) -> str:
    value = rec.get(key)
    if not isinstance(value, str):
        raise te.FormatError(f"{path}:{line}: record needs a string {key!r}")
    return value


def load_corpus(
    interactions,
    reviews=None,
    intents=None,
    explanations=None,
    provider: te.EmbeddingProvider | None = None,
) -> Corpus:
    """Load JSON-lines files; entity indices are assigned in first-seen order."""
    _, records = te.read_jsonl(interactions)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen: dict[tuple[int, int], int] = {}
    pairs, labels = [], []
    duplicates = 0
    for line, rec in records:
        u = users.setdefault(_str_field(interactions, line, rec, "user"), len(users))
        i = items.setdefault(_str_field(interactions, line, rec, "item"), len(items))
        label = rec.get("split")
        if label is not None and label not in SPLITS:
            raise te.FormatError(f"{interactions}:{line}: unknown split {label!r}")
        if (u, i) in seen:
            duplicates += 1
            continue
        seen[(u, i)] = len(pairs)
        pairs.append((u, i))
        labels.append(UNSPLIT if label is None else SPLITS.index(label))
    if duplicates:
        log.warning("load_corpus: dropped %d duplicate interactions", duplicates)
    if labels and any(x == UNSPLIT for x in labels) and not all(x == UNSPLIT for x in labels):
        raise te.FormatError(f"{interactions}: either every interaction carries a split or none does")

    def pair_key(path, line, rec, kind):
        user = _str_field(path, line, rec, "user")
        item = _str_field(path, line, rec, "item")
        key = (users.get(user), items.get(item))
        if key not in seen:
            raise te.FormatError(f"{path}:{line}: dangling {kind} for (user={user!r}, item={item!r})")
        return key

    review_map: dict[tuple[int, int], np.ndarray] = {}
    text_dim = 0
    if reviews is not None:
        text_dim, records = te.load_reviews(reviews)
        prov = provider or te.MockProvider(text_dim)
        for rec in records:
            key = (users.get(rec.user), items.get(rec.item))
            if key not in seen:
                raise te.FormatError(f"{reviews}: dangling review for (user={rec.user!r}, item={rec.item!r})")
            review_map[key] = te.embed_cls(rec, prov)

    micro_map: dict[int, np.ndarray] = {}
    if intents is not None:
        head, _ = te.read_jsonl(intents)
        prov = provider or te.MockProvider(head["dim"] or text_dim or 1)
        for seq in te.load_micro_intents(intents, prov):
            if seq.owner not in users:
                raise te.FormatError(f"{intents}: intents for unknown user {seq.owner!r}")
            micro_map[users[seq.owner]] = seq.embeddings
            text_dim = text_dim or seq.embeddings.shape[1]
            if seq.embeddings.shape[1] != text_dim:
                raise te.FormatError(f"{intents}: intent width {seq.embeddings.shape[1]} != review width {text_dim}")

    expl_map: dict[tuple[int, int], str] = {}
    if explanations is not None:
        _, records = te.read_jsonl(explanations)
        for line, rec in records:
            key = pair_key(explanations, line, rec, "explanation")
            expl_map[key] = _str_field(explanations, line, rec, "text")

    inter = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return Corpus(
        list(users), list(items), inter, np.asarray(labels, dtype=np.int8),
        review_map, micro_map, expl_map, text_dim, duplicates,
    )


def split_corpus(corpus: Corpus, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Corpus:
    """Seeded interaction-level split; users keep at least one training interaction when possible."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = corpus.interactions.shape[0]
    if n == 0:
        raise ValueError("split_corpus: empty corpus")
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int8)
    labels[perm[:n_train]] = 0
    labels[perm[n_train:n_train + n_val]] = 1
    labels[perm[n_train + n_val:]] = 2
    rank = np.empty(n, dtype=np.int64)
    rank[perm] = np.arange(n)

    users = corpus.interactions[:, 0]
    train_count = np.bincount(users[labels == 0], minlength=corpus.user_count)
    for u in np.unique(users):
        if train_count[u] > 0:
            continue
        own = np.flatnonzero(users == u)
        moved = own[np.argmin(rank[own])]
        donors = np.flatnonzero((labels == 0) & (train_count[users] >= 2))
        if donors.size:
            donor = donors[np.argmax(rank[donors])]
            labels[donor] = labels[moved]
            train_count[users[donor]] -= 1
        labels[moved] = 0
        train_count[u] += 1
    return replace(corpus, split=labels)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    groups: int = 8
    micro_pool: int = 24
    users: int = 2000
    items: int = 1000
    factors: int = 3
    interaction_noise: float = 0.02
    embed_noise: float = 0.05
    seed: int = 0
    text_dim: int = 32
    review_rate: float = 0.3
    cold_fraction: float = 0.1
    density: float | None = None  # default 0.1 * factors / micro_pool
    slope: float = 4.0

    def validate(self) -> None:
        if self.groups < 2:
            raise ValueError("synthetic spec needs at least 2 groups")
        if self.factors > self.micro_pool or self.factors < 1:
            raise ValueError(f"factors per entity ({self.factors}) must be in [1, micro_pool={self.micro_pool}]")
        if self.users < 1 or self.items < 1 or self.text_dim < 1:
            raise ValueError("synthetic spec needs positive users, items and text_dim")
        for name in ("interaction_noise", "review_rate", "cold_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.embed_noise < 0:
            raise ValueError("embed_noise must be non-negative")

    @property
    def target_density(self) -> float:
        return self.density if self.density is not None else 0.1 * self.factors / self.micro_pool


@dataclass
class PlantedTruth:
    user_group: np.ndarray
    user_factors: np.ndarray  # (U, F)
    item_group: np.ndarray
    item_factors: np.ndarray
    group_emb: np.ndarray
    factor_emb: np.ndarray
    pair_prob: np.ndarray  # (U, I) noiseless interaction probability

    def records(self) -> list[dict]:
        out = []
        for k, (g, f) in enumerate(zip(self.user_group, self.user_factors)):
            out.append({"entity": f"u{k}", "group": int(g), "factors": [int(x) for x in f]})
        for k, (g, f) in enumerate(zip(self.item_group, self.item_factors)):
            out.append({"entity": f"i{k}", "group": int(g), "factors": [int(x) for x in f]})
        return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _affinity(spec, ug, uf, ig, if_) -> np.ndarray:
    same = (ug[:, None] == ig[None, :]).astype(np.float64)
    u_hot = np.zeros((len(ug), spec.micro_pool))
    i_hot = np.zeros((len(ig), spec.micro_pool))
    np.put_along_axis(u_hot, uf, 1.0, axis=1)
    np.put_along_axis(i_hot, if_, 1.0, axis=1)
    # group indicator weight 1, factor indicators weight 0.5 each
    return same + 0.25 * (u_hot @ i_hot.T)


def _solve_offset(logits_wo_b: np.ndarray, target: float) -> float:
    lo, hi = -60.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sigmoid(logits_wo_b + mid).mean() > target:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


GROUP_WORDS = [
    "history", "mystery", "romance", "science", "travel", "cooking", "poetry", "fantasy",
    "biography", "horror", "comics", "business", "health", "music", "sports", "nature",
]
FILLER_WORDS = ["really", "quite", "very", "overall", "truly", "simply"]


def group_word(g: int) -> str:
    return GROUP_WORDS[g] if g < len(GROUP_WORDS) else f"topic{g}"


def factor_word(f: int) -> str:
    return f"facet{f}"


def synth_generate(spec: SyntheticSpec) -> tuple[Corpus, PlantedTruth]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    G, S, F = spec.groups, spec.micro_pool, spec.factors
    ug = rng.integers(0, G, spec.users)
    ig = rng.integers(0, G, spec.items)
    uf = np.sort(np.stack([rng.choice(S, F, replace=False) for _ in range(spec.users)]), axis=1)
    if_ = np.sort(np.stack([rng.choice(S, F, replace=False) for _ in range(spec.items)]), axis=1)
    base = spec.slope * _affinity(spec, ug, uf, ig, if_)
    offset = _solve_offset(base, spec.target_density)
    prob = _sigmoid(base + offset)

    hit = rng.random(prob.shape) < prob
    users, items = np.nonzero(hit)
    noisy = rng.random(users.size) < spec.interaction_noise
    items = np.where(noisy, rng.integers(0, spec.items, users.size), items)
    edges = np.unique(np.stack([users, items], axis=1), axis=0)

    group_emb = _unit(rng.standard_normal((G, spec.text_dim)))
    factor_emb = _unit(rng.standard_normal((S, spec.text_dim)))
    cold = rng.random(spec.users) < spec.cold_fraction

    uid = [f"u{k}" for k in range(spec.users)]
    iid = [f"i{k}" for k in range(spec.items)]
    present_users = sorted(set(edges[:, 0].tolist()))
    present_items = list(dict.fromkeys(edges[:, 1].tolist()))
    u_map = {u: k for k, u in enumerate(present_users)}
    i_map = {i: k for k, i in enumerate(present_items)}

    reviews, explanations = {}, {}
    review_draw = rng.random(edges.shape[0])
    for (u, i), r in zip(edges, review_draw):
        if cold[u] or r >= spec.review_rate:
            continue
        noise = spec.embed_noise * rng.standard_normal(spec.text_dim)
        key = (u_map[u], i_map[i])
        reviews[key] = _unit(group_emb[ug[u]] + group_emb[ig[i]] + noise)
        shared = sorted(set(uf[u]) & set(if_[i])) or [int(uf[u][rng.integers(F)])]
        words = [group_word(int(ug[u]))]
        if ig[i] != ug[u]:
            words.append(group_word(int(ig[i])))
        words += [factor_word(int(f)) for f in shared]
        words.append(FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))])
        explanations[key] = " ".join(words)

    micro = {}
    for u in present_users:
        if cold[u]:
            continue
        order = rng.permutation(F)
        noise = spec.embed_noise * rng.standard_normal((F, spec.text_dim))
        micro[u_map[u]] = factor_emb[uf[u][order]] + noise

    inter = np.stack([[u_map[u] for u in edges[:, 0]], [i_map[i] for i in edges[:, 1]]], axis=1).astype(np.int64)
    corpus = Corpus(
        [uid[u] for u in present_users], [iid[i] for i in present_items], inter.reshape(-1, 2),
        np.full(inter.shape[0], UNSPLIT, dtype=np.int8), reviews, micro, explanations, spec.text_dim,
    )
    truth = PlantedTruth(ug, uf, ig, if_, group_emb, factor_emb, prob)
    return corpus, truth


def fresh_intents(truth: PlantedTruth, corpus: Corpus, noise: float, seed: int) -> dict[int, np.ndarray]:
    """New noisy intent sequences for every user that has any, for held-out evaluation."""
    rng = np.random.default_rng(seed)
    out = {}
    for u in sorted(corpus.micro):
        k = int(corpus.users[u][1:])
        f = truth.user_factors[k]
        order = rng.permutation(f.size)
        out[u] = truth.factor_emb[f[order]] + noise * rng.standard_normal((f.size, truth.factor_emb.shape[1]))
    return out


CORPUS_FILES = {
    "interactions": "interactions.jsonl",
    "reviews": "reviews.jsonl",
    "intents": "intents.jsonl",
    "explanations": "explanations.jsonl",
    "truth": "truth.jsonl",
}


def write_corpus(corpus: Corpus, out_dir, truth: PlantedTruth | None = None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {k: out_dir / v for k, v in CORPUS_FILES.items()}
    labelled = corpus.is_split

    def inter():
        for k, (u, i) in enumerate(corpus.interactions):
            rec = {"user": corpus.users[u], "item": corpus.items[i]}
            if labelled:
                rec["split"] = SPLITS[corpus.split[k]]
            yield rec

    te.write_jsonl(paths["interactions"], 0, inter())
    te.write_jsonl(
        paths["reviews"], corpus.text_dim,
        ({"user": corpus.users[u], "item": corpus.items[i], "cls": v.tolist()} for (u, i), v in corpus.reviews.items()),
    )
    te.write_jsonl(
        paths["intents"], corpus.text_dim,
        ({"user": corpus.users[u], "intents": v.tolist()} for u, v in corpus.micro.items()),
    )
    te.write_jsonl(
        paths["explanations"], 0,
        ({"user": corpus.users[u], "item": corpus.items[i], "text": t} for (u, i), t in corpus.explanations.items()),
    )
    if truth is not None:
        te.write_jsonl(paths["truth"], 0, truth.records())
    else:
        del paths["truth"]
    return paths


def load_truth(path) -> dict[str, tuple[int, list[int]]]:
    _, records = te.read_jsonl(path)
    out = {}
    for line, rec in records:
        if not isinstance(rec.get("entity"), str) or not isinstance(rec.get("group"), int):
            raise te.FormatError(f"{path}:{line}: truth record needs 'entity' and integer 'group'")
        out[rec["entity"]] = (rec["group"], list(rec.get("factors", [])))
    return out
