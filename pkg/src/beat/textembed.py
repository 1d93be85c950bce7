"""Text-embedding providers: hash-seeded mock vectors or precomputed file records."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .supervise import MicroIntentSequence

FORMAT = "beat-embed"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_PUNCT = str.maketrans("", "", string.punctuation)


class FormatError(ValueError):
    """A JSON-lines file is malformed; the message carries path and line number."""


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_embedding(text: str, dim: int) -> np.ndarray:
    """Unit vector drawn from a generator seeded by the FNV-1a hash of ``text``."""
    v = np.random.default_rng(fnv1a64(text)).standard_normal(dim)
    return v / np.linalg.norm(v)


class EmbeddingProvider:
    mode = "abstract"

    def __init__(self, dim: int, name: str = ""):
        if dim < 1:
            raise ValueError("embedding width must be positive")
        self.dim = int(dim)
        self.name = name or self.mode

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def lookup(self, key) -> np.ndarray:
        raise NotImplementedError


class MockProvider(EmbeddingProvider):
    mode = "mock"

    def embed_text(self, text: str) -> np.ndarray:
        return hash_embedding(text, self.dim)

    def lookup(self, key) -> np.ndarray:
        raise KeyError(f"mock provider holds no stored vector for {key!r}")


class FileProvider(EmbeddingProvider):
    """Stored vectors keyed by ``(user, item)`` (reviews) or by word."""

    mode = "file"

    def __init__(self, dim: int, table: dict, name: str = ""):
        super().__init__(dim, name)
        self.table = {}
        for key, vec in table.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ValueError(f"vector for {key!r} has width {vec.shape}, expected {self.dim}")
            self.table[key] = vec

    def embed_text(self, text: str) -> np.ndarray:
        return self.lookup(text)

    def lookup(self, key) -> np.ndarray:
        try:
            return self.table[key]
        except KeyError:
            raise KeyError(f"no stored embedding for {key!r}") from None

    @classmethod
    def from_words(cls, path) -> "FileProvider":
        """Load ``{"word": str, "vec": [...]}`` records."""
        header, records = read_jsonl(path)
        table = {}
        for line, rec in records:
            if "word" not in rec or "vec" not in rec:
                raise FormatError(f"{path}:{line}: word record needs 'word' and 'vec'")
            table[rec["word"]] = rec["vec"]
        return cls(header["dim"], table, name=str(path))


# ---------------------------------------------------------------------------
# JSON-lines


def header(dim: int) -> dict:
    return {"format": FORMAT, "version": VERSION, "dim": int(dim)}


def read_jsonl(path) -> tuple[dict, Iterator[tuple[int, dict]]]:
    """Parse the header and return (header, iterator of (line_number, record))."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}:1: missing header")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:1: bad header ({exc})") from None
    if not isinstance(head, dict) or head.get("format") != FORMAT or head.get("version") != VERSION:
        raise FormatError(f"{path}:1: expected header with format {FORMAT!r} version {VERSION}")
    if not isinstance(head.get("dim"), int) or head["dim"] < 0:
        raise FormatError(f"{path}:1: header 'dim' must be a non-negative integer")

    def records():
        for number, text in enumerate(lines[1:], start=2):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{number}: {exc}") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{number}: record must be an object")
            yield number, rec

    return head, records()


def write_jsonl(path, dim: int, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header(dim)) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _vector(path, line, value, dim) -> np.ndarray:
    vec = np.asarray(value, dtype=np.float64)
    if vec.shape != (dim,) or not np.all(np.isfinite(vec)):
        raise FormatError(f"{path}:{line}: expected {dim} finite floats")
    return vec


# ---------------------------------------------------------------------------
# reviews, intents, words


@dataclass
class ReviewRecord:
    user: str
    item: str
    cls_embedding: np.ndarray | None = None
    text: str | None = None

    def __post_init__(self):
        if (self.cls_embedding is None) == (self.text is None):
            raise ValueError(f"review ({self.user}, {self.item}) needs exactly one of an embedding or text")


def embed_cls(review: ReviewRecord, provider: EmbeddingProvider) -> np.ndarray:
    if review.cls_embedding is not None:
        vec = np.asarray(review.cls_embedding, dtype=np.float64)
        if vec.shape != (provider.dim,):
            raise ValueError(f"review ({review.user}, {review.item}) width {vec.shape} != {provider.dim}")
        return vec
    if provider.mode == "file":
        try:
            return provider.lookup((review.user, review.item))
        except KeyError:
            raise KeyError(f"no stored review embedding for (user={review.user!r}, item={review.item!r})") from None
    return provider.embed_text(review.text)


def load_reviews(path) -> tuple[int, list[ReviewRecord]]:
    head, records = read_jsonl(path)
    dim = head["dim"]
    out = []
    for line, rec in records:
        if not isinstance(rec.get("user"), str) or not isinstance(rec.get("item"), str):
            raise FormatError(f"{path}:{line}: review needs string 'user' and 'item'")
        has_cls, has_text = "cls" in rec, "text" in rec
        if has_cls == has_text:
            raise FormatError(f"{path}:{line}: review needs exactly one of 'cls' or 'text'")
        if has_cls:
            out.append(ReviewRecord(rec["user"], rec["item"], cls_embedding=_vector(path, line, rec["cls"], dim)))
        else:
            if not isinstance(rec["text"], str):
                raise FormatError(f"{path}:{line}: 'text' must be a string")
            out.append(ReviewRecord(rec["user"], rec["item"], text=rec["text"]))
    return dim, out


def load_micro_intents(path, provider: EmbeddingProvider) -> list[MicroIntentSequence]:
    """One sequence per record; vectors are read directly or embedded from ``intent_texts``."""
    head, records = read_jsonl(path)
    dim = head["dim"]
    out = []
    for line, rec in records:
        user = rec.get("user")
        if not isinstance(user, str):
            raise FormatError(f"{path}:{line}: intent record needs a string 'user'")
        if ("intents" in rec) == ("intent_texts" in rec):
            raise FormatError(f"{path}:{line}: need exactly one of 'intents' or 'intent_texts'")
        if "intents" in rec:
            raw = rec["intents"]
            if not isinstance(raw, list) or not raw:
                raise FormatError(f"{path}:{line}: empty intent list for user {user!r}")
            emb = np.stack([_vector(path, line, v, dim) for v in raw])
        else:
            texts = rec["intent_texts"]
            if not isinstance(texts, list) or not texts or not all(isinstance(s, str) for s in texts):
                raise FormatError(f"{path}:{line}: empty or non-string intent_texts for user {user!r}")
            if provider.dim != dim and dim != 0:
                raise FormatError(f"{path}:{line}: provider width {provider.dim} != file width {dim}")
            emb = np.stack([provider.embed_text(s) for s in texts])
        out.append(MicroIntentSequence(user, emb))
    return out


def tokenize_words(text: str) -> list[str]:
    return [w for w in text.lower().translate(_PUNCT).split() if w]


def embed_words(text: str, provider: EmbeddingProvider) -> list[tuple[str, np.ndarray]]:
    return [(w, provider.embed_text(w)) for w in tokenize_words(text)]
