"""Word-vector table, phrase averaging and cosine similarity."""
from __future__ import annotations

import gzip
import hashlib
import logging
import math
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

logger = logging.getLogger(__name__)


class EmbeddingError(Exception):
    pass


class VectorFileError(EmbeddingError, ValueError):
    pass


class UndefinedSimilarity(EmbeddingError, ValueError):
    pass


class EmbeddingStore:
    """Lowercase token -> float32 vector. Immutable after construction."""

    def __init__(self, vectors: Mapping[str, np.ndarray], checksum: str = ""):
        if not vectors:
            raise EmbeddingError("empty vocabulary")
        vocab: dict[str, np.ndarray] = {}
        dim = None
        for token, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float32).reshape(-1)
            if dim is None:
                dim = arr.shape[0]
            elif arr.shape[0] != dim:
                raise EmbeddingError(f"token {token!r}: dimension {arr.shape[0]} != {dim}")
            arr.setflags(write=False)
            vocab[token.lower()] = arr
        if not dim:
            raise EmbeddingError("vectors must have positive dimension")
        self.dimension: int = dim
        self._vocab = vocab
        self.checksum = checksum

    def __contains__(self, token: str) -> bool:
        return token in self._vocab

    def __len__(self) -> int:
        return len(self._vocab)

    def get(self, token: str) -> np.ndarray | None:
        return self._vocab.get(token)

    @property
    def vocabulary(self) -> list[str]:
        return list(self._vocab)


@dataclass(frozen=True)
class PhraseVector:
    values: np.ndarray
    covered_tokens: int
    total_tokens: int


def load_vectors(path: str | os.PathLike) -> EmbeddingStore:
    """Parse a word2vec text file (plain or gzip)."""
    with open(path, "rb") as f:
        data = f.read()
    checksum = hashlib.sha256(data).hexdigest()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    lines = data.decode("utf-8").splitlines()
    if not lines:
        raise VectorFileError("line 1: missing header")
    header = lines[0].split()
    try:
        count, dim = int(header[0]), int(header[1])
        if len(header) != 2:
            raise ValueError
    except (ValueError, IndexError):
        raise VectorFileError(f"line 1: expected '<count> <dimension>', got {lines[0]!r}") from None
    rows = [(i, ln) for i, ln in enumerate(lines[1:], 2) if ln.strip()]
    if len(rows) != count:
        raise VectorFileError(f"header declares {count} rows, found {len(rows)}")
    vectors: dict[str, np.ndarray] = {}
    for lineno, line in rows:
        parts = line.rstrip().split(" ")
        if len(parts) != dim + 1:
            raise VectorFileError(f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
        token = parts[0].lower()
        try:
            vec = np.array(parts[1:], dtype=np.float32)
        except ValueError:
            raise VectorFileError(f"line {lineno}: non-numeric value") from None
        if token in vectors:
            logger.warning("line %d: duplicate token %r; last row wins", lineno, token)
        vectors[token] = vec
    return EmbeddingStore(vectors, checksum=checksum)


def embed_phrase(store: EmbeddingStore, phrase: str) -> PhraseVector | None:
    tokens = phrase.lower().split()
    hits = [v for v in (store.get(t) for t in tokens) if v is not None]
    if not hits:
        return None
    values = np.mean(np.asarray(hits, dtype=np.float64), axis=0)
    return PhraseVector(values, len(hits), len(tokens))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na2 = float(np.dot(a, a))
    nb2 = float(np.dot(b, b))
    if na2 == 0.0 or nb2 == 0.0:
        raise UndefinedSimilarity("cosine of a zero vector")
    # sqrt of the product keeps cosine(v, v) == 1.0 exactly
    value = float(np.dot(a, b)) / math.sqrt(na2 * nb2)
    return max(-1.0, min(1.0, value))


def phrase_similarity(store: EmbeddingStore, a: str, b: str) -> float | None:
    va, vb = embed_phrase(store, a), embed_phrase(store, b)
    if va is None or vb is None:
        return None
    try:
        return cosine(va.values, vb.values)
    except UndefinedSimilarity:
        return None
