"""Sparse lexical vectors and the exact algebra over them.

A ``SparseVec`` maps ``TermKey`` to a strictly positive weight. Keys live in
one of two namespaces: the English decoder vocabulary or the source tokenizer
vocabulary. Everything here is immutable and iterates in key order, so every
downstream output is deterministic.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple

from milco.vocab import Vocabulary


class Namespace(IntEnum):
    ENGLISH = 0
    SOURCE = 1


class TermKey(NamedTuple):
    namespace: Namespace
    token_id: int

    @classmethod
    def english(cls, token_id: int) -> TermKey:
        return cls(Namespace.ENGLISH, int(token_id))

    @classmethod
    def source(cls, token_id: int) -> TermKey:
        return cls(Namespace.SOURCE, int(token_id))

    def __repr__(self) -> str:
        tag = "e" if self.namespace == Namespace.ENGLISH else "s"
        return f"{tag}:{self.token_id}"


class SparseVec(Mapping):
    """Immutable map from TermKey to a finite, strictly positive weight."""

    __slots__ = ("_keys", "_weights", "_index")

    def __init__(self, entries: Mapping[TermKey, float] | None = None):
        entries = entries or {}
        keys = sorted(entries)
        weights = []
        for k in keys:
            w = float(entries[k])
            if not math.isfinite(w) or w <= 0.0:
                raise ValueError(f"weight for {k!r} must be finite and > 0, got {w}")
            if k.token_id < 0:
                raise ValueError(f"negative token id in {k!r}")
            weights.append(w)
        self._keys: tuple[TermKey, ...] = tuple(keys)
        self._weights: tuple[float, ...] = tuple(weights)
        self._index = dict(zip(self._keys, self._weights))

    def __getitem__(self, key: TermKey) -> float:
        return self._index[key]

    def __iter__(self) -> Iterator[TermKey]:
        return iter(self._keys)

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: object) -> bool:
        return key in self._index

    def __eq__(self, other: object) -> bool:
        if isinstance(other, SparseVec):
            return self._keys == other._keys and self._weights == other._weights
        return NotImplemented

    def __hash__(self) -> int:
        return hash((self._keys, self._weights))

    def __repr__(self) -> str:
        body = ", ".join(f"{k!r}: {w:.6g}" for k, w in zip(self._keys, self._weights))
        return f"SparseVec({{{body}}})"

    def items(self):
        return zip(self._keys, self._weights)

    def restrict(self, namespace: Namespace) -> SparseVec:
        return SparseVec({k: w for k, w in self.items() if k.namespace == namespace})

    @property
    def nnz(self) -> int:
        return len(self._keys)


@dataclass(frozen=True)
class DualViewRepr:
    """English view plus source view of one text."""

    english: SparseVec
    source: SparseVec

    def __post_init__(self):
        if any(k.namespace != Namespace.ENGLISH for k in self.english):
            raise ValueError("english view holds a non-English key")
        if any(k.namespace != Namespace.SOURCE for k in self.source):
            raise ValueError("source view holds a non-source key")

    @classmethod
    def empty(cls) -> DualViewRepr:
        return cls(SparseVec(), SparseVec())

    @classmethod
    def from_terms(cls, terms: Mapping[TermKey, float]) -> DualViewRepr:
        vec = terms if isinstance(terms, SparseVec) else SparseVec(terms)
        return cls(vec.restrict(Namespace.ENGLISH), vec.restrict(Namespace.SOURCE))

    def terms(self) -> SparseVec:
        """Both views in one vector (the namespaces never collide)."""
        merged = dict(self.english.items())
        merged.update(self.source.items())
        return SparseVec(merged)

    @property
    def nnz(self) -> int:
        return self.english.nnz + self.source.nnz


def sparse_dot(a: Mapping[TermKey, float], b: Mapping[TermKey, float]) -> float:
    if len(a) > len(b):
        a, b = b, a
    total = 0.0
    # sorted iteration keeps the float summation order fixed
    for k in sorted(a):
        w = b.get(k)
        if w is not None:
            total += a[k] * w
    return total


def sparse_l1(a: SparseVec) -> float:
    return math.fsum(a.values())


def top_k_terms(a: SparseVec, k: int) -> SparseVec:
    """The ``k`` heaviest entries; ties go to the smaller key."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k >= len(a):
        return a
    ranked = sorted(a.items(), key=lambda kw: (-kw[1], kw[0]))
    return SparseVec(dict(ranked[:k]))


def merge_max(a: SparseVec, b: SparseVec) -> SparseVec:
    merged = dict(a.items())
    for k, w in b.items():
        if w > merged.get(k, 0.0):
            merged[k] = w
    return SparseVec(merged)


def from_pairs(pairs: Iterable[tuple[TermKey, float]]) -> SparseVec:
    """Build a vector, dropping weights <= 0 and keeping the max on repeats."""
    best: dict[TermKey, float] = {}
    for key, w in pairs:
        w = float(w)
        if not math.isfinite(w):
            raise ValueError(f"non-finite weight {w} for {key!r}")
        if w <= 0.0:
            continue
        if w > best.get(key, 0.0):
            best[key] = w
    return SparseVec(best)


# -- JSONL representation files ---------------------------------------------


def repr_to_json(doc_id: str, rep: DualViewRepr, en_vocab: Vocabulary, src_vocab: Vocabulary) -> str:
    obj = {
        "id": doc_id,
        "english": {en_vocab.token(k.token_id): w for k, w in rep.english.items()},
        "source": {src_vocab.token(k.token_id): w for k, w in rep.source.items()},
    }
    return json.dumps(obj, ensure_ascii=False)


def repr_from_json(line: str, en_vocab: Vocabulary, src_vocab: Vocabulary) -> tuple[str, DualViewRepr]:
    obj = json.loads(line)
    if not isinstance(obj, dict) or "id" not in obj:
        raise ValueError("representation record needs an 'id' field")
    english = {TermKey.english(en_vocab.id(t)): w for t, w in obj.get("english", {}).items()}
    source = {TermKey.source(src_vocab.id(t)): w for t, w in obj.get("source", {}).items()}
    return str(obj["id"]), DualViewRepr(SparseVec(english), SparseVec(source))


def write_reprs_jsonl(path, records: Iterable[tuple[str, DualViewRepr]],
                      en_vocab: Vocabulary, src_vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, rep in records:
            f.write(repr_to_json(doc_id, rep, en_vocab, src_vocab))
            f.write("\n")


def read_reprs_jsonl(path, en_vocab: Vocabulary, src_vocab: Vocabulary) -> list[tuple[str, DualViewRepr]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(repr_from_json(line, en_vocab, src_vocab))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
