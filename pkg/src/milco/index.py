"""Impact inverted index over dual-view representations.

Documents are pruned, their weights rounded to float32, and inverted into one
posting list per ``TermKey``. Query evaluation is exhaustive over every
document that shares a term with the query; ``brute_force_search`` is the
linear-scan oracle it must agree with exactly.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from milco.lexecho import score_pair
from milco.repr_core import DualViewRepr, Namespace, SparseVec, TermKey, top_k_terms

MAGIC = b"MILX"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQI")  # magic, version, |V_e|, |V_src|, docs, body length, crc32
_DICT_ENTRY = struct.Struct("<BIQIf")  # namespace, token id, offset, list length, max weight


# -- pruning ------------------------------------------------------------------


@dataclass(frozen=True)
class PruneSpec:
    """``none``, ``topk`` (keep k) or ``mass`` (drop the p-tail percentile)."""

    mode: str = "none"
    k: int = 0
    p: float = 0.0
    basis: str = "count"

    def __post_init__(self):
        if self.mode not in ("none", "topk", "mass"):
            raise ValueError(f"unknown prune mode {self.mode!r}")
        if self.mode == "topk" and self.k < 0:
            raise ValueError("topk needs k >= 0")
        if self.mode == "mass":
            if not 0 <= self.p <= 100:
                raise ValueError("mass pruning needs 0 <= p <= 100")
            if self.basis not in ("count", "weight"):
                raise ValueError(f"unknown mass basis {self.basis!r}")

    @classmethod
    def none(cls) -> PruneSpec:
        return cls()

    @classmethod
    def topk(cls, k: int) -> PruneSpec:
        return cls("topk", k=int(k))

    @classmethod
    def mass(cls, p: float, basis: str = "count") -> PruneSpec:
        return cls("mass", p=p, basis=basis)

    @classmethod
    def parse(cls, text: str) -> PruneSpec:
        """Parse ``none | topk:<k> | mass:<p>:<count|weight>``."""
        parts = text.strip().lower().split(":")
        try:
            if parts == ["none"]:
                return cls.none()
            if parts[0] == "topk" and len(parts) == 2:
                return cls.topk(int(parts[1]))
            if parts[0] == "mass" and len(parts) in (2, 3):
                p = float(parts[1])
                if not math.isfinite(p):
                    raise ValueError
                return cls.mass(p, parts[2] if len(parts) == 3 else "count")
        except ValueError as exc:
            raise ValueError(f"bad prune spec {text!r}: {exc}") from None
        raise ValueError(f"bad prune spec {text!r}; expected none | topk:K | mass:P:count|weight")

    def __str__(self) -> str:
        if self.mode == "topk":
            return f"topk:{self.k}"
        if self.mode == "mass":
            return f"mass:{self.p:g}:{self.basis}"
        return "none"


def mass_keep_count(nnz: int, p: float) -> int:
    """ceil((100 - p)% of nnz), computed exactly."""
    frac = Fraction(str(p))
    return math.ceil((100 - frac) * nnz / 100)


def prune(rep: DualViewRepr, spec: PruneSpec) -> DualViewRepr:
    if spec.mode == "none":
        return rep
    terms = rep.terms()
    if spec.mode == "topk":
        return DualViewRepr.from_terms(top_k_terms(terms, spec.k))
    if spec.basis == "count":
        return DualViewRepr.from_terms(top_k_terms(terms, mass_keep_count(len(terms), spec.p)))
    # weight basis: shed the lightest entries while the shed mass stays within p%
    ranked = sorted(terms.items(), key=lambda kw: (-kw[1], kw[0]))
    budget = float(Fraction(str(spec.p)) / 100) * math.fsum(w for _, w in ranked)
    removed = 0.0
    keep = len(ranked)
    while keep > 0 and removed + ranked[keep - 1][1] <= budget:
        removed += ranked[keep - 1][1]
        keep -= 1
    return DualViewRepr.from_terms(dict(ranked[:keep]))


def quantize(rep: DualViewRepr) -> DualViewRepr:
    """Round every weight to float32 (values that underflow to 0 are dropped)."""
    def q(vec: SparseVec) -> SparseVec:
        out = {}
        for k, w in vec.items():
            w32 = float(np.float32(w))
            if w32 > 0.0 and math.isfinite(w32):
                out[k] = w32
        return SparseVec(out)
    return DualViewRepr(q(rep.english), q(rep.source))


# -- the index ----------------------------------------------------------------


class IndexFormatError(ValueError):
    pass


class BadMagicError(IndexFormatError):
    pass


class VersionMismatchError(IndexFormatError):
    pass


class TruncatedIndexError(IndexFormatError):
    pass


class ChecksumError(IndexFormatError):
    pass


class InvertedIndex:
    def __init__(self, vocab_sizes: tuple[int, int], doc_ids: Sequence[str], doc_nnz: Sequence[int],
                 postings: dict[TermKey, tuple[np.ndarray, np.ndarray]]):
        self.vocab_sizes = (int(vocab_sizes[0]), int(vocab_sizes[1]))
        self.doc_ids: tuple[str, ...] = tuple(doc_ids)
        self.doc_nnz: tuple[int, ...] = tuple(int(n) for n in doc_nnz)
        self._postings: dict[TermKey, tuple[np.ndarray, np.ndarray]] = {}
        for key in sorted(postings):
            ords, ws = postings[key]
            ords = np.array(ords, dtype=np.int64)
            ws = np.array(ws, dtype=np.float32)
            if len(ords) == 0 or np.any(np.diff(ords) <= 0) or np.any(ws <= 0):
                raise ValueError(f"malformed posting list for {key!r}")
            if ords[0] < 0 or ords[-1] >= len(self.doc_ids):
                raise ValueError(f"posting list for {key!r} points outside the doc table")
            limit = self.vocab_sizes[int(key.namespace)]
            if key.token_id >= limit:
                raise ValueError(f"{key!r} outside vocabulary of size {limit}")
            ords.flags.writeable = False
            ws.flags.writeable = False
            self._postings[key] = (ords, ws)
        self.frozen = True

    def __len__(self) -> int:
        return len(self.doc_ids)

    def terms(self) -> list[TermKey]:
        return list(self._postings)

    def posting(self, key: TermKey) -> tuple[np.ndarray, np.ndarray] | None:
        return self._postings.get(key)

    def max_weight(self, key: TermKey) -> float:
        entry = self._postings.get(key)
        return float(entry[1].max()) if entry else 0.0

    def lookup(self, ordinal: int, key: TermKey) -> float:
        entry = self._postings.get(key)
        if entry is None:
            return 0.0
        ords, ws = entry
        i = int(np.searchsorted(ords, ordinal))
        if i < len(ords) and ords[i] == ordinal:
            return float(ws[i])
        return 0.0

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def build_index(docs: Iterable[tuple[str, DualViewRepr]], spec: PruneSpec = PruneSpec(),
                vocab_sizes: tuple[int, int] | None = None) -> InvertedIndex:
    ids: list[str] = []
    nnz: list[int] = []
    lists: dict[TermKey, tuple[list[int], list[float]]] = {}
    seen = set()
    max_id = [-1, -1]
    for ordinal, (doc_id, rep) in enumerate(docs):
        if doc_id in seen:
            raise ValueError(f"duplicate document id {doc_id!r}")
        seen.add(doc_id)
        ids.append(doc_id)
        rep = quantize(prune(rep, spec))
        nnz.append(rep.nnz)
        for key, w in rep.terms().items():
            ords, ws = lists.setdefault(key, ([], []))
            ords.append(ordinal)
            ws.append(w)
            max_id[int(key.namespace)] = max(max_id[int(key.namespace)], key.token_id)
    if vocab_sizes is None:
        vocab_sizes = (max_id[0] + 1, max_id[1] + 1)
    return InvertedIndex(vocab_sizes, ids, nnz, lists)


# -- query evaluation -----------------------------------------------------------


def _rank(scored: Iterable[tuple[str, float]], top_n: int) -> list[tuple[str, float]]:
    return sorted(scored, key=lambda ds: (-ds[1], ds[0]))[:max(top_n, 0)]


def search(idx: InvertedIndex, q: DualViewRepr, top_n: int = 10,
           q_spec: PruneSpec = PruneSpec()) -> list[tuple[str, float]]:
    """Exact top-n by dual-view dot product; ties go to the smaller doc id."""
    if top_n <= 0 or len(idx) == 0:
        return []
    q = prune(q, q_spec)
    n = len(idx)
    parts = []
    touched = np.zeros(n, dtype=bool)
    # each view accumulates in key order so scores match sparse_dot bit for bit
    for view in (q.english, q.source):
        acc = np.zeros(n, dtype=np.float64)
        for key, qw in view.items():
            entry = idx.posting(key)
            if entry is None:
                continue
            ords, ws = entry
            acc[ords] += qw * ws.astype(np.float64)
            touched[ords] = True
        parts.append(acc)
    scores = parts[0] + parts[1]
    hits = np.flatnonzero(touched)
    return _rank(((idx.doc_ids[i], float(scores[i])) for i in hits), top_n)


def search_many(idx: InvertedIndex, queries: Sequence[tuple[str, DualViewRepr]], top_n: int,
                q_spec: PruneSpec = PruneSpec(), threads: int = 1) -> dict[str, list[tuple[str, float]]]:
    def one(item):
        return item[0], search(idx, item[1], top_n, q_spec)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(item) for item in queries]
    return dict(results)


def brute_force_search(docs: Sequence[tuple[str, DualViewRepr]], q: DualViewRepr, top_n: int = 10,
                       doc_spec: PruneSpec = PruneSpec(), q_spec: PruneSpec = PruneSpec()
                       ) -> list[tuple[str, float]]:
    """Linear-scan oracle for ``search``: same pruning, quantization and tie rule."""
    if top_n <= 0:
        return []
    q = prune(q, q_spec)
    q_keys = set(q.english) | set(q.source)
    scored = []
    for doc_id, rep in docs:
        d = quantize(prune(rep, doc_spec))
        if q_keys.isdisjoint(d.english) and q_keys.isdisjoint(d.source):
            continue
        scored.append((doc_id, score_pair(q, d)))
    return _rank(scored, top_n)


# -- binary format --------------------------------------------------------------


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    shift = 0
    value = 0
    while True:
        if pos >= len(buf):
            raise TruncatedIndexError("varint runs past the end of the postings block")
        b = buf[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise IndexFormatError("varint too long")


def to_bytes(idx: InvertedIndex) -> bytes:
    postings = io.BytesIO()
    dictionary = io.BytesIO()
    terms = idx.terms()
    dictionary.write(struct.pack("<I", len(terms)))
    for key in terms:
        ords, ws = idx.posting(key)
        offset = postings.tell()
        prev = -1
        for o, w in zip(ords.tolist(), ws.tolist()):
            postings.write(_varint(o - prev - 1))
            postings.write(struct.pack("<f", w))
            prev = o
        dictionary.write(_DICT_ENTRY.pack(int(key.namespace), key.token_id, offset, len(ords), float(ws.max())))
    blob = postings.getvalue()
    body = io.BytesIO()
    body.write(dictionary.getvalue())
    body.write(struct.pack("<Q", len(blob)))
    body.write(blob)
    for doc_id, n in zip(idx.doc_ids, idx.doc_nnz):
        raw = doc_id.encode("utf-8")
        body.write(struct.pack("<I", len(raw)))
        body.write(raw)
        body.write(struct.pack("<I", n))
    payload = body.getvalue()
    header = _HEADER.pack(MAGIC, VERSION, idx.vocab_sizes[0], idx.vocab_sizes[1], len(idx),
                          len(payload), zlib.crc32(payload))
    return header + payload


def from_bytes(data: bytes) -> InvertedIndex:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedIndexError("file shorter than the index header")
    _, version, v_en, v_src, n_docs, body_len, crc = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionMismatchError(f"index version {version}, this reader handles {VERSION}")
    body = data[_HEADER.size:]
    if len(body) != body_len:
        raise TruncatedIndexError(f"body holds {len(body)} bytes, header says {body_len}")
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch in index body")

    pos = 0

    def take(fmt: struct.Struct | str):
        nonlocal pos
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        if pos + s.size > len(body):
            raise TruncatedIndexError("index body ends mid-record")
        vals = s.unpack_from(body, pos)
        pos += s.size
        return vals

    (n_terms,) = take("<I")
    entries = [take(_DICT_ENTRY) for _ in range(n_terms)]
    (blob_len,) = take("<Q")
    if pos + blob_len > len(body):
        raise TruncatedIndexError("postings block truncated")
    blob = body[pos:pos + blob_len]
    pos += blob_len
    postings = {}
    for ns, token_id, offset, length, _max_w in entries:
        if ns not in (0, 1):
            raise IndexFormatError(f"unknown namespace byte {ns}")
        p = offset
        ords, ws = [], []
        prev = -1
        for _ in range(length):
            delta, p = _read_varint(blob, p)
            if p + 4 > len(blob):
                raise TruncatedIndexError("posting weight truncated")
            prev = prev + delta + 1
            ords.append(prev)
            ws.append(struct.unpack_from("<f", blob, p)[0])
            p += 4
        postings[TermKey(Namespace(ns), token_id)] = (ords, ws)
    ids, nnz = [], []
    for _ in range(n_docs):
        (length,) = take("<I")
        if pos + length > len(body):
            raise TruncatedIndexError("doc id truncated")
        ids.append(body[pos:pos + length].decode("utf-8"))
        pos += length
        nnz.append(take("<I")[0])
    if pos != len(body):
        raise IndexFormatError(f"{len(body) - pos} trailing bytes after doc table")
    try:
        return InvertedIndex((v_en, v_src), ids, nnz, postings)
    except ValueError as exc:
        raise IndexFormatError(str(exc)) from exc


def write_index(idx: InvertedIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(idx))


def read_index(path) -> InvertedIndex:
    with open(path, "rb") as f:
        return from_bytes(f.read())
