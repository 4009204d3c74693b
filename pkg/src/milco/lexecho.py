"""The dual-view lexical head and its frozen toy encoder.

Pipeline for one text::

    tokens -> toy_encode -> H (n x d_L)
           -> connector: LayerNorm(GELU(H W1 + b1) Wp + bp) -> Z (n x d_e)
           -> decoder logits Z E^T + b -> logsat -> max over rows -> English view
           -> ECHO row: logsat(Z e + b_echo) per token -> source view

The toy encoder is a fixed random embedding table averaged over a small
window; it stands in for a pretrained multilingual transformer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from milco.repr_core import DualViewRepr, SparseVec, TermKey, from_pairs, sparse_dot
from milco.vocab import Vocabulary

LN_EPS = 1e-5


@dataclass(frozen=True)
class HeadDims:
    d_L: int = 96
    d_h: int = 64
    d_e: int = 64
    v_e: int = 64
    v_src: int = 96

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.d_L, self.d_h, self.d_e, self.v_e, self.v_src)


DEFAULT_DIMS = HeadDims()


# -- tokens and the frozen encoder -----------------------------------------------


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    language: str = "xx"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError("a token sequence needs at least one token")
        if min(self.tokens) < 0:
            raise ValueError("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.tokens)


def _split_word(word: str, vocab: Vocabulary) -> list[int] | None:
    pieces = []
    i = 0
    while i < len(word):
        for j in range(len(word), i, -1):
            tid = vocab.get(word[i:j])
            if tid is not None:
                pieces.append(tid)
                i = j
                break
        else:
            return None
    return pieces


def toy_tokenize(text: str, vocab: Vocabulary, language: str = "xx") -> TokenSeq:
    """Lowercase, split on whitespace, greedy longest-match each word.

    A word that cannot be fully covered by vocabulary pieces becomes one UNK.
    """
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize empty text")
    ids: list[int] = []
    for w in words:
        pieces = _split_word(w, vocab)
        if pieces is None:
            ids.append(vocab.unk_id)
        else:
            ids.extend(pieces)
    return TokenSeq(tuple(ids), language)


@dataclass(frozen=True)
class ToyEncoderParams:
    embedding: np.ndarray  # v_src x d_L
    radius: int = 1

    @classmethod
    def from_seed(cls, seed: int, vocab_size: int = DEFAULT_DIMS.v_src, dim: int = DEFAULT_DIMS.d_L,
                  radius: int = 1) -> ToyEncoderParams:
        rng = np.random.default_rng([seed, 0xE4C0])
        emb = rng.standard_normal((vocab_size, dim))
        emb.flags.writeable = False
        return cls(emb, int(radius))

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]


def toy_encode(seq: TokenSeq, enc: ToyEncoderParams) -> np.ndarray:
    """Row i is the mean embedding over the window [i - r, i + r], clipped."""
    if max(seq.tokens) >= enc.vocab_size:
        raise ValueError(f"token id {max(seq.tokens)} outside encoder vocabulary of {enc.vocab_size}")
    rows = enc.embedding[list(seq.tokens)]
    n, r = len(rows), enc.radius
    total = np.zeros_like(rows)
    count = np.zeros(n)
    for shift in range(-r, r + 1):
        lo, hi = max(0, -shift), min(n, n - shift)
        if lo < hi:
            total[lo:hi] += rows[lo + shift:hi + shift]
            count[lo:hi] += 1
    return total / count[:, None]


# -- trainable head -------------------------------------------------------------------


@dataclass
class HeadParams:
    connector_w1: np.ndarray  # d_L x d_h
    connector_b1: np.ndarray  # d_h
    proj_w: np.ndarray        # d_h x d_e
    proj_b: np.ndarray        # d_e
    ln_gamma: np.ndarray      # d_e
    ln_beta: np.ndarray       # d_e
    decoder_E: np.ndarray     # v_e x d_e
    decoder_b: np.ndarray     # v_e
    echo_e: np.ndarray        # d_e
    echo_b: np.ndarray        # scalar, 0-d
    v_src: int = DEFAULT_DIMS.v_src  # recorded for the file header only

    def __post_init__(self):
        for name in self.names():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        d = self.dims
        expected = {
            "connector_w1": (d.d_L, d.d_h), "connector_b1": (d.d_h,), "proj_w": (d.d_h, d.d_e),
            "proj_b": (d.d_e,), "ln_gamma": (d.d_e,), "ln_beta": (d.d_e,), "decoder_E": (d.v_e, d.d_e),
            "decoder_b": (d.v_e,), "echo_e": (d.d_e,), "echo_b": (),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dims(self) -> HeadDims:
        d_L, d_h = self.connector_w1.shape
        v_e, d_e = self.decoder_E.shape
        return HeadDims(d_L, d_h, d_e, v_e, self.v_src)

    @staticmethod
    def names() -> tuple[str, ...]:
        return _ARRAY_FIELDS

    @classmethod
    def init(cls, dims: HeadDims = DEFAULT_DIMS, seed: int = 0, decoder_bias: float = -1.0) -> HeadParams:
        """Random head whose decoder starts sparse (negative bias)."""
        rng = np.random.default_rng([seed, 0x4EAD])
        p = cls(
            connector_w1=rng.normal(0.0, dims.d_L ** -0.5, (dims.d_L, dims.d_h)),
            connector_b1=np.zeros(dims.d_h),
            proj_w=rng.normal(0.0, dims.d_h ** -0.5, (dims.d_h, dims.d_e)),
            proj_b=np.zeros(dims.d_e),
            ln_gamma=np.ones(dims.d_e),
            ln_beta=np.zeros(dims.d_e),
            decoder_E=rng.normal(0.0, dims.d_e ** -0.5, (dims.v_e, dims.d_e)),
            decoder_b=np.full(dims.v_e, float(decoder_bias)),
            echo_e=rng.normal(0.0, dims.d_e ** -0.5, dims.d_e),
            echo_b=np.array(0.0),
            v_src=dims.v_src,
        )
        return p

    @classmethod
    def zeros(cls, dims: HeadDims = DEFAULT_DIMS) -> HeadParams:
        return cls.from_flat(dims, np.zeros(cls.size(dims)))

    @staticmethod
    def size(dims: HeadDims) -> int:
        d = dims
        return d.d_L * d.d_h + d.d_h + d.d_h * d.d_e + 3 * d.d_e + d.v_e * d.d_e + d.v_e + d.d_e + 1

    def groups(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, n)) for n in self.names()])

    @classmethod
    def from_flat(cls, dims: HeadDims, vec: np.ndarray) -> HeadParams:
        d = dims
        shapes = [(d.d_L, d.d_h), (d.d_h,), (d.d_h, d.d_e), (d.d_e,), (d.d_e,), (d.d_e,),
                  (d.v_e, d.d_e), (d.v_e,), (d.d_e,), ()]
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != cls.size(dims):
            raise ValueError(f"flat vector has {vec.size} entries, expected {cls.size(dims)}")
        parts, pos = [], 0
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            parts.append(vec[pos:pos + n].reshape(shape).copy())
            pos += n
        return cls(*parts, v_src=dims.v_src)

    def copy(self) -> HeadParams:
        return HeadParams.from_flat(self.dims, self.flat())

    # serialization: header line of dims, then float64 little-endian in field order
    def to_bytes(self) -> bytes:
        d = self.dims
        header = "milco-head {} {} {} {} {}\n".format(*d.as_tuple()).encode("ascii")
        return header + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> HeadParams:
        nl = data.find(b"\n")
        if nl < 0:
            raise ValueError("head params file has no header line")
        parts = data[:nl].decode("ascii", "replace").split()
        if len(parts) != 6 or parts[0] != "milco-head":
            raise ValueError(f"bad head params header {data[:nl]!r}")
        dims = HeadDims(*(int(x) for x in parts[1:]))
        body = data[nl + 1:]
        if len(body) != 8 * cls.size(dims):
            raise ValueError(f"head params body has {len(body)} bytes, expected {8 * cls.size(dims)}")
        return cls.from_flat(dims, np.frombuffer(body, dtype="<f8"))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> HeadParams:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


_ARRAY_FIELDS = ("connector_w1", "connector_b1", "proj_w", "proj_b", "ln_gamma", "ln_beta",
                 "decoder_E", "decoder_b", "echo_e", "echo_b")


# -- forward pieces --------------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    return x * ndtr(x)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def connector_forward(H: np.ndarray, p: HeadParams) -> np.ndarray:
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if H.shape[1] != p.connector_w1.shape[0]:
        raise ValueError(f"hidden states have width {H.shape[1]}, connector expects {p.connector_w1.shape[0]}")
    hidden = gelu(H @ p.connector_w1 + p.connector_b1)
    return layer_norm(hidden @ p.proj_w + p.proj_b, p.ln_gamma, p.ln_beta)


def bypass_connector(H: np.ndarray, d_e: int) -> np.ndarray:
    """No-connector ablation: feed hidden states straight to the decoder."""
    H = np.atleast_2d(H)
    if H.shape[1] >= d_e:
        return H[:, :d_e].copy()
    return np.hstack([H, np.zeros((H.shape[0], d_e - H.shape[1]))])


def logsat(x):
    """log(1 + relu(x)); works on scalars and arrays."""
    if np.isscalar(x):
        return float(np.log1p(max(float(x), 0.0)))
    return np.log1p(np.maximum(x, 0.0))


def decode_logits(Z: np.ndarray, p: HeadParams) -> np.ndarray:
    Z = np.atleast_2d(Z)
    if Z.shape[1] != p.decoder_E.shape[1]:
        raise ValueError(f"Z has width {Z.shape[1]}, decoder expects {p.decoder_E.shape[1]}")
    return Z @ p.decoder_E.T + p.decoder_b


def english_view(Z: np.ndarray, p: HeadParams) -> SparseVec:
    t = logsat(decode_logits(Z, p)).max(axis=0)
    return SparseVec({TermKey.english(j): float(t[j]) for j in np.flatnonzero(t > 0)})


def echo_weights(Z: np.ndarray, p: HeadParams) -> np.ndarray:
    Z = np.atleast_2d(Z)
    return logsat(Z @ p.echo_e + p.echo_b)


def encode_hidden(seq: TokenSeq, enc: ToyEncoderParams, p: HeadParams, use_connector: bool = True) -> np.ndarray:
    H = toy_encode(seq, enc)
    return connector_forward(H, p) if use_connector else bypass_connector(H, p.decoder_E.shape[1])


def encode_dual_view(seq: TokenSeq, enc: ToyEncoderParams, p: HeadParams,
                     use_connector: bool = True) -> DualViewRepr:
    Z = encode_hidden(seq, enc, p, use_connector)
    w = echo_weights(Z, p)
    source = from_pairs((TermKey.source(s), float(wi)) for s, wi in zip(seq.tokens, w))
    return DualViewRepr(english_view(Z, p), source)


def score_pair(q: DualViewRepr, d: DualViewRepr) -> float:
    """Unweighted sum of the English-view and source-view dot products."""
    return sparse_dot(q.english, d.english) + sparse_dot(q.source, d.source)


def encode_transcript(seq: TokenSeq, enc: ToyEncoderParams, p: HeadParams) -> dict[str, np.ndarray]:
    """Every intermediate matrix of the forward pass, for golden-file checks."""
    H = toy_encode(seq, enc)
    A = H @ p.connector_w1 + p.connector_b1
    P = gelu(A) @ p.proj_w + p.proj_b
    Z = layer_norm(P, p.ln_gamma, p.ln_beta)
    logits = decode_logits(Z, p)
    return {"H": H, "A": A, "P": P, "Z": Z, "logits": logits,
            "english": logsat(logits).max(axis=0), "echo": echo_weights(Z, p)}
