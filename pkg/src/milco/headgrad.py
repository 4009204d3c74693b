"""Batched forward pass of the head with hand-written backprop.

All sequences of a batch are stacked into one ``T x d_L`` matrix of frozen
encoder states; segment offsets mark where each sequence starts. Max-pooling
routes gradient to a single row per (sequence, column): the first row that
attains the maximum.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from milco.lexecho import LN_EPS, HeadParams, TokenSeq, ToyEncoderParams, bypass_connector, toy_encode

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class SeqBatch:
    """Stacked sequences. ``H == mix @ emb``: the encoder is a window mean of embeddings,
    so the first connector layer can run through the small embedding table."""

    H: np.ndarray        # T x d_L frozen encoder output
    tokens: np.ndarray   # T source token ids
    seg: np.ndarray      # T sequence index per row
    offsets: np.ndarray  # B start rows
    mix: sp.csr_matrix   # T x vocab window-mean weights
    emb: np.ndarray      # vocab x d_L embedding table

    @classmethod
    def from_seqs(cls, seqs: Sequence[TokenSeq], enc: ToyEncoderParams) -> SeqBatch:
        if not seqs:
            raise ValueError("empty batch")
        H = np.vstack([toy_encode(s, enc) for s in seqs])
        lengths = np.array([len(s) for s in seqs])
        tokens = np.concatenate([np.asarray(s.tokens, dtype=np.int64) for s in seqs])
        seg = np.repeat(np.arange(len(seqs)), lengths)
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        pos = np.arange(len(tokens)) - offsets[seg]
        r = enc.radius
        lo = np.maximum(pos - r, 0)
        hi = np.minimum(pos + r + 1, lengths[seg])
        rows, cols, vals = [], [], []
        for shift in range(-r, r + 1):
            at = pos + shift
            ok = (at >= lo) & (at < hi)
            rows.append(np.flatnonzero(ok))
            cols.append(tokens[np.flatnonzero(ok) + shift])
            vals.append(1.0 / (hi - lo)[ok])
        mix = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(len(tokens), enc.vocab_size))
        return cls(H, tokens, seg, offsets, mix, enc.embedding)

    @property
    def size(self) -> int:
        return len(self.offsets)

    def subset(self, idx: Sequence[int]) -> SeqBatch:
        idx = np.asarray(idx)
        starts = self.offsets[idx]
        ends = np.append(self.offsets, len(self.tokens))[idx + 1]
        rows = np.concatenate([np.arange(a, b) for a, b in zip(starts, ends)])
        lengths = ends - starts
        return SeqBatch(self.H[rows], self.tokens[rows], np.repeat(np.arange(len(idx)), lengths),
                        np.concatenate([[0], np.cumsum(lengths)[:-1]]), self.mix[rows], self.emb)

    @property
    def ends(self) -> np.ndarray:
        return np.append(self.offsets[1:], len(self.tokens))


@dataclass
class Forward:
    batch: SeqBatch
    use_connector: bool
    A: np.ndarray | None       # pre-GELU
    cdf: np.ndarray | None     # Phi(A), reused by the GELU derivative
    G: np.ndarray | None       # GELU(A)
    xhat: np.ndarray | None    # normalized projection
    inv_std: np.ndarray | None
    Z: np.ndarray
    logits: np.ndarray         # T x v_e
    pooled: np.ndarray         # B x v_e, max over each sequence's rows
    argrow: np.ndarray         # B x v_e, row that attains the max
    echo_pre: np.ndarray | None  # T, absent when ECHO was skipped

    @property
    def english(self) -> np.ndarray:
        """Dense English views, B x v_e."""
        return np.log1p(np.maximum(self.pooled, 0.0))

    @property
    def echo(self) -> np.ndarray:
        return np.log1p(np.maximum(self.echo_pre, 0.0))

    def source(self, v_src: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense source views (B x v_src) and, per row, whether it holds the max.

        Repeated tokens keep the largest weight; the first row reaching it wins.
        """
        b = self.batch
        w = self.echo
        S = np.zeros((b.size, v_src))
        np.maximum.at(S, (b.seg, b.tokens), w)
        key = b.seg * v_src + b.tokens
        cand = np.flatnonzero(w == S[b.seg, b.tokens])
        _, first = np.unique(key[cand], return_index=True)
        owner = np.zeros(len(w), dtype=bool)
        owner[cand[first]] = True
        return S, owner


def _row_mean(x: np.ndarray) -> np.ndarray:
    return (x @ np.full(x.shape[1], 1.0 / x.shape[1]))[:, None]


def _col_sum(x: np.ndarray) -> np.ndarray:
    return np.ones(len(x)) @ x


def max_pool(logits: np.ndarray, batch: SeqBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence column max and the first row attaining it.

    Consecutive sequences of equal length are reduced as one (n, len, v)
    block, so batches sorted by length pool in a handful of operations.
    """
    starts = batch.offsets
    lengths = batch.ends - starts
    pooled = np.empty((len(starts), logits.shape[1]))
    argrow = np.empty(pooled.shape, dtype=np.int64)
    cuts = np.flatnonzero(np.diff(lengths)) + 1
    for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(starts)]):
        n, width, first = hi - lo, int(lengths[lo]), int(starts[lo])
        block = logits[first:first + n * width].reshape(n, width, -1)
        at = block.argmax(axis=1)
        pooled[lo:hi] = np.take_along_axis(block, at[:, None, :], axis=1)[:, 0]
        argrow[lo:hi] = at + (first + width * np.arange(n))[:, None]
    return pooled, argrow


def forward(batch: SeqBatch, p: HeadParams, use_connector: bool = True, echo: bool = True) -> Forward:
    """Run the head on a batch; ``echo=False`` skips the ECHO decoder."""
    if use_connector:
        # window-mean rows sum to one, so the first bias folds into the table
        A = batch.mix @ (batch.emb @ p.connector_w1 + p.connector_b1)
        cdf = ndtr(A)
        G = A * cdf
        P = G @ p.proj_w + p.proj_b
        xc = P - _row_mean(P)
        inv_std = 1.0 / np.sqrt(_row_mean(xc * xc) + LN_EPS)
        xhat = xc * inv_std
        Z = xhat * p.ln_gamma + p.ln_beta
    else:
        A = cdf = G = xhat = inv_std = None
        Z = bypass_connector(batch.H, p.decoder_E.shape[1])
    logits = Z @ p.decoder_E.T + p.decoder_b
    pooled, argrow = max_pool(logits, batch)
    echo_pre = Z @ p.echo_e + p.echo_b if echo else None
    return Forward(batch, use_connector, A, cdf, G, xhat, inv_std, Z, logits, pooled, argrow, echo_pre)


def backward(fwd: Forward, p: HeadParams, d_pooled: np.ndarray | None = None,
              d_echo_pre: np.ndarray | None = None) -> HeadParams:
    """Gradient w.r.t. every parameter group given upstream gradients.

    ``d_pooled`` is dLoss/d(pooled logits), B x v_e; ``d_echo_pre`` is
    dLoss/d(ECHO pre-activation), one entry per row.
    """
    g = HeadParams.zeros(p.dims)
    T = len(fwd.logits)
    dZ = np.zeros_like(fwd.Z)
    if d_pooled is not None:
        d_logits = np.zeros_like(fwd.logits)
        cols = np.broadcast_to(np.arange(d_logits.shape[1]), fwd.argrow.shape)
        d_logits[fwd.argrow, cols] = d_pooled
        g.decoder_E = d_logits.T @ fwd.Z
        g.decoder_b = np.asarray(d_pooled).sum(axis=0)
        dZ += d_logits @ p.decoder_E
    if d_echo_pre is not None:
        g.echo_e = fwd.Z.T @ d_echo_pre
        g.echo_b = np.array(d_echo_pre.sum())
        dZ += np.outer(d_echo_pre, p.echo_e)
    if not fwd.use_connector or T == 0:
        return g
    g.ln_gamma = np.einsum("ij,ij->j", dZ, fwd.xhat)
    g.ln_beta = _col_sum(dZ)
    dxhat = dZ * p.ln_gamma
    proj = np.einsum("ij,ij->i", dxhat, fwd.xhat)[:, None] / dxhat.shape[1]
    dP = fwd.inv_std * (dxhat - _row_mean(dxhat) - fwd.xhat * proj)
    g.proj_w = fwd.G.T @ dP
    g.proj_b = _col_sum(dP)
    dG = dP @ p.proj_w.T
    dA = dG * (fwd.cdf + fwd.A * np.exp(-0.5 * fwd.A * fwd.A) * _INV_SQRT_2PI)
    g.connector_w1 = fwd.batch.emb.T @ (fwd.batch.mix.T @ dA)
    g.connector_b1 = _col_sum(dA)
    return g


def logsat_grad(pre: np.ndarray) -> np.ndarray:
    """d logsat / d pre, using 0 at and below zero."""
    return np.where(pre > 0, 1.0 / (1.0 + np.maximum(pre, 0.0)), 0.0)
