import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import SMALL_DIMS, densify, perturbed_params
from milco.lexecho import (
    LN_EPS,
    HeadDims,
    HeadParams,
    TokenSeq,
    ToyEncoderParams,
    connector_forward,
    decode_logits,
    echo_weights,
    encode_dual_view,
    encode_hidden,
    encode_transcript,
    english_view,
    logsat,
    score_pair,
    toy_encode,
    toy_tokenize,
)
from milco.repr_core import DualViewRepr, SparseVec, TermKey
from milco.vocab import Vocabulary

GOLDEN = Path(__file__).parent / "golden"
E, S = TermKey.english, TermKey.source


def vocab_hello_world():
    toks = ["[UNK]", "a1", "a2", "a3", "a4", "hello", "a6", "world"]
    return Vocabulary(toks)


def tiny_params(d_e: int, v_e: int) -> HeadParams:
    return HeadParams.zeros(HeadDims(d_L=2, d_h=2, d_e=d_e, v_e=v_e, v_src=4))


# -- independent dense oracle: scalar loops and math.erf, no shared code with the package


def oracle_gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def oracle_forward(tokens, emb, radius, p):
    n = len(tokens)
    d_L = emb.shape[1]
    H = []
    for i in range(n):
        lo, hi = max(0, i - radius), min(n, i + radius + 1)
        H.append([sum(emb[tokens[t]][c] for t in range(lo, hi)) / (hi - lo) for c in range(d_L)])
    A = [[sum(H[i][k] * p.connector_w1[k][j] for k in range(d_L)) + p.connector_b1[j]
          for j in range(p.connector_w1.shape[1])] for i in range(n)]
    P = [[sum(oracle_gelu(A[i][k]) * p.proj_w[k][j] for k in range(len(A[i]))) + p.proj_b[j]
          for j in range(p.proj_w.shape[1])] for i in range(n)]
    Z = []
    for row in P:
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        Z.append([(x - mu) / math.sqrt(var + 1e-5) * g + b for x, g, b in zip(row, p.ln_gamma, p.ln_beta)])
    logits = [[sum(z[k] * p.decoder_E[j][k] for k in range(len(z))) + p.decoder_b[j]
               for j in range(p.decoder_E.shape[0])] for z in Z]
    english = [math.log1p(max(max(col), 0.0)) for col in zip(*logits)]
    echo = [math.log1p(max(sum(z[k] * p.echo_e[k] for k in range(len(z))) + float(p.echo_b), 0.0)) for z in Z]
    return {"H": H, "A": A, "P": P, "Z": Z, "logits": logits, "english": english, "echo": echo}


class TestTokenize:
    def test_exact_match(self):
        assert toy_tokenize("Hello world", vocab_hello_world()).tokens == (5, 7)

    def test_unknown_word(self):
        assert toy_tokenize("Hello zzz", vocab_hello_world()).tokens == (5, 0)

    def test_empty(self):
        with pytest.raises(ValueError):
            toy_tokenize("   ", vocab_hello_world())

    def test_longest_match_splits_words(self):
        v = Vocabulary(["[UNK]", "ab", "a", "b", "abc"])
        assert toy_tokenize("abcab ba", v).tokens == (4, 1, 3, 2)

    def test_language_tag(self):
        assert toy_tokenize("hello", vocab_hello_world(), "de").language == "de"


class TestToyEncode:
    enc = ToyEncoderParams.from_seed(3, vocab_size=10, dim=5, radius=0)

    def test_radius_zero_rows_are_embeddings(self):
        seq = TokenSeq((4, 2, 9))
        assert np.array_equal(toy_encode(seq, self.enc), self.enc.embedding[[4, 2, 9]])

    def test_single_token_any_radius(self):
        enc = ToyEncoderParams(self.enc.embedding, radius=3)
        assert np.allclose(toy_encode(TokenSeq((6,)), enc)[0], self.enc.embedding[6], rtol=0, atol=1e-15)

    def test_middle_row_is_mean_of_three(self):
        enc = ToyEncoderParams(self.enc.embedding, radius=1)
        H = toy_encode(TokenSeq((1, 2, 3)), enc)
        want = (self.enc.embedding[1] + self.enc.embedding[2] + self.enc.embedding[3]) / 3
        assert np.allclose(H[1], want, rtol=0, atol=1e-15)

    def test_seeded_and_frozen(self):
        again = ToyEncoderParams.from_seed(3, vocab_size=10, dim=5)
        assert np.array_equal(again.embedding, self.enc.embedding)
        with pytest.raises(ValueError):
            self.enc.embedding[0, 0] = 1.0

    def test_token_outside_vocab(self):
        with pytest.raises(ValueError):
            toy_encode(TokenSeq((10,)), self.enc)


class TestConnector:
    def test_gamma_zero_gives_beta(self):
        p = perturbed_params(SMALL_DIMS, 1)
        p.ln_gamma = np.zeros(SMALL_DIMS.d_e)
        H = np.random.default_rng(0).normal(size=(3, SMALL_DIMS.d_L))
        assert np.array_equal(connector_forward(H, p), np.broadcast_to(p.ln_beta, (3, SMALL_DIMS.d_e)))

    def test_layer_norm_contract(self):
        p = perturbed_params(SMALL_DIMS, 2)
        p.ln_gamma = np.full(SMALL_DIMS.d_e, 2.0)
        p.ln_beta = np.full(SMALL_DIMS.d_e, 0.5)
        Z = connector_forward(np.random.default_rng(1).normal(size=(4, SMALL_DIMS.d_L)), p)
        assert np.allclose(Z.mean(axis=1), 0.5, atol=1e-12)
        # variance is gamma^2 * var / (var + eps), just under 4
        assert np.all(Z.var(axis=1) < 4.0) and np.allclose(Z.var(axis=1), 4.0, rtol=1e-3)

    def test_matches_dense_oracle(self):
        p = perturbed_params(SMALL_DIMS, 3)
        enc = ToyEncoderParams.from_seed(3, SMALL_DIMS.v_src, SMALL_DIMS.d_L, radius=0)
        tokens = (11, 40)
        got = connector_forward(toy_encode(TokenSeq(tokens), enc), p)
        want = oracle_forward(tokens, enc.embedding, 0, p)["Z"]
        assert np.allclose(got, want, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        p = perturbed_params(SMALL_DIMS, 3)
        with pytest.raises(ValueError):
            connector_forward(np.zeros((2, SMALL_DIMS.d_L + 1)), p)

    def test_eps(self):
        assert LN_EPS == 1e-5


class TestLogSat:
    def test_examples(self):
        assert logsat(0.0) == 0.0
        assert logsat(math.e - 1) == pytest.approx(1.0, abs=1e-15)
        assert logsat(-3.0) == 0.0

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_monotone_nonnegative(self, x, y):
        lo, hi = min(x, y), max(x, y)
        assert 0.0 <= logsat(lo) <= logsat(hi)

    def test_array(self):
        assert np.array_equal(logsat(np.array([-1.0, 0.0, 1.0])), [0.0, 0.0, math.log(2)])


class TestDecode:
    def test_zero_z_gives_bias(self):
        p = perturbed_params(SMALL_DIMS, 4)
        out = decode_logits(np.zeros((2, SMALL_DIMS.d_e)), p)
        assert np.array_equal(out, np.vstack([p.decoder_b, p.decoder_b]))

    def test_identity_decoder(self):
        p = tiny_params(3, 3)
        p.decoder_E = np.eye(3)
        Z = np.random.default_rng(2).normal(size=(2, 3))
        assert np.array_equal(decode_logits(Z, p), Z)

    def test_hand_multiplied(self):
        rng = np.random.default_rng(5)
        p = tiny_params(3, 4)
        p.decoder_E = rng.normal(size=(4, 3))
        p.decoder_b = rng.normal(size=4)
        Z = rng.normal(size=(2, 3))
        want = [[sum(Z[i][k] * p.decoder_E[j][k] for k in range(3)) + p.decoder_b[j] for j in range(4)]
                for i in range(2)]
        assert np.allclose(decode_logits(Z, p), want, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            decode_logits(np.zeros((1, 5)), tiny_params(3, 3))


class TestEnglishView:
    def identity(self):
        p = tiny_params(2, 2)
        p.decoder_E = np.eye(2)
        return p

    def test_hand_example(self):
        view = english_view(np.array([[1.0, -1.0], [0.5, 2.0]]), self.identity())
        assert list(view) == [E(0), E(1)]
        assert view[E(0)] == pytest.approx(math.log1p(1.0), abs=1e-15)
        assert view[E(1)] == pytest.approx(math.log1p(2.0), abs=1e-15)

    def test_single_row(self):
        view = english_view(np.array([[0.7, -0.2]]), self.identity())
        assert list(view) == [E(0)] and view[E(0)] == pytest.approx(math.log1p(0.7), abs=1e-15)

    def test_all_clamped(self):
        assert english_view(np.array([[-1.0, 0.0], [-0.5, -2.0]]), self.identity()) == SparseVec()


class TestEcho:
    def test_zero_head(self):
        p = tiny_params(3, 2)
        assert np.array_equal(echo_weights(np.ones((4, 3)), p), np.zeros(4))

    def test_bias_only(self):
        p = tiny_params(3, 2)
        p.echo_b = np.array(math.e - 1)
        assert np.allclose(echo_weights(np.random.default_rng(0).normal(size=(3, 3)), p), 1.0, atol=1e-15)

    def test_scalar_dot_oracle(self):
        rng = np.random.default_rng(9)
        p = tiny_params(3, 2)
        p.echo_e = rng.normal(size=3)
        p.echo_b = np.array(0.3)
        Z = rng.normal(size=(5, 3))
        want = [math.log1p(max(sum(z[k] * p.echo_e[k] for k in range(3)) + 0.3, 0.0)) for z in Z]
        assert np.allclose(echo_weights(Z, p), want, rtol=0, atol=1e-15)


class TestEncodeDualView:
    enc = ToyEncoderParams.from_seed(42, SMALL_DIMS.v_src, SMALL_DIMS.d_L, radius=1)

    def test_zero_params_give_empty_views(self):
        rep = encode_dual_view(TokenSeq((1, 2, 3)), self.enc, HeadParams.zeros(SMALL_DIMS))
        assert rep == DualViewRepr.empty()

    def test_duplicate_token_keeps_max(self):
        p = perturbed_params(SMALL_DIMS, 42)
        p.echo_b = np.array(10.0)  # keep every ECHO weight positive
        seq = TokenSeq((7, 30, 7, 51))
        w = echo_weights(encode_hidden(seq, self.enc, p), p)
        assert w[0] != w[2] and min(w) > 0
        rep = encode_dual_view(seq, self.enc, p)
        assert rep.source[S(7)] == max(w[0], w[2])
        assert rep.source.nnz == 3

    def test_golden_transcript(self):
        p = HeadParams.init(SMALL_DIMS, seed=42, decoder_bias=0.0)
        seq = TokenSeq((5, 17, 60))
        got = encode_transcript(seq, self.enc, p)
        golden = json.loads((GOLDEN / "transcript_seed42.json").read_text())
        oracle = oracle_forward(seq.tokens, self.enc.embedding, 1, p)
        for name, want in golden.items():
            assert np.allclose(got[name], want, rtol=0, atol=1e-12), name
            assert np.allclose(oracle[name], want, rtol=0, atol=1e-12), name
        rep = encode_dual_view(seq, self.enc, p)
        assert np.allclose([rep.english.get(E(j), 0.0) for j in range(SMALL_DIMS.v_e)], golden["english"],
                           rtol=0, atol=1e-12)

    def test_deterministic(self):
        p = perturbed_params(SMALL_DIMS, 1)
        seq = TokenSeq((3, 4, 5, 6))
        assert encode_dual_view(seq, self.enc, p) == encode_dual_view(seq, self.enc, p)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, SMALL_DIMS.v_src - 1), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariance_at_radius_zero(self, tokens, rnd):
        enc = ToyEncoderParams(self.enc.embedding, radius=0)
        p = perturbed_params(SMALL_DIMS, 5)
        shuffled = list(tokens)
        rnd.shuffle(shuffled)
        a = encode_dual_view(TokenSeq(tokens), enc, p)
        b = encode_dual_view(TokenSeq(shuffled), enc, p)
        # equal up to summation order inside the matrix products
        assert np.allclose(densify(a.terms()), densify(b.terms()), rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, SMALL_DIMS.v_src - 1), min_size=1, max_size=8), st.data())
    def test_max_pool_stability(self, tokens, data):
        # at radius 0 a repeated token reproduces an existing row, so no column max can grow
        enc = ToyEncoderParams(self.enc.embedding, radius=0)
        p = perturbed_params(SMALL_DIMS, 6)
        extra = data.draw(st.sampled_from(tokens))
        before = encode_dual_view(TokenSeq(tokens), enc, p).english
        after = encode_dual_view(TokenSeq(tokens + [extra]), enc, p).english
        assert np.allclose(densify(before), densify(after), rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, SMALL_DIMS.v_src - 1), min_size=1, max_size=10), st.integers(0, 50))
    def test_pooling_order_agrees(self, tokens, seed):
        p = perturbed_params(SMALL_DIMS, seed)
        logits = decode_logits(encode_hidden(TokenSeq(tokens), self.enc, p), p)
        assert np.allclose(logsat(logits.max(axis=0)), logsat(logits).max(axis=0), rtol=0, atol=1e-12)


class TestScorePair:
    def test_additive(self):
        q = DualViewRepr(SparseVec({E(0): 1.0, E(1): 1.0}), SparseVec({S(3): 1.5}))
        d = DualViewRepr(SparseVec({E(0): 2.0}), SparseVec({S(3): 1.0}))
        assert score_pair(q, d) == 3.5

    def test_empty(self):
        q = DualViewRepr(SparseVec({E(0): 1.0}), SparseVec())
        assert score_pair(q, DualViewRepr.empty()) == 0.0
        assert score_pair(DualViewRepr.empty(), q) == 0.0

    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        from helpers import random_repr

        rng = np.random.default_rng(seed)
        q, d = random_repr(rng), random_repr(rng)
        assert score_pair(q, d) == score_pair(d, q)


class TestHeadParams:
    def test_round_trip(self, tmp_path):
        p = perturbed_params(SMALL_DIMS, 8)
        p.save(tmp_path / "h.bin")
        q = HeadParams.load(tmp_path / "h.bin")
        assert q.to_bytes() == p.to_bytes()
        assert (tmp_path / "h.bin").read_bytes().startswith(b"milco-head 16 16 12 64 96\n")

    def test_body_is_little_endian_float64(self):
        p = perturbed_params(SMALL_DIMS, 8)
        body = p.to_bytes().split(b"\n", 1)[1]
        assert np.array_equal(np.frombuffer(body, "<f8"), p.flat())

    def test_bad_files(self):
        data = perturbed_params(SMALL_DIMS, 8).to_bytes()
        with pytest.raises(ValueError):
            HeadParams.from_bytes(b"no header")
        with pytest.raises(ValueError):
            HeadParams.from_bytes(b"other 1 2 3 4 5\n")
        with pytest.raises(ValueError):
            HeadParams.from_bytes(data[:-8])

    def test_validation(self):
        p = perturbed_params(SMALL_DIMS, 8)
        groups = p.groups()
        groups["proj_b"] = np.zeros(3)
        with pytest.raises(ValueError):
            HeadParams(**groups, v_src=SMALL_DIMS.v_src)
        groups = p.groups()
        groups["decoder_b"] = groups["decoder_b"].copy()
        groups["decoder_b"][0] = np.nan
        with pytest.raises(ValueError):
            HeadParams(**groups, v_src=SMALL_DIMS.v_src)

    def test_flat_round_trip(self):
        p = perturbed_params(SMALL_DIMS, 9)
        assert p.flat().size == HeadParams.size(SMALL_DIMS)
        assert np.array_equal(HeadParams.from_flat(SMALL_DIMS, p.flat()).flat(), p.flat())
