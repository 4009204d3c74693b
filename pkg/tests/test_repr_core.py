import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import densify
from milco.repr_core import (
    DualViewRepr,
    Namespace,
    SparseVec,
    TermKey,
    from_pairs,
    merge_max,
    read_reprs_jsonl,
    repr_from_json,
    repr_to_json,
    sparse_dot,
    sparse_l1,
    top_k_terms,
    write_reprs_jsonl,
)
from milco.vocab import Vocabulary

E = TermKey.english
S = TermKey.source
a, b, c = E(0), E(1), E(2)

weights = st.floats(min_value=1e-3, max_value=100.0, allow_nan=False, allow_infinity=False)
keys = st.builds(TermKey, st.sampled_from([Namespace.ENGLISH, Namespace.SOURCE]), st.integers(0, 31))
vectors = st.dictionaries(keys, weights, max_size=64).map(SparseVec)


def dense(v):
    return densify(v, 32, 32)


class TestSparseVec:
    def test_rejects_nonpositive_and_nonfinite(self):
        for w in (0.0, -1.0, float("nan"), float("inf")):
            with pytest.raises(ValueError):
                SparseVec({a: w})

    def test_iterates_in_key_order(self):
        v = SparseVec({S(0): 1.0, E(5): 2.0, E(1): 3.0})
        assert list(v) == [E(1), E(5), S(0)]

    def test_restrict_and_nnz(self):
        v = SparseVec({S(0): 1.0, E(5): 2.0})
        assert v.restrict(Namespace.SOURCE) == SparseVec({S(0): 1.0})
        assert v.nnz == 2

    def test_dual_view_namespace_discipline(self):
        with pytest.raises(ValueError):
            DualViewRepr(SparseVec({S(1): 1.0}), SparseVec())
        with pytest.raises(ValueError):
            DualViewRepr(SparseVec(), SparseVec({E(1): 1.0}))

    def test_from_terms_splits_views(self):
        rep = DualViewRepr.from_terms({E(1): 1.0, S(2): 2.0})
        assert rep.english == SparseVec({E(1): 1.0}) and rep.source == SparseVec({S(2): 2.0})
        assert rep.terms() == SparseVec({E(1): 1.0, S(2): 2.0})


class TestSparseDot:
    def test_shared_key(self):
        assert sparse_dot(SparseVec({a: 1.0, b: 2.0}), SparseVec({b: 3.0, c: 4.0})) == 6.0

    def test_disjoint(self):
        assert sparse_dot(SparseVec({a: 1.0}), SparseVec({b: 1.0})) == 0.0

    def test_random_matches_dense(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            u = SparseVec({E(int(i)): float(rng.random() + 0.1) for i in rng.choice(32, 20, replace=False)})
            v = SparseVec({E(int(i)): float(rng.random() + 0.1) for i in rng.choice(32, 20, replace=False)})
            assert sparse_dot(u, v) == pytest.approx(float(dense(u) @ dense(v)), rel=1e-12)

    @given(vectors, vectors)
    def test_symmetric(self, u, v):
        assert sparse_dot(u, v) == sparse_dot(v, u)

    @given(vectors)
    def test_empty_is_zero(self, u):
        assert sparse_dot(u, from_pairs([])) == 0.0

    @given(vectors, vectors)
    def test_dense_oracle(self, u, v):
        assert sparse_dot(u, v) == pytest.approx(float(dense(u) @ dense(v)), rel=1e-12, abs=1e-12)


class TestL1:
    def test_examples(self):
        assert sparse_l1(SparseVec()) == 0.0
        assert sparse_l1(SparseVec({a: 1.5, b: 0.5})) == 2.0

    def test_fifty_random_entries(self):
        rng = np.random.default_rng(1)
        v = SparseVec({E(i): float(w) for i, w in enumerate(rng.random(50) + 0.01)})
        assert sparse_l1(v) == pytest.approx(float(np.abs(densify(v, 64, 1)).sum()), rel=1e-12)


class TestTopK:
    def test_strict_order(self):
        assert top_k_terms(SparseVec({a: 3.0, b: 2.0, c: 1.0}), 2) == SparseVec({a: 3.0, b: 2.0})

    def test_ties_prefer_smaller_key(self):
        assert top_k_terms(SparseVec({c: 1.0, b: 1.0, a: 1.0}), 2) == SparseVec({a: 1.0, b: 1.0})

    def test_english_before_source_on_ties(self):
        assert set(top_k_terms(SparseVec({S(0): 1.0, E(9): 1.0}), 1)) == {E(9)}

    def test_negative_k(self):
        with pytest.raises(ValueError):
            top_k_terms(SparseVec(), -1)

    @given(vectors)
    def test_k_equal_nnz_is_identity(self, u):
        assert top_k_terms(u, u.nnz) == u

    @given(vectors, st.integers(0, 70))
    def test_idempotent(self, u, k):
        once = top_k_terms(u, k)
        assert top_k_terms(once, k) == once

    @given(vectors, st.integers(0, 70))
    def test_l1_bound(self, u, k):
        kept = top_k_terms(u, k)
        if k >= u.nnz:
            assert sparse_l1(kept) == sparse_l1(u)
        else:
            assert sparse_l1(kept) < sparse_l1(u)

    @given(vectors, st.integers(0, 70))
    def test_dense_oracle(self, u, k):
        d = dense(u)
        # dense oracle: stable sort by (-weight, position) where position order matches TermKey order
        order = sorted(range(d.size), key=lambda i: (-d[i], i))
        want = np.zeros_like(d)
        for i in order[:min(k, u.nnz)]:
            want[i] = d[i]
        assert np.array_equal(dense(top_k_terms(u, k)), want)


class TestMergeMax:
    def test_examples(self):
        assert merge_max(SparseVec({a: 1.0}), SparseVec({a: 3.0})) == SparseVec({a: 3.0})
        x = SparseVec({b: 2.0})
        assert merge_max(SparseVec(), x) == x

    @given(vectors, vectors)
    def test_dense_oracle(self, u, v):
        assert np.array_equal(dense(merge_max(u, v)), np.maximum(dense(u), dense(v)))


class TestFromPairs:
    def test_duplicate_keeps_max(self):
        assert from_pairs([(a, 1.0), (a, 2.0)]) == SparseVec({a: 2.0})

    def test_nonpositive_dropped(self):
        assert from_pairs([(a, 0.0), (b, -1.0)]) == SparseVec()

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            from_pairs([(a, math.nan)])

    @given(st.lists(st.tuples(keys, st.floats(-10, 10, allow_nan=False))))
    def test_invariants(self, pairs):
        v = from_pairs(pairs)
        assert all(w > 0 for w in v.values())
        for k, w in v.items():
            assert w == max(x for kk, x in pairs if kk == k)


class TestJsonl:
    en = Vocabulary(["the", "cat", "dog"])
    src = Vocabulary(["[UNK]", "gato", "perro"])

    def test_line_format(self):
        rep = DualViewRepr(SparseVec({E(1): 0.5}), SparseVec({S(2): 1.25}))
        line = repr_to_json("d1", rep, self.en, self.src)
        assert line == '{"id": "d1", "english": {"cat": 0.5}, "source": {"perro": 1.25}}'
        assert repr_from_json(line, self.en, self.src) == ("d1", rep)

    def test_file_round_trip(self, tmp_path):
        recs = [("x", DualViewRepr(SparseVec({E(0): 0.1 + 0.2}), SparseVec())),
                ("y", DualViewRepr.empty())]
        write_reprs_jsonl(tmp_path / "r.jsonl", recs, self.en, self.src)
        assert read_reprs_jsonl(tmp_path / "r.jsonl", self.en, self.src) == recs

    def test_unknown_token_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "english": {}}\n{"id": "b", "english": {"zebra": 1.0}}\n')
        with pytest.raises(ValueError, match=":2:"):
            read_reprs_jsonl(path, self.en, self.src)

    def test_missing_id(self):
        with pytest.raises(ValueError):
            repr_from_json('{"english": {}}', self.en, self.src)


class TestVocabulary:
    def test_ids_are_line_numbers(self, tmp_path):
        path = tmp_path / "v.txt"
        path.write_text("[UNK]\nhello\nworld\n")
        v = Vocabulary.load(path)
        assert v.id("world") == 2 and v.token(1) == "hello" and v.unk_id == 0
        v.save(tmp_path / "w.txt")
        assert (tmp_path / "w.txt").read_text() == path.read_text()

    def test_rejects_duplicates_and_blank(self):
        with pytest.raises(ValueError):
            Vocabulary(["a", "a"])
        with pytest.raises(ValueError):
            Vocabulary(["a", ""])

    def test_unknown_lookups(self):
        v = Vocabulary(["a"])
        with pytest.raises(KeyError):
            v.id("b")
        with pytest.raises(KeyError):
            v.token(3)
        assert v.get("b") is None
