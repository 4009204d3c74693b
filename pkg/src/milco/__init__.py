"""Dual-view learned sparse retrieval: English lexical view plus a source-token echo view."""

from milco.repr_core import DualViewRepr, Namespace, SparseVec, TermKey, sparse_dot
from milco.lexecho import HeadDims, HeadParams, TokenSeq, ToyEncoderParams, encode_dual_view, score_pair
from milco.index import InvertedIndex, PruneSpec, build_index, read_index, search, write_index

__all__ = [
    "DualViewRepr", "Namespace", "SparseVec", "TermKey", "sparse_dot",
    "HeadDims", "HeadParams", "TokenSeq", "ToyEncoderParams", "encode_dual_view", "score_pair",
    "InvertedIndex", "PruneSpec", "build_index", "read_index", "search", "write_index",
]
__version__ = "0.1.0"
