"""Test utilities: random sparse data, dense oracles, and a switching-aware gradient check."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from milco.lexecho import HeadDims, HeadParams
from milco.repr_core import DualViewRepr, SparseVec, TermKey

SMALL_DIMS = HeadDims(d_L=16, d_h=16, d_e=12, v_e=64, v_src=96)


def random_sparse(rng, namespace: int, size: int, nnz: int, scale: float = 1.0) -> SparseVec:
    ids = rng.choice(size, size=min(nnz, size), replace=False)
    w = rng.exponential(scale, size=len(ids)) + 1e-3
    return SparseVec({TermKey(namespace, int(i)): float(x) for i, x in zip(ids, w)})


def random_repr(rng, v_e: int = 64, v_src: int = 96, nnz_e: int = 10, nnz_s: int = 6) -> DualViewRepr:
    return DualViewRepr(random_sparse(rng, 0, v_e, nnz_e), random_sparse(rng, 1, v_src, nnz_s))


def densify(vec, v_e: int = 64, v_src: int = 96) -> np.ndarray:
    out = np.zeros(v_e + v_src)
    for k, w in vec.items():
        out[k.token_id + (v_e if k.namespace else 0)] = w
    return out


def perturbed_params(dims: HeadDims, seed: int) -> HeadParams:
    """Seeded init with every group moved off its default so all paths are exercised."""
    rng = np.random.default_rng([seed, 77])
    p = HeadParams.init(dims, seed, decoder_bias=0.0)
    p.connector_b1 = rng.normal(0, 0.3, dims.d_h)
    p.proj_b = rng.normal(0, 0.3, dims.d_e)
    p.ln_gamma = 1.0 + rng.normal(0, 0.2, dims.d_e)
    p.ln_beta = rng.normal(0, 0.2, dims.d_e)
    p.decoder_b = rng.normal(-0.3, 0.3, dims.v_e)
    p.echo_b = np.array(0.2)
    return p


def checked_gradient(loss: Callable[[np.ndarray], float], pattern: Callable[[np.ndarray], tuple],
                     x0: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Central differences plus a mask of coordinates whose stencil keeps every switch fixed.

    ``pattern`` returns the discrete state of the function (active masks, argmax
    rows). A coordinate is kept only if the pattern at x - eps and x + eps equals
    the pattern at x, so the function is smooth along the whole stencil.
    """
    x = np.array(x0, dtype=np.float64)
    base = _freeze(pattern(x))
    grad = np.zeros_like(x)
    keep = np.ones(x.size, dtype=bool)
    for j in range(x.size):
        orig = x[j]
        x[j] = orig + eps
        hi, pat_hi = loss(x), _freeze(pattern(x))
        x[j] = orig - eps
        lo, pat_lo = loss(x), _freeze(pattern(x))
        x[j] = orig
        grad[j] = (hi - lo) / (2 * eps)
        keep[j] = pat_hi == base and pat_lo == base
    return grad, keep


def _freeze(pat) -> tuple:
    return tuple(np.asarray(a).tobytes() for a in pat)


def group_errors(analytic: HeadParams, numeric: np.ndarray, keep: np.ndarray) -> dict[str, float]:
    """Relative error per parameter group over the kept coordinates.

    Groups whose analytic and numeric gradients are both below 1e-10 in norm
    report their absolute difference instead.
    """
    out = {}
    pos = 0
    for name, arr in analytic.groups().items():
        n = arr.size
        a = np.ravel(arr)[keep[pos:pos + n]]
        b = numeric[pos:pos + n][keep[pos:pos + n]]
        denom = max(np.linalg.norm(a), np.linalg.norm(b))
        diff = np.linalg.norm(a - b)
        out[name] = diff / denom if denom > 1e-10 else diff
        pos += n
    return out
