"""Training objectives with closed-form gradients.

* sparse-aware MSE on pooled pre-activation logits (alignment pretraining)
* KL distillation over candidate sets, KL(student || teacher)
* InfoNCE over candidate sets
* L1 sparsity regularization on query and document representations
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from milco.lexecho import score_pair
from milco.repr_core import DualViewRepr, sparse_l1


# -- SMSE -------------------------------------------------------------------------


def _smse_parts(student, teacher):
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} differ in shape")
    return s, t, (s > 0) | (t > 0)


def smse_loss(student, teacher, flatten: bool = True) -> float:
    """Mean squared error over coordinates where either side is positive.

    A 2-D input is a batch of pooled logit vectors. With ``flatten`` the batch
    is treated as one long vector; otherwise each row is averaged on its own
    and the per-row losses are averaged. Empty active sets contribute 0.
    """
    s, t, active = _smse_parts(student, teacher)
    sq = np.where(active, (s - t) ** 2, 0.0)
    if flatten or s.ndim == 1:
        n = active.sum()
        return float(sq.sum() / n) if n else 0.0
    n = active.sum(axis=-1)
    per = np.divide(sq.sum(axis=-1), n, out=np.zeros(n.shape), where=n > 0)
    return float(per.mean())


def smse_grad(student, teacher, flatten: bool = True) -> np.ndarray:
    """d smse_loss / d student, holding the active mask fixed."""
    s, t, active = _smse_parts(student, teacher)
    if flatten or s.ndim == 1:
        n = active.sum()
        return np.where(active, 2.0 * (s - t) / n, 0.0) if n else np.zeros_like(s)
    n = active.sum(axis=-1, keepdims=True)
    scale = np.divide(2.0, n, out=np.zeros(n.shape), where=n > 0) / s.shape[0]
    return np.where(active, (s - t) * scale, 0.0)


# -- candidate-set losses ------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSet:
    query_id: str
    doc_ids: tuple[str, ...]
    teacher: tuple[float, ...]
    student: tuple[float, ...]
    positive: int | None = 0

    def __post_init__(self):
        n = len(self.doc_ids)
        if n < 2:
            raise ValueError("a candidate set needs at least 2 documents")
        if len(self.teacher) != n or len(self.student) != n:
            raise ValueError("teacher/student scores must match the candidate list")
        if not all(math.isfinite(x) for x in (*self.teacher, *self.student)):
            raise ValueError("candidate scores must be finite")
        if self.positive is not None and not 0 <= self.positive < n:
            raise ValueError(f"positive index {self.positive} out of range")

    def with_student(self, student: Sequence[float]) -> CandidateSet:
        return CandidateSet(self.query_id, self.doc_ids, self.teacher, tuple(float(x) for x in student),
                            self.positive)


@dataclass(frozen=True)
class LossWeights:
    alpha_q: float = 1e-3
    alpha_d: float = 1e-5

    def __post_init__(self):
        for name in ("alpha_q", "alpha_d"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")


def softmax_dist(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax needs at least one score")
    e = np.exp(x - x.max())
    return e / e.sum()


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    return x - m - np.log(np.exp(x - m).sum())


def _kl_one(student: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(P_student || P_teacher) and its gradient w.r.t. student scores."""
    log_p = _log_softmax(student)
    log_q = _log_softmax(teacher)
    p = np.exp(log_p)
    a = log_p - log_q
    kl = float(np.dot(p, a))
    return max(kl, 0.0), p * (a - kl)


def kld_loss(batch: Sequence[CandidateSet]) -> float:
    return kld_loss_and_grad(batch)[0]


def kld_loss_and_grad(batch: Sequence[CandidateSet]) -> tuple[float, list[np.ndarray]]:
    """Mean KL over the batch plus d loss / d student scores per set."""
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    total = 0.0
    grads = []
    for cs in batch:
        kl, g = _kl_one(np.asarray(cs.student, dtype=np.float64), np.asarray(cs.teacher, dtype=np.float64))
        total += kl
        grads.append(g / B)
    return total / B, grads


def infonce_loss(batch: Sequence[CandidateSet]) -> float:
    return infonce_loss_and_grad(batch)[0]


def infonce_loss_and_grad(batch: Sequence[CandidateSet]) -> tuple[float, list[np.ndarray]]:
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    total = 0.0
    grads = []
    for cs in batch:
        if cs.positive is None:
            raise ValueError(f"candidate set for {cs.query_id!r} has no positive")
        s = np.asarray(cs.student, dtype=np.float64)
        log_p = _log_softmax(s)
        total -= log_p[cs.positive]
        g = np.exp(log_p)
        g[cs.positive] -= 1.0
        grads.append(g / B)
    return total / B, grads


RANKING_LOSSES: dict[str, Callable] = {"kd": kld_loss_and_grad, "infonce": infonce_loss_and_grad}


def contrastive_loss(batch: Sequence[CandidateSet], q_reprs: Mapping[str, DualViewRepr],
                     d_reprs: Mapping[str, DualViewRepr], weights: LossWeights = LossWeights(),
                     mode: str = "kd", tol: float = 1e-9) -> float:
    """Ranking loss plus alpha_q * mean query L1 plus alpha_d * mean doc L1.

    Student scores in ``batch`` must be the dual-view dot products of the
    supplied representations.
    """
    if mode not in RANKING_LOSSES:
        raise ValueError(f"unknown contrastive mode {mode!r}")
    for cs in batch:
        q = q_reprs[cs.query_id]
        for doc_id, s in zip(cs.doc_ids, cs.student):
            expected = score_pair(q, d_reprs[doc_id])
            if abs(expected - s) > tol * max(1.0, abs(expected)):
                raise ValueError(f"student score {s} for ({cs.query_id}, {doc_id}) "
                                 f"disagrees with the representations ({expected})")
    loss, _ = RANKING_LOSSES[mode](batch)
    if q_reprs:
        loss += weights.alpha_q * math.fsum(_l1(r) for r in q_reprs.values()) / len(q_reprs)
    if d_reprs:
        loss += weights.alpha_d * math.fsum(_l1(r) for r in d_reprs.values()) / len(d_reprs)
    return loss


def _l1(rep: DualViewRepr) -> float:
    return sparse_l1(rep.english) + sparse_l1(rep.source)


# -- gradient oracle ------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = f(x)
        flat[j] = orig - eps
        lo = f(x)
        flat[j] = orig
        grad[j] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)
