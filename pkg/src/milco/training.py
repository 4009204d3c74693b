"""Desk-scale two-stage training on synthetic languages.

The toy world has an English vocabulary and one shared source tokenizer
vocabulary. Every foreign word translates to exactly one English word (a few
English words have two foreign surface forms); distractor tokens are noise;
entity tokens have no English counterpart at all, so only the source view can
match them.

Stage 1 (alignment pretraining) pulls the pooled English-view logits of a
foreign sentence toward a synthetic teacher's logits for its translation.
Stage 2 (contrastive training) fits candidate-set score distributions from a
synthetic cross-encoder, with L1 regularization on both sides.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property

import numpy as np

from milco import headgrad
from milco.evaluation import Judgments, evaluate_run
from milco.headgrad import Forward, SeqBatch
from milco.index import PruneSpec, build_index, search_many
from milco.lexecho import HeadDims, HeadParams, TokenSeq, ToyEncoderParams, logsat
from milco.losses import CandidateSet, LossWeights, RANKING_LOSSES, smse_grad, smse_loss
from milco.repr_core import DualViewRepr, SparseVec, TermKey, top_k_terms
from milco.vocab import UNK, Vocabulary

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


# -- the synthetic world --------------------------------------------------------------


@dataclass(frozen=True)
class ToyWorld:
    """Vocabulary layout of the synthetic languages.

    Source id 0 is UNK, then one primary translation per English word, then
    synonyms (a second foreign surface form for some English words), then
    distractors, then entities.
    """

    v_e: int
    v_src: int
    en_to_src: tuple[int, ...]
    synonyms: tuple[tuple[int, int], ...]  # (source id, English id)
    distractors: tuple[int, ...]
    entities: tuple[int, ...]
    expansion: tuple[int, ...]  # English id -> partner English id, or -1

    @classmethod
    def build(cls, seed: int = 42, v_e: int = 64, v_src: int = 96, n_synonyms: int = 8,
              n_distractors: int = 8, expansion_rate: float = 0.5) -> ToyWorld:
        if v_src < 1 + v_e + n_synonyms + n_distractors + 1:
            raise ValueError("source vocabulary too small for this layout")
        rng = np.random.default_rng([seed, 0x3031])
        perm = rng.permutation(v_e)
        en_to_src = tuple(int(1 + perm[j]) for j in range(v_e))
        base = 1 + v_e
        syn_en = sorted(int(j) for j in rng.choice(v_e, size=n_synonyms, replace=False))
        synonyms = tuple((base + i, j) for i, j in enumerate(syn_en))
        base += n_synonyms
        distractors = tuple(range(base, base + n_distractors))
        entities = tuple(range(base + n_distractors, v_src))
        partners = rng.permutation(v_e)
        expansion = tuple(int(partners[j]) if partners[j] != j and rng.random() < expansion_rate else -1
                          for j in range(v_e))
        return cls(v_e, v_src, en_to_src, synonyms, distractors, entities, expansion)

    def without_expansion(self) -> ToyWorld:
        return ToyWorld(self.v_e, self.v_src, self.en_to_src, self.synonyms, self.distractors, self.entities,
                        (-1,) * self.v_e)

    @cached_property
    def src_to_en(self) -> dict[int, int]:
        out = {s: j for j, s in enumerate(self.en_to_src)}
        out.update(self.synonyms)
        return out

    @cached_property
    def synonym_of(self) -> dict[int, int]:
        """English id -> its synonym source id."""
        return {j: s for s, j in self.synonyms}

    def translate(self, j: int, noise: float, rng) -> int:
        """Foreign token for English word j: a distractor with prob ``noise``,
        otherwise the primary form, or its synonym half of the time."""
        if noise > 0 and rng.random() < noise:
            return int(rng.choice(self.distractors))
        syn = self.synonym_of.get(j)
        if syn is not None and rng.random() < 0.5:
            return syn
        return self.en_to_src[j]

    def english_vocab(self) -> Vocabulary:
        return Vocabulary(f"en{j:02d}" for j in range(self.v_e))

    def source_vocab(self) -> Vocabulary:
        names = [UNK] + [""] * (self.v_src - 1)
        for j, s in enumerate(self.en_to_src):
            names[s] = f"fx{j:02d}"
        for s, j in self.synonyms:
            names[s] = f"fy{j:02d}"
        for i, s in enumerate(self.distractors):
            names[s] = f"noise{i:02d}"
        for i, s in enumerate(self.entities):
            names[s] = f"ent{i:02d}"
        return Vocabulary(names)

    def unit(self, src_token: int) -> int | None:
        """Content unit of a source token: English id, v_e + entity index, or None."""
        j = self.src_to_en.get(src_token)
        if j is not None:
            return j
        if src_token in self.entities:
            return self.v_e + self.entities.index(src_token)
        return None


@dataclass(frozen=True)
class SynthBitextPair:
    pair_id: str
    source: TokenSeq
    english: TokenSeq


def gen_synth_bitext(seed: int, count: int, world: ToyWorld, noise: float = 0.1,
                     min_len: int = 3, max_len: int = 12, entity_rate: float = 0.0) -> list[SynthBitextPair]:
    """Parallel pairs: each English token is translated with prob 1 - noise, else a distractor.

    With probability ``entity_rate`` the foreign side also carries one entity
    token (a name with no English counterpart) in place of a translated word,
    so the foreign length stays within the bounds.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([seed, 0xB17E])
    out = []
    for i in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        named = entity_rate > 0 and n > min_len and rng.random() < entity_rate
        en = rng.choice(world.v_e, size=n - named, replace=False)
        src = [world.translate(int(j), noise, rng) for j in en]
        if named:
            src.insert(int(rng.integers(0, len(src) + 1)), int(rng.choice(world.entities)))
        out.append(SynthBitextPair(f"p{i:05d}", TokenSeq(tuple(src), "xx"), TokenSeq(tuple(en), "en")))
    return out


@dataclass(frozen=True)
class SynthTeacher:
    """Stand-in English sparse encoder: 1.0 for present tokens, 0.3 for expansions, -0.5 else."""

    v_e: int
    expansion: tuple[int, ...] = ()

    @classmethod
    def for_world(cls, world: ToyWorld) -> SynthTeacher:
        return cls(world.v_e, world.expansion)

    def logits(self, english: TokenSeq) -> np.ndarray:
        out = np.full(self.v_e, -0.5)
        for j in english.tokens:
            if self.expansion and self.expansion[j] >= 0:
                out[self.expansion[j]] = max(out[self.expansion[j]], 0.3)
        out[list(english.tokens)] = 1.0
        return out

    def encode(self, english: TokenSeq) -> tuple[np.ndarray, SparseVec]:
        z = self.logits(english)
        t = logsat(z)
        return z, SparseVec({TermKey.english(j): float(t[j]) for j in np.flatnonzero(t > 0)})


def synth_teacher_encode(english: TokenSeq, teacher: SynthTeacher) -> tuple[np.ndarray, SparseVec]:
    return teacher.encode(english)


# -- configuration -------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 42
    n_pairs: int = 500
    noise: float = 0.1
    bitext_entity_rate: float = 0.3
    expansion: bool = True
    sap: bool = True
    sap_steps: int = 2000
    sap_lr: float = 1.0
    sap_target: float | None = None  # stop SAP once the loss is at or below this
    sct_mode: str = "kd"          # kd | infonce | off
    sct_steps: int = 150
    sct_lr: float = 0.3
    batch_size: int = 0           # 0 = full batch
    connector: bool = True
    alpha_q: float = 1e-3
    alpha_d: float = 1e-5
    n_docs: int = 300
    n_train_queries: int = 200
    n_eval_queries: int = 100
    group_size: int = 8
    entity_rate: float = 0.5
    teacher_scale: float = 1.0
    dims: HeadDims = field(default_factory=HeadDims)
    radius: int = 1

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = HeadDims(**self.dims)
        if self.sap_lr < 0 or self.sct_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.sap_steps < 0 or self.sct_steps < 0:
            raise ValueError("step budgets must be >= 0")
        if self.sct_mode not in ("kd", "infonce", "off"):
            raise ValueError(f"unknown SCT mode {self.sct_mode!r}")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise must lie in [0, 1]")
        LossWeights(self.alpha_q, self.alpha_d)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_q, self.alpha_d)

    def replace(self, **changes) -> TrainConfig:
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def make_world(cfg: TrainConfig) -> ToyWorld:
    world = ToyWorld.build(cfg.seed, cfg.dims.v_e, cfg.dims.v_src)
    return world if cfg.expansion else world.without_expansion()


def make_encoder(cfg: TrainConfig) -> ToyEncoderParams:
    return ToyEncoderParams.from_seed(cfg.seed, cfg.dims.v_src, cfg.dims.d_L, cfg.radius)


def _sgd(p: HeadParams, g: HeadParams, lr: float) -> HeadParams:
    return HeadParams.from_flat(p.dims, p.flat() - lr * g.flat())


def _batches(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    if batch_size <= 0 or batch_size >= n:
        return np.arange(n)
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return np.sort(order[k * batch_size:(k + 1) * batch_size])


# -- stage 1: sparse alignment pretraining ------------------------------------------------------


def sap_loss_and_grad(p: HeadParams, batch: SeqBatch, teacher_logits: np.ndarray,
                      use_connector: bool = True) -> tuple[float, HeadParams, Forward]:
    fwd = headgrad.forward(batch, p, use_connector, echo=False)
    loss = smse_loss(fwd.pooled, teacher_logits)
    grad = headgrad.backward(fwd, p, d_pooled=smse_grad(fwd.pooled, teacher_logits))
    return loss, grad, fwd


def run_sap(corpus: Sequence[SynthBitextPair], params: HeadParams, enc: ToyEncoderParams,
            teacher: SynthTeacher, cfg: TrainConfig) -> tuple[HeadParams, list[float]]:
    """Gradient descent on SMSE(student(foreign side), teacher(English side))."""
    trace: list[float] = []
    if cfg.sap_steps == 0 or not corpus:
        return params, trace
    # the flattened loss ignores order; length-sorted batches pool faster
    corpus = sorted(corpus, key=lambda pair: len(pair.source))
    batch = SeqBatch.from_seqs([pair.source for pair in corpus], enc)
    target = np.vstack([teacher.logits(pair.english) for pair in corpus])
    p = params
    for step in range(cfg.sap_steps):
        idx = _batches(len(corpus), cfg.batch_size, step, cfg.seed)
        sub = batch if len(idx) == len(corpus) else batch.subset(idx)
        loss, grad, _ = sap_loss_and_grad(p, sub, target[idx], cfg.connector)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad.flat())):
            raise TrainingDiverged(step, loss)
        trace.append(loss)
        if cfg.sap_target is not None and loss <= cfg.sap_target:
            break
        p = _sgd(p, grad, cfg.sap_lr)
    return p, trace


# -- stage 2: sparse contrastive training ---------------------------------------------------------


@dataclass
class RetrievalSet:
    """Synthetic foreign-language collection with train candidates and eval qrels."""

    doc_ids: list[str]
    docs: list[TokenSeq]
    doc_units: list[frozenset[int]]
    train_ids: list[str]
    train_queries: list[TokenSeq]
    train_groups: list[CandidateSet]   # student scores left at 0
    eval_ids: list[str]
    eval_queries: list[TokenSeq]
    qrels: Judgments
    idf: dict[int, float]


def _render(world: ToyWorld, units: Sequence[int], noise: float, rng) -> list[int]:
    toks = []
    for u in units:
        if u < world.v_e:
            toks.append(world.translate(u, noise, rng))
        else:
            toks.append(world.entities[u - world.v_e])
    return toks


def _units_of(world: ToyWorld, tokens: Sequence[int]) -> frozenset[int]:
    return frozenset(u for u in (world.unit(t) for t in tokens) if u is not None)


def teacher_score(q_units: frozenset[int], d_units: frozenset[int], idf: dict[int, float],
                  scale: float = 1.0) -> float:
    """Synthetic cross-encoder: idf-weighted overlap of content units."""
    return scale * math.fsum(idf[u] for u in sorted(q_units & d_units))


def is_relevant(q_units: frozenset[int], d_units: frozenset[int]) -> bool:
    return len(q_units & d_units) >= 2


def gen_retrieval_set(seed: int, world: ToyWorld, n_docs: int = 300, n_train: int = 200, n_eval: int = 100,
                      noise: float = 0.1, entity_rate: float = 0.5, group_size: int = 8,
                      teacher_scale: float = 1.0) -> RetrievalSet:
    rng = np.random.default_rng([seed, 0x5C7])
    docs, doc_units = [], []
    for _ in range(n_docs):
        units = [int(u) for u in rng.choice(world.v_e, size=int(rng.integers(5, 10)), replace=False)]
        if rng.random() < entity_rate:
            units.insert(int(rng.integers(0, len(units) + 1)), world.v_e + int(rng.integers(len(world.entities))))
        toks = _render(world, units, noise, rng)
        docs.append(TokenSeq(tuple(toks), "xx"))
        doc_units.append(_units_of(world, toks))
    doc_ids = [f"d{i:04d}" for i in range(n_docs)]
    df: dict[int, int] = {}
    for us in doc_units:
        for u in us:
            df[u] = df.get(u, 0) + 1
    idf = {u: math.log((n_docs + 1) / (df.get(u, 0) + 0.5)) for u in range(world.v_e + len(world.entities))}

    def make_query():
        target = int(rng.integers(n_docs))
        pool = sorted(doc_units[target])
        ents = [u for u in pool if u >= world.v_e]
        words = [u for u in pool if u < world.v_e]
        take = [int(u) for u in rng.choice(words, size=min(len(words), int(rng.integers(2, 4))), replace=False)]
        if ents and rng.random() < 0.7:
            take.insert(int(rng.integers(0, len(take) + 1)), ents[0])
        if rng.random() < 0.5:
            take.append(int(rng.integers(world.v_e)))
        toks = _render(world, take, noise, rng)
        return TokenSeq(tuple(toks), "xx"), _units_of(world, toks)

    train_ids, train_queries, groups = [], [], []
    while len(train_queries) < n_train:
        q, qu = make_query()
        scores = np.array([teacher_score(qu, du, idf, teacher_scale) for du in doc_units])
        order = np.lexsort((np.arange(n_docs), -scores))
        if scores[order[0]] <= 0:
            continue
        qid = f"t{len(train_queries):04d}"
        hard = [int(i) for i in order[1:1 + (group_size - 1) // 2]]
        rest = [int(i) for i in rng.permutation(n_docs) if i != order[0] and i not in hard]
        cands = [int(order[0])] + hard + rest[:group_size - 1 - len(hard)]
        groups.append(CandidateSet(qid, tuple(doc_ids[i] for i in cands),
                                   tuple(float(scores[i]) for i in cands), (0.0,) * len(cands), 0))
        train_ids.append(qid)
        train_queries.append(q)

    eval_ids, eval_queries, qrels = [], [], {}
    while len(eval_queries) < n_eval:
        q, qu = make_query()
        rel = {doc_ids[i]: 1 for i, du in enumerate(doc_units) if is_relevant(qu, du)}
        if not rel:
            continue
        qid = f"q{len(eval_queries):04d}"
        eval_ids.append(qid)
        eval_queries.append(q)
        qrels[qid] = rel
    return RetrievalSet(doc_ids, docs, doc_units, train_ids, train_queries, groups,
                        eval_ids, eval_queries, qrels, idf)


@dataclass
class SCTProblem:
    """Everything the contrastive objective needs, pre-encoded for speed."""

    batch: SeqBatch
    n_queries: int
    groups: list[CandidateSet]
    q_index: list[int]            # group -> row in batch
    d_index: list[list[int]]      # group -> rows in batch
    v_src: int

    @classmethod
    def build(cls, rs: RetrievalSet, enc: ToyEncoderParams, v_src: int) -> SCTProblem:
        by_id = dict(zip(rs.doc_ids, rs.docs))
        used_docs = sorted({d for g in rs.train_groups for d in g.doc_ids}, key=lambda d: (len(by_id[d]), d))
        q_order = sorted(range(len(rs.train_queries)), key=lambda i: len(rs.train_queries[i]))
        q_row = {i: r for r, i in enumerate(q_order)}
        pos = {d: len(q_order) + i for i, d in enumerate(used_docs)}
        seqs = [rs.train_queries[i] for i in q_order] + [by_id[d] for d in used_docs]
        batch = SeqBatch.from_seqs(seqs, enc)
        return cls(batch, len(q_order), list(rs.train_groups),
                   [q_row[i] for i in range(len(rs.train_groups))],
                   [[pos[d] for d in g.doc_ids] for g in rs.train_groups], v_src)


def sct_loss_and_grad(p: HeadParams, prob: SCTProblem, mode: str, weights: LossWeights,
                      use_connector: bool = True) -> tuple[float, HeadParams]:
    fwd = headgrad.forward(prob.batch, p, use_connector)
    E = fwd.english
    S, owner = fwd.source(prob.v_src)
    groups = []
    for g, qi, di in zip(prob.groups, prob.q_index, prob.d_index):
        s = E[di] @ E[qi] + S[di] @ S[qi]
        if not np.all(np.isfinite(s)):
            # overflowed activations: report a non-finite loss so the trainer stops
            return math.inf, HeadParams.from_flat(p.dims, np.zeros_like(p.flat()))
        groups.append(g.with_student(s))
    loss, g_scores = RANKING_LOSSES[mode](groups)
    dE = np.zeros_like(E)
    dS = np.zeros_like(S)
    for gs, qi, di in zip(g_scores, prob.q_index, prob.d_index):
        dE[qi] += gs @ E[di]
        dS[qi] += gs @ S[di]
        dE[di] += np.outer(gs, E[qi])
        dS[di] += np.outer(gs, S[qi])
    nq = prob.n_queries
    nd = prob.batch.size - nq
    l1 = E.sum(axis=1) + S.sum(axis=1)
    loss += weights.alpha_q * l1[:nq].mean() + (weights.alpha_d * l1[nq:].mean() if nd else 0.0)
    reg = np.concatenate([np.full(nq, weights.alpha_q / nq), np.full(nd, weights.alpha_d / max(nd, 1))])
    dE += reg[:, None] * (E > 0)
    dS += reg[:, None] * (S > 0)
    d_pooled = dE * headgrad.logsat_grad(fwd.pooled)
    b = prob.batch
    d_w = np.where(owner, dS[b.seg, b.tokens], 0.0)
    d_echo = d_w * headgrad.logsat_grad(fwd.echo_pre)
    return float(loss), headgrad.backward(fwd, p, d_pooled=d_pooled, d_echo_pre=d_echo)


def run_sct(rs: RetrievalSet, params: HeadParams, enc: ToyEncoderParams,
            cfg: TrainConfig) -> tuple[HeadParams, list[float]]:
    trace: list[float] = []
    if cfg.sct_mode == "off" or cfg.sct_steps == 0:
        return params, trace
    prob = SCTProblem.build(rs, enc, params.dims.v_src)
    p = params
    for step in range(cfg.sct_steps):
        loss, grad = sct_loss_and_grad(p, prob, cfg.sct_mode, cfg.weights, cfg.connector)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad.flat())):
            raise TrainingDiverged(step, loss)
        trace.append(loss)
        if cfg.sct_lr:
            p = _sgd(p, grad, cfg.sct_lr)
    return p, trace


# -- measurement -------------------------------------------------------------------------


def overlap_at_m(a: SparseVec, b: SparseVec, m: int) -> float:
    """Share of the top-m terms the two vectors have in common, over m."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return len(set(top_k_terms(a, m)) & set(top_k_terms(b, m))) / m


def encode_many(seqs: Sequence[TokenSeq], enc: ToyEncoderParams, p: HeadParams,
                use_connector: bool = True) -> list[DualViewRepr]:
    if not seqs:
        return []
    fwd = headgrad.forward(SeqBatch.from_seqs(seqs, enc), p, use_connector)
    E = fwd.english
    S, _ = fwd.source(p.dims.v_src)
    out = []
    for e_row, s_row in zip(E, S):
        out.append(DualViewRepr(
            SparseVec({TermKey.english(j): float(e_row[j]) for j in np.flatnonzero(e_row > 0)}),
            SparseVec({TermKey.source(j): float(s_row[j]) for j in np.flatnonzero(s_row > 0)})))
    return out


def english_only(rep: DualViewRepr) -> DualViewRepr:
    return DualViewRepr(rep.english, SparseVec())


def mean_overlap(pairs: Sequence[SynthBitextPair], enc: ToyEncoderParams, p: HeadParams, teacher: SynthTeacher,
                 m: int = 10, use_connector: bool = True) -> float:
    reprs = encode_many([pr.source for pr in pairs], enc, p, use_connector)
    vals = [overlap_at_m(r.english, teacher.encode(pr.english)[1], m) for r, pr in zip(reprs, pairs)]
    return math.fsum(vals) / len(vals)


def retrieval_ndcg(rs: RetrievalSet, enc: ToyEncoderParams, p: HeadParams, use_connector: bool = True,
                   views: str = "dual", k: int = 10, doc_spec: PruneSpec = PruneSpec()) -> float:
    doc_reprs = encode_many(rs.docs, enc, p, use_connector)
    q_reprs = encode_many(rs.eval_queries, enc, p, use_connector)
    if views == "english":
        doc_reprs = [english_only(r) for r in doc_reprs]
        q_reprs = [english_only(r) for r in q_reprs]
    idx = build_index(zip(rs.doc_ids, doc_reprs), doc_spec, vocab_sizes=(p.dims.v_e, p.dims.v_src))
    run = search_many(idx, list(zip(rs.eval_ids, q_reprs)), top_n=100)
    report = evaluate_run(run, rs.qrels, [f"ndcg@{k}"])
    return report.mean(f"ndcg@{k}") if report.metrics else 0.0


# -- ablation matrix ---------------------------------------------------------------------------

ABLATION_CONFIGS = {
    "sap+sct_kd": dict(sap=True, sct_mode="kd", connector=True),
    "sap+sct_infonce": dict(sap=True, sct_mode="infonce", connector=True),
    "sap_only": dict(sap=True, sct_mode="off", connector=True),
    "sct_only": dict(sap=False, sct_mode="kd", connector=True),
    "no_connector_sct": dict(sap=False, sct_mode="kd", connector=False),
}


@dataclass
class TrainedModel:
    params: HeadParams
    sap_trace: list[float]
    sct_trace: list[float]
    connector: bool = True


@dataclass
class Pipeline:
    """Shared data for one seed: world, encoder, teacher, corpora."""

    cfg: TrainConfig
    world: ToyWorld
    enc: ToyEncoderParams
    teacher: SynthTeacher
    bitext: list[SynthBitextPair]
    heldout: list[SynthBitextPair]
    retrieval: RetrievalSet

    @classmethod
    def build(cls, cfg: TrainConfig) -> Pipeline:
        world = make_world(cfg)
        return cls(cfg, world, make_encoder(cfg), SynthTeacher.for_world(world),
                   gen_synth_bitext(cfg.seed, cfg.n_pairs, world, cfg.noise, entity_rate=cfg.bitext_entity_rate),
                   gen_synth_bitext(cfg.seed + 1, 200, world, cfg.noise, entity_rate=cfg.bitext_entity_rate),
                   gen_retrieval_set(cfg.seed, world, cfg.n_docs, cfg.n_train_queries, cfg.n_eval_queries,
                                     cfg.noise, cfg.entity_rate, cfg.group_size, cfg.teacher_scale))

    def init_params(self) -> HeadParams:
        return HeadParams.init(self.cfg.dims, self.cfg.seed)

    def sap(self, params: HeadParams | None = None) -> tuple[HeadParams, list[float]]:
        p = self.init_params() if params is None else params
        return run_sap(self.bitext, p, self.enc, self.teacher, self.cfg)

    def train(self, cfg: TrainConfig, sap_result: tuple[HeadParams, list[float]] | None = None) -> TrainedModel:
        if cfg.sap:
            p, sap_trace = sap_result if sap_result is not None else run_sap(
                self.bitext, self.init_params(), self.enc, self.teacher, cfg)
        else:
            p, sap_trace = self.init_params(), []
        p, sct_trace = run_sct(self.retrieval, p, self.enc, cfg)
        return TrainedModel(p, sap_trace, sct_trace, cfg.connector)

    def measure(self, model: TrainedModel, m: int = 10) -> dict[str, float]:
        return {
            "overlap_at_10": mean_overlap(self.heldout, self.enc, model.params, self.teacher, m, model.connector),
            "ndcg_at_10": retrieval_ndcg(self.retrieval, self.enc, model.params, model.connector),
        }


def run_ablation_matrix(cfg: TrainConfig, configs: dict[str, dict] | None = None,
                        pipeline: Pipeline | None = None,
                        sap_result: tuple[HeadParams, list[float]] | None = None) -> dict:
    """Train every configuration on the same data; report grounding and effectiveness.

    ``overlap_at_10`` is the mean top-10 term overlap between the student's
    English view of held-out foreign sentences and the teacher's view of
    their translations: the grounding measure used to detect collapse.
    """
    configs = ABLATION_CONFIGS if configs is None else configs
    pipe = pipeline or Pipeline.build(cfg)
    if sap_result is None and any(c.get("sap", True) for c in configs.values()):
        sap_result = pipe.sap()
    records = []
    traces = {}
    models = {}
    for name, flags in configs.items():
        sub = cfg.replace(**flags)
        model = pipe.train(sub, sap_result)
        metrics = pipe.measure(model)
        trace = model.sap_trace + model.sct_trace
        final = model.sct_trace[-1] if model.sct_trace else (model.sap_trace[-1] if model.sap_trace else float("nan"))
        records.append({
            "config": name,
            "final_loss": final,
            "overlap_at_10": metrics["overlap_at_10"],
            "ndcg_at_10": metrics["ndcg_at_10"],
            "steps": len(trace),
        })
        traces[name] = {"sap": model.sap_trace, "sct": model.sct_trace}
        models[name] = model
        log.info("%s: %s", name, records[-1])
    return {
        "seed": cfg.seed,
        "overlap_measure": "mean top-10 term overlap between student English view and teacher (grounding proxy)",
        "records": records,
        "traces": traces,
        "models": models,
    }


def report_json(report: dict) -> str:
    """Serialized report without the raw traces (those go to CSV) or the trained models."""
    slim = {k: v for k, v in report.items() if k not in ("traces", "models")}
    return json.dumps(slim, indent=2, sort_keys=True)


def trace_csv(trace: Sequence[float]) -> str:
    return "step,loss\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(trace))
