"""nDCG@k and Recall@k with trec_eval-style qrels/run file handling.

Gain is ``2**grade - 1`` and the discount ``log2(rank + 1)``. Queries without
any relevant document are left out of per-query maps and macro averages.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

# qid -> docid -> grade
Judgments = dict[str, dict[str, int]]
# qid -> [(docid, score), ...] in rank order
RunList = dict[str, list[tuple[str, float]]]


class FormatError(ValueError):
    """A qrels or run file line that does not parse."""


def _relevant(judg: Judgments, qid: str) -> dict[str, int]:
    return {d: g for d, g in judg.get(qid, {}).items() if g > 0}


def ndcg_at_k(run: RunList, judg: Judgments, k: int) -> dict[str, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    out = {}
    for qid in sorted(run):
        rel = _relevant(judg, qid)
        if not rel:
            continue
        dcg = 0.0
        for i, (doc, _) in enumerate(run[qid][:k]):
            g = rel.get(doc, 0)
            if g:
                dcg += (2.0 ** g - 1.0) / math.log2(i + 2)
        ideal = sorted(rel.values(), reverse=True)[:k]
        idcg = sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(ideal))
        out[qid] = dcg / idcg
    return out


def recall_at_k(run: RunList, judg: Judgments, k: int) -> dict[str, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    out = {}
    for qid in sorted(run):
        rel = _relevant(judg, qid)
        if not rel:
            continue
        hits = sum(1 for doc, _ in run[qid][:k] if doc in rel)
        out[qid] = hits / len(rel)
    return out


METRICS = {"ndcg": ndcg_at_k, "recall": recall_at_k}


def parse_metric(name: str) -> tuple[str, int]:
    """'ndcg@10' -> ('ndcg', 10)."""
    base, _, cut = name.lower().partition("@")
    if base not in METRICS or not cut.isdigit() or int(cut) < 1:
        raise ValueError(f"unknown metric {name!r}; expected ndcg@K or recall@K")
    return base, int(cut)


@dataclass
class EvalReport:
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    unjudged_queries: int = 0
    excluded_queries: int = 0

    def mean(self, metric: str) -> float:
        return self.metrics[metric]["all"]

    def to_json(self) -> str:
        return json.dumps(self.metrics, indent=2, sort_keys=False)


def evaluate_run(run: RunList, judg: Judgments, metrics: Sequence[str] = ("ndcg@10", "recall@100")) -> EvalReport:
    report = EvalReport()
    judged = {q for q in judg if _relevant(judg, q)}
    evaluated = {q: v for q, v in run.items() if q in judged}
    report.unjudged_queries = len(set(run) - set(judg))
    report.excluded_queries = len(set(run) & set(judg)) - len(evaluated)
    if not evaluated:
        log.warning("no run query has relevant judgments (%d unjudged)", report.unjudged_queries)
        return report
    for name in metrics:
        base, k = parse_metric(name)
        per_q = METRICS[base](evaluated, judg, k)
        values = dict(per_q)
        values["all"] = math.fsum(per_q.values()) / len(per_q)
        report.metrics[name] = values
    return report


# -- file formats -----------------------------------------------------------


def load_qrels(path) -> Judgments:
    judg: Judgments = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'qid iter docid grade', got {line!r}")
        qid, _, doc, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
        if g < 0:
            raise FormatError(f"{path}:{lineno}: negative grade {g}")
        judg.setdefault(qid, {})[doc] = g
    return judg


def load_run(path) -> RunList:
    run: RunList = {}
    seen: dict[str, set[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag', got {line!r}")
        qid, _, doc, rank, score, _tag = parts
        try:
            int(rank)
            s = float(score)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad rank or score in {line!r}") from None
        if doc in seen.setdefault(qid, set()):
            raise FormatError(f"{path}:{lineno}: duplicate document {doc!r} for query {qid!r}")
        seen[qid].add(doc)
        entries = run.setdefault(qid, [])
        if entries and s > entries[-1][1]:
            raise FormatError(f"{path}:{lineno}: scores must be non-increasing within query {qid!r}")
        entries.append((doc, s))
    return run


def write_run(path, run: Mapping[str, Sequence[tuple[str, float]]], tag: str = "milco") -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in run:
            for rank, (doc, score) in enumerate(run[qid], 1):
                f.write(f"{qid} Q0 {doc} {rank} {float(score)!r} {tag}\n")


def write_qrels(path, judg: Judgments) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in judg:
            for doc, g in judg[qid].items():
                f.write(f"{qid} 0 {doc} {g}\n")
