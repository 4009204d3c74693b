"""Command-line entry point: ``milco <command> ...``.

Exit codes: 0 success, 1 domain failure, 2 usage or configuration error,
3 numeric divergence during training. Every command echoes its resolved
configuration as JSON on stderr and writes outputs atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from collections.abc import Sequence
from pathlib import Path

from milco import index as index_mod
from milco.evaluation import FormatError, evaluate_run, load_qrels, load_run, write_qrels
from milco.index import PruneSpec, build_index, prune, read_index, search_many, to_bytes
from milco.lexecho import HeadParams, ToyEncoderParams, encode_dual_view, toy_tokenize
from milco.repr_core import DualViewRepr, read_reprs_jsonl, repr_to_json, top_k_terms
from milco.vocab import Vocabulary

log = logging.getLogger("milco")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, missing inputs, or an invalid config: exit 2."""


class DomainError(Exception):
    """Valid request that cannot be satisfied (e.g. unknown id): exit 1."""


# -- helpers ----------------------------------------------------------------------------


def atomic_write(path, data: str | bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _need_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _prune_spec(text: str) -> PruneSpec:
    try:
        return PruneSpec.parse(text)
    except ValueError as exc:
        raise UsageError(f"bad prune spec {text!r}: {exc}") from None


def _vocabs(args) -> tuple[Vocabulary, Vocabulary]:
    en = Vocabulary.load(_need_file(args.en_vocab, "--en-vocab"))
    src = Vocabulary.load(_need_file(args.src_vocab, "--src-vocab"))
    return en, src


def _echo_config(args) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    print(json.dumps(cfg, sort_keys=True), file=sys.stderr)


def read_corpus(path) -> list[tuple[str, str]]:
    """Lines of ``id<TAB>text``; blank lines are skipped."""
    out, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        doc_id, sep, text = line.partition("\t")
        if not sep or not doc_id:
            raise FormatError(f"{path}:{lineno}: expected 'id<TAB>text'")
        if doc_id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {doc_id!r}")
        seen.add(doc_id)
        out.append((doc_id, text))
    return out


# -- commands -----------------------------------------------------------------------------


def cmd_encode(args) -> int:
    corpus = _need_file(args.corpus, "--corpus")
    params_path = _need_file(args.params, "--params")
    en, src = _vocabs(args)
    try:
        params = HeadParams.from_bytes(params_path.read_bytes())
    except ValueError as exc:
        raise UsageError(f"cannot read params {params_path}: {exc}") from None
    dims = params.dims
    if (dims.v_e, dims.v_src) != (len(en), len(src)):
        raise UsageError(f"params expect vocab sizes ({dims.v_e}, {dims.v_src}), "
                         f"vocab files give ({len(en)}, {len(src)})")
    enc = ToyEncoderParams.from_seed(args.seed, len(src), dims.d_L, args.radius)
    lines = []
    for doc_id, text in read_corpus(corpus):
        rep = encode_dual_view(toy_tokenize(text, src, args.language), enc, params, not args.no_connector)
        lines.append(repr_to_json(doc_id, rep, en, src) + "\n")
    atomic_write(args.out, "".join(lines))
    log.info("encoded %d texts -> %s", len(lines), args.out)
    return EXIT_OK


def cmd_index(args) -> int:
    reprs = _need_file(args.reprs, "--reprs")
    spec = _prune_spec(args.prune)
    en, src = _vocabs(args)
    docs = read_reprs_jsonl(reprs, en, src)
    idx = build_index(docs, spec, vocab_sizes=(len(en), len(src)))
    atomic_write(args.out, to_bytes(idx))
    log.info("indexed %d docs with %s -> %s", len(idx), spec, args.out)
    return EXIT_OK


def cmd_search(args) -> int:
    index_path = _need_file(args.index, "--index")
    queries = _need_file(args.queries, "--queries")
    q_spec = _prune_spec(args.query_prune)
    if args.top_n < 0:
        raise UsageError("--top-n must be >= 0")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    en, src = _vocabs(args)
    idx = read_index(index_path)
    qs = read_reprs_jsonl(queries, en, src)
    run = search_many(idx, qs, args.top_n, q_spec, threads=args.threads)
    lines = []
    for qid, _ in qs:
        for rank, (doc_id, score) in enumerate(run[qid], 1):
            lines.append(f"{qid} Q0 {doc_id} {rank} {float(score)!r} {args.tag}\n")
    atomic_write(args.out, "".join(lines))
    log.info("searched %d queries -> %s", len(qs), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    run = load_run(_need_file(args.run, "--run"))
    judg = load_qrels(_need_file(args.qrels, "--qrels"))
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    try:
        report = evaluate_run(run, judg, metrics)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not report.metrics:
        raise DomainError("no run query has relevant judgments")
    text = report.to_json() + "\n"
    if args.out:
        from milco import plotting
        atomic_write(args.out, text)
        plotting.plot_per_query(report.metrics, Path(args.out).with_suffix(".png"))
    sys.stdout.write(text)
    for name in metrics:
        print(f"{name}\tall\t{report.mean(name):.4f}", file=sys.stderr)
    return EXIT_OK


def format_inspect(doc_id: str, rep: DualViewRepr, en: Vocabulary, src: Vocabulary, m: int) -> str:
    """Top-m terms of each view, weight-descending then key-ascending."""
    lines = [f"# {doc_id}\tenglish_nnz={rep.english.nnz}\tsource_nnz={rep.source.nnz}"]
    for label, view, vocab in (("english", rep.english, en), ("source", rep.source, src)):
        for key, w in sorted(top_k_terms(view, m).items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"{label}\t{vocab.token(key.token_id)}\t{w:.6f}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    reprs = _need_file(args.reprs, "--reprs")
    if args.m < 0:
        raise UsageError("-m must be >= 0")
    en, src = _vocabs(args)
    found = dict(read_reprs_jsonl(reprs, en, src))
    if args.id not in found:
        raise DomainError(f"id {args.id!r} not found in {reprs}")
    sys.stdout.write(format_inspect(args.id, found[args.id], en, src, args.m))
    return EXIT_OK


def _train_config(args):
    from milco.training import TrainConfig
    raw = {}
    if args.config:
        try:
            raw = json.loads(_need_file(args.config, "--config").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    raw["seed"] = args.seed
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


def cmd_train(args) -> int:
    from milco import plotting
    from milco.training import Pipeline, report_json, run_ablation_matrix, run_sap, run_sct, trace_csv

    cfg = _train_config(args)
    print(json.dumps({"train_config": json.loads(cfg.to_json())}, sort_keys=True), file=sys.stderr)
    out = Path(args.out)
    init = None
    if args.init:
        init = HeadParams.from_bytes(_need_file(args.init, "--init").read_bytes())
    pipe = Pipeline.build(cfg)
    if args.mode == "ablation":
        report = run_ablation_matrix(cfg, pipeline=pipe)
        out.mkdir(parents=True, exist_ok=True)
        for name, tr in report["traces"].items():
            atomic_write(out / f"trace_{name}.csv", trace_csv(tr["sap"] + tr["sct"]))
        atomic_write(out / "ablation.json", report_json(report) + "\n")
        plotting.plot_ablation(report["records"], out / "ablation.png")
        plotting.plot_loss_traces({n: t["sap"] + t["sct"] for n, t in report["traces"].items()},
                                  out / "ablation_loss.png", "ablation training loss")
        for r in report["records"]:
            print(f"{r['config']}\toverlap@10={r['overlap_at_10']:.4f}\tndcg@10={r['ndcg_at_10']:.4f}",
                  file=sys.stderr)
        return EXIT_OK
    p = init if init is not None else pipe.init_params()
    if args.mode == "sap":
        p, trace = run_sap(pipe.bitext, p, pipe.enc, pipe.teacher, cfg)
    else:
        p, trace = run_sct(pipe.retrieval, p, pipe.enc, cfg)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / f"{args.mode}_params.bin", p.to_bytes())
    atomic_write(out / f"{args.mode}_trace.csv", trace_csv(trace))
    plotting.plot_loss_traces({args.mode: trace}, out / f"{args.mode}_loss.png", f"{args.mode} loss")
    if trace:
        print(f"{args.mode}\tsteps={len(trace)}\tinitial={trace[0]:.6g}\tfinal={trace[-1]:.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write the toy world: vocabularies, a document corpus, queries and qrels."""
    from milco.training import make_world, gen_retrieval_set

    cfg = _train_config(args)
    world = make_world(cfg)
    en, src = world.english_vocab(), world.source_vocab()
    rs = gen_retrieval_set(cfg.seed, world, cfg.n_docs, cfg.n_train_queries, cfg.n_eval_queries, cfg.noise,
                           cfg.entity_rate, cfg.group_size, cfg.teacher_scale)

    def text(seq):
        return " ".join(src.token(t) for t in seq.tokens)

    out = Path(args.out)
    atomic_write(out / "en.vocab", "".join(t + "\n" for t in en.tokens))
    atomic_write(out / "src.vocab", "".join(t + "\n" for t in src.tokens))
    atomic_write(out / "docs.tsv", "".join(f"{d}\t{text(s)}\n" for d, s in zip(rs.doc_ids, rs.docs)))
    atomic_write(out / "queries.tsv", "".join(f"{q}\t{text(s)}\n" for q, s in zip(rs.eval_ids, rs.eval_queries)))
    fd, tmp = tempfile.mkstemp(prefix=".qrels.", dir=out)
    os.close(fd)
    try:
        write_qrels(tmp, rs.qrels)
        os.replace(tmp, out / "qrels.txt")
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Index the same documents under several prune specs; report size and effectiveness."""
    from milco import plotting

    reprs = _need_file(args.reprs, "--reprs")
    queries = _need_file(args.queries, "--queries")
    judg = load_qrels(_need_file(args.qrels, "--qrels"))
    specs = [_prune_spec(s.strip()) for s in args.specs.split(",") if s.strip()]
    if not specs:
        raise UsageError("--specs needs at least one prune spec")
    en, src = _vocabs(args)
    docs = read_reprs_jsonl(reprs, en, src)
    qs = read_reprs_jsonl(queries, en, src)
    metric = args.metric
    rows = []
    for spec in specs:
        idx = build_index(docs, spec, vocab_sizes=(len(en), len(src)))
        run = search_many(idx, qs, args.top_n, _prune_spec(args.query_prune))
        report = evaluate_run(run, judg, [metric])
        mean_nnz = sum(prune(rep, spec).nnz for _, rep in docs) / max(len(docs), 1)
        rows.append({"spec": str(spec), "mean_nnz": mean_nnz,
                     metric: report.mean(metric) if report.metrics else 0.0})
    out = Path(args.out)
    csv = f"spec,mean_nnz,{metric}\n" + "".join(f"{r['spec']},{r['mean_nnz']!r},{r[metric]!r}\n" for r in rows)
    atomic_write(out.with_suffix(".csv"), csv)
    plotting.plot_prune_sweep(rows, out.with_suffix(".png"), metric)
    sys.stdout.write(csv)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milco", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=42, help="single source of randomness (default 42)")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def vocab_flags(p):
        p.add_argument("--en-vocab", required=True, help="English vocabulary, one token per line")
        p.add_argument("--src-vocab", required=True, help="source tokenizer vocabulary")

    p = sub.add_parser("encode", help="encode id<TAB>text lines into dual-view JSONL")
    p.add_argument("--corpus", required=True)
    p.add_argument("--params", required=True, help="head params file")
    p.add_argument("--out", required=True)
    p.add_argument("--language", default="xx")
    p.add_argument("--radius", type=int, default=1, help="toy encoder window radius")
    p.add_argument("--no-connector", action="store_true", help="bypass the connector MLP")
    vocab_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build a binary inverted index from JSONL reprs")
    p.add_argument("--reprs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prune", default="none", help="none | topk:K | mass:P[:count|weight]")
    vocab_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="exact top-n retrieval; writes a run file")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="query reprs JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--top-n", type=int, default=100)
    p.add_argument("--query-prune", default="none")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--tag", default="milco")
    vocab_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a run against qrels; JSON report on stdout")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="ndcg@10,recall@100")
    p.add_argument("--out", help="also write the report here, plus a per-query histogram (.png)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print the top-m terms of one representation")
    p.add_argument("--reprs", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("-m", type=int, default=10)
    vocab_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="toy two-stage training (writes params, traces, figures)")
    p.add_argument("mode", choices=["sap", "sct", "ablation"])
    p.add_argument("--config", help="JSON object with TrainConfig fields")
    p.add_argument("--init", help="starting head params (default: seeded init)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="write the toy world: vocabs, docs, queries, qrels")
    p.add_argument("--config", help="JSON object with TrainConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="pruning trade-off: size vs effectiveness per prune spec")
    p.add_argument("--reprs", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--specs", default="none,topk:10,topk:20,mass:50:count,mass:80:count")
    p.add_argument("--query-prune", default="none")
    p.add_argument("--metric", default="ndcg@10")
    p.add_argument("--top-n", type=int, default=100)
    p.add_argument("--out", required=True, help="output stem; writes .csv and .png")
    vocab_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    from milco.training import TrainingDiverged

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    _echo_config(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"milco {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"milco {args.command}: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DomainError, FormatError, index_mod.IndexFormatError, ValueError, KeyError) as exc:
        print(f"milco {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
