"""Command-line interface: bench, train, rerank, and tost subcommands."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .bench import BenchSpec, default_model_config, emit_report, run_bench
from .encoder import CrossEncoder, EncoderConfig
from .evaluation import ndcg_at_k, paired_tost, read_qrels, read_run, rerank, write_run
from .serialize import load_model, save_model
from .tokenizer import NUM_SPECIAL_TOKENS, Vocabulary
from .training import SyntheticTask, train_toy, write_trace_csv

VOCAB_FILE = "vocab.json"


def _parse_window(text: str) -> float:
    if text in ("inf", "infinity"):
        return math.inf
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("window must be >= 0 or 'inf'")
    return value


def _parse_doc_lens(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsecross",
        description="Windowed band-matrix attention for cross-encoder re-ranking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run the efficiency benchmark")
    b.add_argument(
        "--pattern",
        default="sparse",
        help="comma list of patterns, each 'name' or 'name:window' "
        "(full, longformer, qds, sparse); bare names use --window",
    )
    b.add_argument("--window", type=_parse_window, default=4, help="default window size or 'inf'")
    b.add_argument("--query-len", type=int, default=10)
    b.add_argument("--doc-lens", type=_parse_doc_lens, default=(54, 164, 1024, 4086))
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--precision", choices=("f32", "f64"), default="f32")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--format", choices=("csv", "md"), default="csv")
    b.add_argument("--baseline", default=None, help="baseline row as 'pattern:window' (md format)")
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--embed-dim", type=int, default=32)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--ff-dim", type=int, default=64)

    t = sub.add_parser("train", help="train a toy model on the synthetic overlap task")
    t.add_argument("--pattern", choices=("full", "longformer", "qds", "sparse"), default="sparse")
    t.add_argument("--window", type=_parse_window, default=4)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--loss", choices=("margin_mse", "ranknet"), default="margin_mse")
    t.add_argument("--batch-pairs", type=int, default=16)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--vocab-words", type=int, default=32)
    t.add_argument("--query-terms", type=int, default=3)
    t.add_argument("--doc-len", type=int, default=12)
    t.add_argument("--val-queries", type=int, default=20)
    t.add_argument("--eval-every", type=int, default=0, help="validation period in steps (0: final only)")
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--embed-dim", type=int, default=32)
    t.add_argument("--heads", type=int, default=2)
    t.add_argument("--ff-dim", type=int, default=64)
    t.add_argument("--out", type=Path, default=None, help="directory for the saved model")
    t.add_argument("--trace", type=Path, default=None, help="CSV path for the metric trace")

    r = sub.add_parser("rerank", help="re-rank candidate documents with a saved model")
    r.add_argument("--model", type=Path, required=True)
    r.add_argument("--queries", type=Path, required=True, help="TSV: query_id<TAB>text")
    r.add_argument("--docs", type=Path, required=True, help="TSV: doc_id<TAB>text")
    r.add_argument(
        "--candidates",
        type=Path,
        default=None,
        help="optional run file restricting candidates per query",
    )
    r.add_argument("--top-k", type=int, default=100)
    r.add_argument("--tag", default="sparsecross")
    r.add_argument("--output", type=Path, default=None, help="run file (default stdout)")

    s = sub.add_parser("tost", help="test two runs for nDCG@k equivalence")
    s.add_argument("--run-a", type=Path, required=True)
    s.add_argument("--run-b", type=Path, required=True)
    s.add_argument("--qrels", type=Path, required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--bound", type=float, default=0.02)
    s.add_argument("--alpha", type=float, default=0.05)
    return parser


def _cmd_bench(args) -> int:
    entries = []
    for item in args.pattern.split(","):
        item = item.strip()
        if ":" in item:
            name, _, wtext = item.partition(":")
            entries.append((name, _parse_window(wtext)))
        else:
            entries.append((item, args.window))
    baseline = None
    if args.baseline:
        name, _, wtext = args.baseline.partition(":")
        baseline = (name, _parse_window(wtext) if wtext else args.window)
        if baseline not in entries:
            entries.append(baseline)
    records = []
    for name, window in entries:
        spec = BenchSpec(
            pattern=name,
            window=window,
            query_len=args.query_len,
            doc_lens=args.doc_lens,
            batch_size=args.batch,
            repetitions=args.reps,
            precision=args.precision,
            seed=args.seed,
        )
        config = default_model_config(
            spec,
            layers=args.layers,
            embed_dim=args.embed_dim,
            heads=args.heads,
            ff_dim=args.ff_dim,
        )
        records.extend(run_bench(spec, config))
    print(emit_report(records, args.format, baseline=baseline), end="")
    return 0


def _cmd_train(args) -> int:
    task = SyntheticTask(
        vocab_words=args.vocab_words,
        query_terms=args.query_terms,
        doc_len=args.doc_len,
    )
    config = EncoderConfig(
        layers=args.layers,
        embed_dim=args.embed_dim,
        heads=args.heads,
        ff_dim=args.ff_dim,
        max_positions=args.query_terms + args.doc_len + 3,
        vocab_size=task.vocab_size,
        pattern=args.pattern,
        window=args.window,
    )
    val = None
    if args.val_queries > 0:
        val = task.sample_validation(np.random.default_rng(args.seed + 7919), args.val_queries)
    result = train_toy(
        config,
        task,
        steps=args.steps,
        lr=args.lr,
        seed=args.seed,
        batch_pairs=args.batch_pairs,
        loss=args.loss,
        weight_decay=args.weight_decay,
        eval_every=args.eval_every,
        val_set=val,
    )
    last = result.trace[-1]
    print(f"final step {last.step}: loss {last.loss:.6f}", end="")
    if result.final_ndcg is not None:
        print(f", validation nDCG@10 {result.final_ndcg:.4f}")
    else:
        print()
    if args.out is not None:
        save_model(result.model, args.out)
        vocab = {f"w{i}": i for i in range(NUM_SPECIAL_TOKENS, task.vocab_size)}
        (args.out / VOCAB_FILE).write_text(json.dumps(vocab, indent=0) + "\n", encoding="utf-8")
        print(f"model saved to {args.out}")
    if args.trace is not None:
        write_trace_csv(result.trace, args.trace)
        print(f"trace written to {args.trace}")
    return 0


def _read_tsv(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, text = line.partition("\t")
        out[key.strip()] = text.strip()
    return out


def _cmd_rerank(args) -> int:
    model = load_model(args.model)
    vocab_path = args.model / VOCAB_FILE
    if vocab_path.exists():
        vocab = Vocabulary(json.loads(vocab_path.read_text(encoding="utf-8")))
    else:
        vocab = Vocabulary({})
    queries = _read_tsv(args.queries)
    docs = _read_tsv(args.docs)
    candidates_by_query: dict[str, list[str]] = {}
    if args.candidates is not None:
        for entry in read_run(args.candidates):
            candidates_by_query.setdefault(entry.query_id, []).append(entry.doc_id)
    else:
        all_docs = list(docs)
        for qid in queries:
            candidates_by_query[qid] = all_docs

    def scorer(query_text: str, doc_text: str) -> float:
        q_ids = vocab.encode(query_text)
        d_ids = vocab.encode(doc_text)
        return model.score_pair(q_ids, d_ids)

    entries = []
    for qid in sorted(candidates_by_query):
        if qid not in queries:
            print(f"warning: query {qid} missing from --queries; skipped", file=sys.stderr)
            continue
        cands = [(did, docs[did]) for did in candidates_by_query[qid] if did in docs]
        if not cands:
            continue
        entries.extend(
            rerank(scorer, queries[qid], cands, top_k=args.top_k, query_id=qid, tag=args.tag)
        )
    if args.output is not None:
        write_run(entries, args.output)
        print(f"wrote {len(entries)} entries to {args.output}", file=sys.stderr)
    else:
        from .evaluation import format_run

        print(format_run(entries), end="")
    return 0


def _cmd_tost(args) -> int:
    qrels = read_qrels(args.qrels)
    per_a, mean_a = ndcg_at_k(read_run(args.run_a), qrels, args.k)
    per_b, mean_b = ndcg_at_k(read_run(args.run_b), qrels, args.k)
    shared = sorted(set(per_a) & set(per_b))
    if len(shared) < 2:
        print("error: need at least 2 shared queries", file=sys.stderr)
        return 2
    a = [per_a[q] for q in shared]
    b = [per_b[q] for q in shared]
    result = paired_tost(a, b, bound=args.bound, alpha=args.alpha)
    print(f"queries            {len(shared)}")
    print(f"mean nDCG@{args.k}  A {mean_a:.4f}  B {mean_b:.4f}")
    print(f"mean difference    {result.mean_diff:+.4f} (bound ±{args.bound})")
    print(f"p-values           lower {result.p_lower:.6f}  upper {result.p_upper:.6f}")
    verdict = "EQUIVALENT" if result.equivalent else "NOT EQUIVALENT"
    print(f"verdict            {verdict} at alpha {args.alpha}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "bench": _cmd_bench,
        "train": _cmd_train,
        "rerank": _cmd_rerank,
        "tost": _cmd_tost,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
