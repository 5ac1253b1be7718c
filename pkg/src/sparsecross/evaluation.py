"""Ranking metrics, paired equivalence testing, and a re-rank driver.

nDCG uses the exponential gain 2^rel - 1 with a log2(rank + 1) discount,
the convention of the deep-learning retrieval tracks.  Equivalence of two
paired per-query score vectors is decided with two one-sided t-tests
against a symmetric bound.  Run and judgment files use the TREC formats
(``qid Q0 docid rank score tag`` and ``qid 0 docid rel``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .stats import student_t_cdf, student_t_sf


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str = "sparsecross"


# ---------------------------------------------------------------------------
# TREC file formats.
# ---------------------------------------------------------------------------

def parse_run(lines) -> list[RunEntry]:
    entries = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise EvaluationError(f"run line {lineno}: expected 6 fields, got {len(parts)}")
        qid, _q0, did, rank, score, tag = parts
        entries.append(RunEntry(qid, did, int(rank), float(score), tag))
    return entries


def format_run(entries) -> str:
    return "".join(
        f"{e.query_id} Q0 {e.doc_id} {e.rank} {e.score:.6f} {e.tag}\n" for e in entries
    )


def read_run(path) -> list[RunEntry]:
    with open(path, encoding="utf-8") as fh:
        return parse_run(fh)


def write_run(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_run(entries))


def parse_qrels(lines) -> dict[str, dict[str, int]]:
    qrels: dict[str, dict[str, int]] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise EvaluationError(f"qrels line {lineno}: expected 4 fields, got {len(parts)}")
        qid, _iter, did, rel = parts
        rel = int(rel)
        if rel < 0:
            raise EvaluationError(f"qrels line {lineno}: negative relevance")
        qrels.setdefault(qid, {})[did] = rel
    return qrels


def read_qrels(path) -> dict[str, dict[str, int]]:
    with open(path, encoding="utf-8") as fh:
        return parse_qrels(fh)


# ---------------------------------------------------------------------------
# nDCG.
# ---------------------------------------------------------------------------

def _dcg(rels) -> float:
    return sum((2.0 ** rel - 1.0) / math.log2(rank + 1) for rank, rel in enumerate(rels, 1))


def ndcg_at_k(run, qrels, k: int = 10) -> tuple[dict[str, float], float]:
    """Per-query nDCG@k and its mean over the queries present in the run.

    Documents are taken in rank order per query; the ideal ranking uses
    all judged documents of that query.  Queries with no relevant
    documents (or absent from the judgments) score 0.
    """
    if k < 1:
        raise EvaluationError("k must be >= 1")
    by_query: dict[str, list[RunEntry]] = {}
    for entry in run:
        by_query.setdefault(entry.query_id, []).append(entry)
    per_query: dict[str, float] = {}
    for qid, entries in by_query.items():
        entries = sorted(entries, key=lambda e: e.rank)
        judged = qrels.get(qid)
        if judged is None:
            warnings.warn(f"query {qid} missing from qrels; scoring 0", stacklevel=2)
            per_query[qid] = 0.0
            continue
        gains = [judged.get(e.doc_id, 0) for e in entries[:k]]
        ideal = sorted(judged.values(), reverse=True)[:k]
        idcg = _dcg(ideal)
        per_query[qid] = _dcg(gains) / idcg if idcg > 0 else 0.0
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return per_query, mean


# ---------------------------------------------------------------------------
# Paired TOST.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TostResult:
    equivalent: bool
    p_lower: float
    p_upper: float
    mean_diff: float
    df: int


def paired_tost(scores_a, scores_b, bound: float = 0.02, alpha: float = 0.05) -> TostResult:
    """Two one-sided t-tests for equivalence of paired samples.

    On the differences d = a - b, tests H01: mean(d) <= -bound and
    H02: mean(d) >= +bound; the pair is equivalent iff both one-sided
    p-values are below alpha.  With zero variance the verdict degenerates
    to |mean(d)| < bound, with p-values reported as 0 or 1.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError("paired samples must be equal-length vectors")
    n = a.shape[0]
    if n < 2:
        raise EvaluationError("need at least 2 pairs")
    if bound <= 0:
        raise EvaluationError("equivalence bound must be positive")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        inside = abs(mean) < bound
        p = 0.0 if inside else 1.0
        return TostResult(inside, p, p, mean, df)
    se = sd / math.sqrt(n)
    t_lower = (mean + bound) / se
    t_upper = (mean - bound) / se
    p_lower = student_t_sf(t_lower, df)
    p_upper = student_t_cdf(t_upper, df)
    return TostResult(max(p_lower, p_upper) < alpha, p_lower, p_upper, mean, df)


# ---------------------------------------------------------------------------
# Re-ranking.
# ---------------------------------------------------------------------------

def rerank(
    scorer,
    query,
    candidates,
    top_k: int = 100,
    query_id: str = "q",
    tag: str = "sparsecross",
) -> list[RunEntry]:
    """Score (query, doc) pairs and emit the top_k as ranked run entries.

    ``scorer(query, doc)`` returns a relevance scalar; ``candidates`` is a
    sequence of (doc_id, doc).  Sorting is stable: ties keep the original
    candidate order.  A pair whose scorer raises scores -inf and sinks to
    the bottom.
    """
    candidates = list(candidates)
    if not candidates:
        raise EvaluationError("candidate list must be nonempty")
    scored = []
    for position, (doc_id, doc) in enumerate(candidates):
        try:
            score = float(scorer(query, doc))
        except Exception:
            score = -math.inf
        scored.append((score, position, doc_id))
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [
        RunEntry(query_id, doc_id, rank, score, tag)
        for rank, (score, _pos, doc_id) in enumerate(scored[:top_k], 1)
    ]
