"""Efficiency benchmark: random batches, per-document latency, tracked memory, FLOPs.

The protocol mirrors the efficiency methodology this library exists to
study: random token ids with a fixed query length, document lengths
swept over a list, the QDS variant marking a global token at every 30th
document position, and a capped batch size.  Timing takes the median
wall-clock of repeated batched forward passes after discarded warmups;
memory is the instrumented logical-allocation peak (see ``memtrack``),
and the FLOP model counts multiply-adds of the attention products plus
the projection and feed-forward matmuls.
"""

from __future__ import annotations

import math
import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import memtrack
from .attention import AttentionPattern, is_full
from .encoder import (
    CrossEncoder,
    EncoderConfig,
    SubsequencePartition,
    TokenSequence,
    resolve_pattern,
)
from .tokenizer import CLS_ID, NUM_SPECIAL_TOKENS, SEP_ID

PATTERN_NAMES = ("full", "longformer", "qds", "sparse")

MAX_BATCH = 100


class BenchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchSpec:
    """One benchmark configuration; ``doc_lens`` yields one record per length."""

    pattern: str
    window: float
    query_len: int = 10
    doc_lens: tuple[int, ...] = (54, 164, 1024, 4086)
    batch_size: int = 8
    repetitions: int = 5
    warmup: int = 2
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERN_NAMES:
            raise BenchConfigError(f"unknown pattern {self.pattern!r}")
        if not is_full(self.window) and (int(self.window) != self.window or self.window < 0):
            raise BenchConfigError(f"bad window {self.window!r}")
        if self.query_len < 1:
            raise BenchConfigError("query_len must be >= 1")
        if not self.doc_lens or any(d < 1 for d in self.doc_lens):
            raise BenchConfigError("doc lengths must be >= 1")
        if not 1 <= self.batch_size <= MAX_BATCH:
            raise BenchConfigError(f"batch size must be in [1, {MAX_BATCH}]")
        if self.repetitions < 3:
            raise BenchConfigError("need at least 3 repetitions")
        if self.warmup < 0:
            raise BenchConfigError("warmup must be >= 0")


@dataclass(frozen=True)
class BenchRecord:
    pattern: str
    window: float
    query_len: int
    doc_len: int
    batch: int
    time_per_doc: float | None
    time_variance: float | None
    peak_bytes: int | None
    attn_score_bytes: int | None
    flops: int
    threads: int
    oom: bool = False


@dataclass(frozen=True)
class Batch:
    """Uniform-length random sequences plus their resolved attention pattern."""

    sequences: list[TokenSequence]
    pattern: AttentionPattern

    @property
    def ids(self) -> np.ndarray:
        return np.stack([s.ids for s in self.sequences])

    @property
    def partition(self) -> SubsequencePartition:
        return self.sequences[0].partition


def default_model_config(
    spec: BenchSpec,
    layers: int = 2,
    embed_dim: int = 32,
    heads: int = 2,
    ff_dim: int = 64,
    vocab_size: int = 1024,
) -> EncoderConfig:
    max_positions = spec.query_len + max(spec.doc_lens) + 3
    return EncoderConfig(
        layers=layers,
        embed_dim=embed_dim,
        heads=heads,
        ff_dim=ff_dim,
        max_positions=max_positions,
        vocab_size=vocab_size,
        pattern=spec.pattern,
        window=spec.window,
        precision=spec.precision,
    )


def gen_random_batch(spec: BenchSpec, doc_len: int, config: EncoderConfig) -> Batch:
    """Seeded batch of uniform random token sequences of one document length."""
    rng = np.random.default_rng((spec.seed, doc_len))
    sequences = []
    for _ in range(spec.batch_size):
        query = rng.integers(NUM_SPECIAL_TOKENS, config.vocab_size, size=spec.query_len)
        doc = rng.integers(NUM_SPECIAL_TOKENS, config.vocab_size, size=doc_len)
        ids = np.concatenate([[CLS_ID], query, [SEP_ID], doc, [SEP_ID]])
        partition = SubsequencePartition(
            (0, 1), (1, spec.query_len + 2), (spec.query_len + 2, spec.query_len + doc_len + 3)
        )
        sequences.append(TokenSequence(ids, partition))
    return Batch(sequences, resolve_pattern(config, sequences[0].partition))


# ---------------------------------------------------------------------------
# FLOP model.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlopBreakdown:
    """Multiply-add counts of one forward pass; matmul work only."""

    attention_qk: int
    attention_pv: int
    projections: int
    feed_forward: int
    relevance_head: int
    window_exceeds_dense: bool

    @property
    def attention(self) -> int:
        return self.attention_qk + self.attention_pv

    @property
    def total(self) -> int:
        return self.attention + self.projections + self.feed_forward + self.relevance_head


def flop_count(
    pattern: AttentionPattern,
    s_groups: tuple[int, int, int],
    h: int,
    layers: int,
    heads: int = 1,
    ff_dim: int | None = None,
) -> FlopBreakdown:
    """Closed-form multiply-add count for one sequence forward pass.

    A windowed segment of ``rows`` source rows costs rows * (2w+1) * h for
    each of the score and value products, padded slots included, matching
    the naive kernel's instrumented count exactly.  An unwindowed segment
    costs rows * target_len * h.  Splitting h over heads leaves the totals
    unchanged.  The edge case where a window is at least as expensive as
    the dense product (2w+1 >= target length) is flagged.
    """
    del heads  # rows x width x d_head per head, summed over heads = rows x width x h
    if ff_dim is None:
        ff_dim = 4 * h
    lens = dict(zip(("cls", "query", "doc"), s_groups))
    s = sum(s_groups)
    qk = pv = 0
    edge = False
    for source in ("cls", "query", "doc"):
        rows = lens[source]
        for target, window in pattern.targets_of(source):
            if is_full(window):
                cost = rows * lens[target] * h
            else:
                width = 2 * int(window) + 1
                cost = rows * width * h
                if width >= lens[target]:
                    edge = True
            qk += cost
            pv += cost
    if pattern.global_positions:
        g = len(pattern.global_positions)
        # Document rows attend to the globals as an extra dense segment, and
        # each global row is recomputed with full attention over the sequence.
        extra = lens["doc"] * g * h + g * s * h
        qk += extra
        pv += extra
    projections = 4 * s * h * h
    feed_forward = 2 * s * h * ff_dim
    return FlopBreakdown(
        attention_qk=qk * layers,
        attention_pv=pv * layers,
        projections=projections * layers,
        feed_forward=feed_forward * layers,
        relevance_head=h,
        window_exceeds_dense=edge,
    )


# ---------------------------------------------------------------------------
# Measurement.
# ---------------------------------------------------------------------------

def _thread_count() -> int:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        value = os.environ.get(var)
        if value and value.isdigit():
            return int(value)
    return os.cpu_count() or 1


def measure(
    model: CrossEncoder,
    batch: Batch,
    spec: BenchSpec,
    mem_limit_bytes: int | None = None,
) -> BenchRecord:
    """Median per-document latency and tracked peak memory for one batch.

    Warmup rounds run first and are discarded.  Memory is measured in a
    separate tracked forward pass with the model weights registered, so
    ``peak_bytes`` always covers them; an out-of-memory condition (or a
    tracked allocation beyond ``mem_limit_bytes``) marks the record as
    unmeasurable rather than failing the sweep.
    """
    ids = batch.ids
    partition = batch.partition
    doc_len = partition.group_len("doc") - 1
    groups = (1, partition.group_len("query"), partition.group_len("doc"))
    flops = flop_count(
        batch.pattern,
        groups,
        model.config.embed_dim,
        model.config.layers,
        model.config.heads,
        model.config.ff_dim,
    ).total
    threads = _thread_count()
    try:
        with memtrack.track(limit_bytes=mem_limit_bytes) as tracker:
            tracker.allocate(model.weight_nbytes, "weights")
            model.score(ids, partition)
        times = []
        for _ in range(spec.warmup):
            model.score(ids, partition)
        for _ in range(spec.repetitions):
            start = time.perf_counter()
            model.score(ids, partition)
            times.append((time.perf_counter() - start) / spec.batch_size)
    except MemoryError:
        return BenchRecord(
            pattern=spec.pattern,
            window=spec.window,
            query_len=spec.query_len,
            doc_len=doc_len,
            batch=spec.batch_size,
            time_per_doc=None,
            time_variance=None,
            peak_bytes=None,
            attn_score_bytes=None,
            flops=flops,
            threads=threads,
            oom=True,
        )
    return BenchRecord(
        pattern=spec.pattern,
        window=spec.window,
        query_len=spec.query_len,
        doc_len=doc_len,
        batch=spec.batch_size,
        time_per_doc=statistics.median(times),
        time_variance=statistics.pvariance(times),
        peak_bytes=tracker.peak_bytes,
        attn_score_bytes=tracker.tag_peak("attn_scores"),
        flops=flops,
        threads=threads,
    )


def run_bench(spec: BenchSpec, model_config: EncoderConfig | None = None, **size_kwargs) -> list[BenchRecord]:
    """Measure one record per document length in the spec."""
    config = model_config or default_model_config(spec, **size_kwargs)
    model = CrossEncoder(config, seed=spec.seed)
    records = []
    for doc_len in spec.doc_lens:
        batch = gen_random_batch(spec, doc_len, config)
        records.append(measure(model, batch, spec))
    return records


# ---------------------------------------------------------------------------
# Report rendering.
# ---------------------------------------------------------------------------

CSV_HEADER = "pattern,w,query_len,doc_len,batch,time_per_doc_s,peak_bytes,flops"

REPORT_FORMATS = ("csv", "md")


def _fmt_window(window) -> str:
    return "inf" if is_full(window) else str(int(window))


def _cell(value, fmt: str) -> str:
    return "OOM" if value is None else format(value, fmt)


def emit_report(records, format: str = "csv", baseline: tuple | None = None) -> str:
    """Render records as CSV or an aligned markdown table.

    ``baseline`` names a (pattern, window) pair; markdown output then adds
    relative-difference columns (x - base) / base against the baseline
    record of the same document length.  Unmeasurable cells render as
    ``OOM``.
    """
    records = list(records)
    if not records:
        raise BenchConfigError("no records to report")
    if format == "csv":
        lines = [CSV_HEADER]
        for r in records:
            lines.append(
                ",".join(
                    [
                        r.pattern,
                        _fmt_window(r.window),
                        str(r.query_len),
                        str(r.doc_len),
                        str(r.batch),
                        _cell(r.time_per_doc, ".6e"),
                        _cell(r.peak_bytes, "d"),
                        str(r.flops),
                    ]
                )
            )
        return "\n".join(lines) + "\n"
    if format != "md":
        raise BenchConfigError(f"unknown report format {format!r}")

    base_by_doc = {}
    if baseline is not None:
        base_pattern, base_window = baseline
        for r in records:
            if r.pattern == base_pattern and r.window == base_window:
                base_by_doc[r.doc_len] = r
        if not base_by_doc:
            raise BenchConfigError(f"baseline {baseline!r} matches no record")

    def rel(value, base) -> str:
        if value is None or base is None or base == 0:
            return ""
        return f"({(value - base) / base:+.0%})"

    header = ["pattern", "w", "query_len", "doc_len", "batch", "time_per_doc_s"]
    if baseline:
        header.append("vs_base")
    header += ["peak_bytes"]
    if baseline:
        header.append("vs_base")
    header += ["flops"]
    rows = []
    for r in records:
        base = base_by_doc.get(r.doc_len)
        row = [
            r.pattern,
            _fmt_window(r.window),
            str(r.query_len),
            str(r.doc_len),
            str(r.batch),
            _cell(r.time_per_doc, ".3e"),
        ]
        if baseline:
            row.append(rel(r.time_per_doc, base.time_per_doc if base else None))
        row.append(_cell(r.peak_bytes, "d"))
        if baseline:
            row.append(rel(r.peak_bytes, base.peak_bytes if base else None))
        row.append(str(r.flops))
        rows.append(row)
    widths = [max(len(header[i]), *(len(row[i]) for row in rows)) for i in range(len(header))]

    def fmt_row(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    lines = [fmt_row(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt_row(row) for row in rows]
    return "\n".join(lines) + "\n"
