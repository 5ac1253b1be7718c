"""Desk-scale training: pairwise losses, AdamW, and a synthetic ranking task.

The synthetic task exercises lexical matching: a query is a handful of
vocabulary terms, a positive document contains all of them among
distractors, a negative none.  Validation pools grade relevance by
term-overlap count, so ranking quality is measured with nDCG@10 against
an exactly known ideal ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import CrossEncoder, EncoderConfig, assemble_input
from .evaluation import RunEntry, ndcg_at_k
from .tokenizer import NUM_SPECIAL_TOKENS


class TrainingError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Losses.  Each returns (mean loss, (d_loss/d_s_pos, d_loss/d_s_neg)).
# ---------------------------------------------------------------------------

def margin_mse_loss(s_pos, s_neg, t_pos, t_neg):
    """Squared difference between score margin and teacher margin, batch mean."""
    s_pos, s_neg = np.asarray(s_pos, dtype=np.float64), np.asarray(s_neg, dtype=np.float64)
    t_pos, t_neg = np.asarray(t_pos, dtype=np.float64), np.asarray(t_neg, dtype=np.float64)
    gap = (s_pos - s_neg) - (t_pos - t_neg)
    return float(np.mean(gap * gap))


def margin_mse_grad(s_pos, s_neg, t_pos, t_neg):
    gap = (np.asarray(s_pos) - np.asarray(s_neg)) - (np.asarray(t_pos) - np.asarray(t_neg))
    scale = 2.0 / gap.size
    return scale * gap, -scale * gap


def ranknet_loss(s_pos, s_neg):
    """log(1 + exp(-(s_pos - s_neg))), overflow-safe, batch mean."""
    delta = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, -delta)))


def ranknet_grad(s_pos, s_neg):
    delta = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    # d/d_delta log(1+e^-delta) = -sigmoid(-delta)
    g = -_sigmoid(-delta) / delta.size
    return g, -g


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


LOSSES = ("margin_mse", "ranknet")


# ---------------------------------------------------------------------------
# Optimizer.
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay and linear warmup.

    When ``total_steps`` is set, the rate decays linearly from its peak to
    zero between the end of warmup and ``total_steps``.
    """

    def __init__(
        self,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        warmup_steps: int = 0,
        total_steps: int | None = None,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        t = self.step_count
        if self.warmup_steps > 0 and t <= self.warmup_steps:
            return self.lr * t / self.warmup_steps
        if self.total_steps is not None and self.total_steps > self.warmup_steps:
            frac = (t - self.warmup_steps) / (self.total_steps - self.warmup_steps)
            return self.lr * max(0.0, 1.0 - min(1.0, frac))
        return self.lr

    def step(self, weights: dict, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        lr_t = self.current_lr()
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in sorted(weights):
            g = np.asarray(grads[name], dtype=np.float64)
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self._m[name] = m
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            w = weights[name]
            w -= (lr_t * (update + self.weight_decay * w)).astype(w.dtype)


# ---------------------------------------------------------------------------
# Synthetic term-overlap task.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Triple:
    query: tuple
    positive: tuple
    negative: tuple
    teacher_pos: float | None = None
    teacher_neg: float | None = None

    def __post_init__(self):
        if tuple(self.positive) == tuple(self.negative):
            raise TrainingError("positive and negative documents must differ")
        if (self.teacher_pos is None) != (self.teacher_neg is None):
            raise TrainingError("teacher scores must be present for both documents or neither")


@dataclass(frozen=True)
class ValidationQuery:
    query_id: str
    query: tuple
    candidates: list  # (doc_id, token tuple)
    relevance: dict  # doc_id -> overlap grade


@dataclass(frozen=True)
class SyntheticTask:
    """Term-overlap ranking over a small integer vocabulary."""

    vocab_words: int = 64
    query_terms: int = 4
    doc_len: int = 16

    def __post_init__(self):
        if self.query_terms < 1 or self.doc_len < self.query_terms:
            raise TrainingError("doc_len must be >= query_terms >= 1")
        if self.vocab_words < 2 * self.query_terms:
            raise TrainingError("vocabulary too small for disjoint distractors")

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIAL_TOKENS + self.vocab_words

    def _words(self) -> np.ndarray:
        return np.arange(NUM_SPECIAL_TOKENS, self.vocab_size)

    def overlap(self, query, doc) -> int:
        """Number of distinct query terms present in the document."""
        return len(set(query) & set(doc))

    def _doc_with_overlap(self, rng, query, count: int) -> tuple:
        terms = rng.choice(np.asarray(query), size=count, replace=False) if count else np.empty(0, int)
        others = np.setdiff1d(self._words(), np.asarray(query))
        fill = rng.choice(others, size=self.doc_len - count, replace=True)
        doc = np.concatenate([terms, fill])
        rng.shuffle(doc)
        return tuple(int(t) for t in doc)

    def sample_triple(self, rng) -> Triple:
        query = tuple(int(t) for t in rng.choice(self._words(), size=self.query_terms, replace=False))
        positive = self._doc_with_overlap(rng, query, self.query_terms)
        negative = self._doc_with_overlap(rng, query, 0)
        return Triple(
            query,
            positive,
            negative,
            teacher_pos=float(self.query_terms),
            teacher_neg=0.0,
        )

    def sample_validation(self, rng, n_queries: int, per_level: int = 4) -> list[ValidationQuery]:
        """Pools with ``per_level`` documents at every overlap grade 0..query_terms."""
        out = []
        for qi in range(n_queries):
            query = tuple(
                int(t) for t in rng.choice(self._words(), size=self.query_terms, replace=False)
            )
            candidates, relevance = [], {}
            i = 0
            for level in range(self.query_terms + 1):
                for _ in range(per_level):
                    doc_id = f"d{i}"
                    candidates.append((doc_id, self._doc_with_overlap(rng, query, level)))
                    relevance[doc_id] = level
                    i += 1
            order = rng.permutation(len(candidates))
            candidates = [candidates[j] for j in order]
            out.append(ValidationQuery(f"q{qi}", query, candidates, relevance))
        return out


def validation_ndcg(model: CrossEncoder, val_set, k: int = 10) -> tuple[dict[str, float], float]:
    """nDCG@k of the model's ranking over each validation pool.

    All documents of a pool share one length, so each query is scored with
    a single batched forward pass.
    """
    run: list[RunEntry] = []
    qrels: dict[str, dict[str, int]] = {}
    for vq in val_set:
        seqs = [
            assemble_input(vq.query, doc, model.config.max_positions) for _, doc in vq.candidates
        ]
        ids = np.stack([s.ids for s in seqs])
        scores = model.score(ids, seqs[0].partition)
        order = sorted(
            range(len(vq.candidates)), key=lambda j: (-float(scores[j]), j)
        )
        for rank, j in enumerate(order, 1):
            run.append(RunEntry(vq.query_id, vq.candidates[j][0], rank, float(scores[j])))
        qrels[vq.query_id] = dict(vq.relevance)
    return ndcg_at_k(run, qrels, k)


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    loss: float
    ndcg10: float | None = None


@dataclass
class TrainResult:
    model: CrossEncoder
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def final_ndcg(self) -> float | None:
        for row in reversed(self.trace):
            if row.ndcg10 is not None:
                return row.ndcg10
        return None


def _batch_arrays(triples, max_positions):
    queries = [t.query for t in triples]
    seqs = [assemble_input(q, t.positive, max_positions) for q, t in zip(queries, triples)]
    seqs += [assemble_input(q, t.negative, max_positions) for q, t in zip(queries, triples)]
    lengths = {s.ids.shape[0] for s in seqs}
    if len(lengths) != 1:
        raise TrainingError("triples in one batch must share sequence length")
    return np.stack([s.ids for s in seqs]), seqs[0].partition


def train_toy(
    config: EncoderConfig,
    dataset,
    steps: int,
    lr: float,
    seed: int = 0,
    batch_pairs: int = 16,
    loss: str = "margin_mse",
    weight_decay: float = 0.01,
    warmup_fraction: float = 0.01,
    lr_decay: bool = True,
    eval_every: int = 0,
    val_set=None,
    val_k: int = 10,
) -> TrainResult:
    """Train a fresh model on triples; returns weights plus a metric trace.

    ``dataset`` is either a SyntheticTask, sampled afresh each step, or a
    fixed sequence of triples cycled in order.  Warmup covers
    ``warmup_fraction`` of the steps; with ``lr_decay`` the rate then
    anneals linearly to zero, which tightens final convergence at this
    scale.  The trace records loss per step and, when a validation set is
    given, periodic (and final) nDCG@10.  A non-finite loss aborts with
    the step index.
    """
    if loss not in LOSSES:
        raise TrainingError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    if isinstance(dataset, SyntheticTask) and config.vocab_size < dataset.vocab_size:
        raise TrainingError("encoder vocabulary smaller than task vocabulary")
    if not isinstance(dataset, SyntheticTask) and not dataset:
        raise TrainingError("fixed dataset must be nonempty")
    model = CrossEncoder(config, seed=seed)
    opt = AdamW(
        lr,
        weight_decay=weight_decay,
        warmup_steps=max(1, round(warmup_fraction * steps)),
        total_steps=steps if lr_decay else None,
    )
    rng = np.random.default_rng(seed + 0x5EED)
    trace: list[TraceRow] = []
    cursor = 0
    for step in range(1, steps + 1):
        if isinstance(dataset, SyntheticTask):
            triples = [dataset.sample_triple(rng) for _ in range(batch_pairs)]
        else:
            triples = [dataset[(cursor + i) % len(dataset)] for i in range(batch_pairs)]
            cursor += batch_pairs
        ids, partition = _batch_arrays(triples, config.max_positions)
        scores, cache = model.score(ids, partition, want_cache=True)
        s_pos, s_neg = scores[:batch_pairs], scores[batch_pairs:]
        if loss == "margin_mse":
            if any(t.teacher_pos is None for t in triples):
                raise TrainingError("margin_mse requires teacher scores on every triple")
            t_pos = np.array([t.teacher_pos for t in triples])
            t_neg = np.array([t.teacher_neg for t in triples])
            value = margin_mse_loss(s_pos, s_neg, t_pos, t_neg)
            d_pos, d_neg = margin_mse_grad(s_pos, s_neg, t_pos, t_neg)
        else:
            value = ranknet_loss(s_pos, s_neg)
            d_pos, d_neg = ranknet_grad(s_pos, s_neg)
        if not math.isfinite(value):
            raise TrainingDivergedError(step)
        grads = model.backward(cache, np.concatenate([d_pos, d_neg]))
        opt.step(model.weights, grads)
        row = TraceRow(step, value)
        if val_set is not None and (
            step == steps or (eval_every > 0 and step % eval_every == 0)
        ):
            row.ndcg10 = validation_ndcg(model, val_set, val_k)[1]
        trace.append(row)
    return TrainResult(model, trace)


def write_trace_csv(trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,ndcg10\n")
        for row in trace:
            nd = "" if row.ndcg10 is None else f"{row.ndcg10:.6f}"
            fh.write(f"{row.step},{row.loss:.8f},{nd}\n")


# ---------------------------------------------------------------------------
# Gradient verification.
# ---------------------------------------------------------------------------

def grad_check(
    model: CrossEncoder,
    triples,
    eps: float = 1e-4,
    samples: int = 200,
    loss: str = "margin_mse",
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least ``samples`` parameters spread over every weight
    tensor.  The relative error of a pair (a, fd) is |a - fd| / max(|a|,
    |fd|), or the absolute difference when both are below 1e-6.
    """
    triples = list(triples)
    batch_pairs = len(triples)
    ids, partition = _batch_arrays(triples, model.config.max_positions)

    def loss_and_grads(want_grads: bool):
        if want_grads:
            scores, cache = model.score(ids, partition, want_cache=True)
        else:
            scores = model.score(ids, partition)
        s_pos, s_neg = scores[:batch_pairs], scores[batch_pairs:]
        if loss == "margin_mse":
            t_pos = np.array([t.teacher_pos for t in triples])
            t_neg = np.array([t.teacher_neg for t in triples])
            value = margin_mse_loss(s_pos, s_neg, t_pos, t_neg)
            d_pos, d_neg = margin_mse_grad(s_pos, s_neg, t_pos, t_neg)
        else:
            value = ranknet_loss(s_pos, s_neg)
            d_pos, d_neg = ranknet_grad(s_pos, s_neg)
        if not math.isfinite(value):
            raise TrainingError("non-finite loss in gradient check")
        if not want_grads:
            return value, None
        return value, model.backward(cache, np.concatenate([d_pos, d_neg]))

    _, grads = loss_and_grads(True)
    rng = np.random.default_rng(seed)
    names = sorted(model.weights)
    total = sum(model.weights[n].size for n in names)
    worst = 0.0
    for name in names:
        w = model.weights[name]
        count = max(1, round(samples * w.size / total))
        coords = rng.choice(w.size, size=min(count, w.size), replace=False)
        flat = w.reshape(-1) if w.ndim else w
        gflat = np.asarray(grads[name]).reshape(-1)
        for idx in np.atleast_1d(coords):
            original = flat[idx] if w.ndim else float(w)
            _poke(w, idx, original + eps)
            up, _ = loss_and_grads(False)
            _poke(w, idx, original - eps)
            down, _ = loss_and_grads(False)
            _poke(w, idx, original)
            fd = (up - down) / (2.0 * eps)
            a = float(gflat[idx])
            denom = max(abs(a), abs(fd))
            err = abs(a - fd) if denom < 1e-6 else abs(a - fd) / denom
            worst = max(worst, err)
    return worst


def _poke(w: np.ndarray, idx: int, value: float) -> None:
    if w.ndim:
        w.reshape(-1)[idx] = value
    else:
        w[...] = value
