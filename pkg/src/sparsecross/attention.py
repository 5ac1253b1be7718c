"""Generalized windowed cross-attention over subsequence tuples.

A source group's queries attend to a tuple of target segments, each
carrying its own window size (``FULL`` for unwindowed attention).  Scores
of all segments are normalized by a single softmax over the union of
their valid entries, then each probability block is applied to its value
matrix and the results are summed.

Two paddings are supported for out-of-range window slots:

* ``"exclude"`` (default): the slot is removed from the softmax, its
  probability is exactly 0.  This makes windowed attention equal to dense
  attention under a {0, -inf} additive mask.
* ``"zero-logit"``: the slot participates with logit 0, mimicking padding
  key/value vectors with zeros; its probability mass is then discarded by
  the zeroed value rows, so valid entries of a row sum to less than 1.

Attention patterns assign a target tuple to each of the three input
groups (cls / query / doc) and optionally mark document positions as
global tokens that send and receive full attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import memtrack
from .band import (
    BandMatrix,
    band_apply,
    band_apply_backward,
    band_scores,
    band_scores_backward,
    band_validity,
)

FULL = math.inf

GROUPS = ("cls", "query", "doc")

PADDING_MODES = ("exclude", "zero-logit")


class AttentionError(ValueError):
    """Raised for malformed segment tuples, rows without valid targets, or bad patterns."""


def is_full(window) -> bool:
    return window == FULL


@dataclass(frozen=True)
class AttentionPattern:
    """Per-group attention targets: source group -> ((target group, window), ...).

    ``global_positions`` are document-relative indices of tokens with full
    two-way attention (they attend to everything and everything may attend
    to them), used by the QDS variant.
    """

    name: str
    targets: dict[str, tuple[tuple[str, float], ...]]
    global_positions: tuple[int, ...] = ()

    def __post_init__(self):
        for source, tlist in self.targets.items():
            if source not in GROUPS:
                raise AttentionError(f"unknown source group {source!r}")
            seen = [t for t, _ in tlist]
            if len(set(seen)) != len(seen):
                raise AttentionError(f"duplicate target group for source {source!r}")
            for target, window in tlist:
                if target not in GROUPS:
                    raise AttentionError(f"unknown target group {target!r}")
                if not is_full(window) and (int(window) != window or window < 0):
                    raise AttentionError(f"bad window {window!r} for {source}->{target}")
        if any(p < 0 for p in self.global_positions):
            raise AttentionError("global positions must be non-negative")
        if self.global_positions and self.name != "qds":
            raise AttentionError("global positions are only meaningful for the qds pattern")

    def targets_of(self, source: str) -> tuple[tuple[str, float], ...]:
        try:
            return self.targets[source]
        except KeyError:
            raise AttentionError(f"pattern {self.name!r} has no targets for group {source!r}")


def full_pattern() -> AttentionPattern:
    """Every group attends to every group without windows (Fig-style dense baseline)."""
    everything = (("cls", FULL), ("query", FULL), ("doc", FULL))
    return AttentionPattern("full", {g: everything for g in GROUPS})


def longformer_pattern(window) -> AttentionPattern:
    """Symmetric query<->document attention; document self-attention is windowed."""
    everything = (("cls", FULL), ("query", FULL), ("doc", FULL))
    return AttentionPattern(
        "longformer",
        {
            "cls": everything,
            "query": everything,
            "doc": (("cls", FULL), ("query", FULL), ("doc", window)),
        },
    )


def qds_pattern(window, global_positions=()) -> AttentionPattern:
    """Longformer plus designated document global tokens with full two-way attention."""
    everything = (("cls", FULL), ("query", FULL), ("doc", FULL))
    return AttentionPattern(
        "qds",
        {
            "cls": everything,
            "query": everything,
            "doc": (("cls", FULL), ("query", FULL), ("doc", window)),
        },
        global_positions=tuple(int(p) for p in global_positions),
    )


def sparse_pattern(window) -> AttentionPattern:
    """Asymmetric pattern: query tokens attend only to query tokens.

    CLS keeps full attention over all groups and document tokens attend to
    CLS and query fully but only to a local window of other document
    tokens.
    """
    return AttentionPattern(
        "sparse",
        {
            "cls": (("cls", FULL), ("query", FULL), ("doc", FULL)),
            "query": (("query", FULL),),
            "doc": (("cls", FULL), ("query", FULL), ("doc", window)),
        },
    )


PATTERN_FACTORIES = {
    "full": lambda window, globals_=(): full_pattern(),
    "longformer": lambda window, globals_=(): longformer_pattern(window),
    "qds": lambda window, globals_=(): qds_pattern(window, globals_),
    "sparse": lambda window, globals_=(): sparse_pattern(window),
}


def make_pattern(name: str, window, global_positions=()) -> AttentionPattern:
    try:
        factory = PATTERN_FACTORIES[name]
    except KeyError:
        raise AttentionError(
            f"unknown pattern {name!r}; expected one of {sorted(PATTERN_FACTORIES)}"
        )
    return factory(window, global_positions)


# ---------------------------------------------------------------------------
# Segment scores and softmax.
# ---------------------------------------------------------------------------

@dataclass
class SegmentScores:
    """Ordered score blocks of one source group, pre- or post-softmax.

    Each block is a dense (rows, target_len) array for an unwindowed target
    or a BandMatrix for a windowed one; order matches the key/value tuple.
    """

    segments: list

    def __post_init__(self):
        if not self.segments:
            raise AttentionError("segment tuple must be nonempty")
        rows = {self._rows(seg) for seg in self.segments}
        if len(rows) != 1:
            raise AttentionError(f"segments disagree on row count: {sorted(rows)}")

    @staticmethod
    def _rows(seg) -> int:
        return seg.seq_len if isinstance(seg, BandMatrix) else np.asarray(seg).shape[0]

    @property
    def rows(self) -> int:
        return self._rows(self.segments[0])


def segment_softmax(scores, scale: float, padding: str = "exclude") -> SegmentScores:
    """Jointly normalize the score segments of each row.

    Exponentials are taken of scores divided by ``scale`` and normalized
    over the union of valid entries across all segments; invalid entries
    get probability exactly 0.  Rows are max-shifted over their valid
    entries before exponentiation for stability.
    """
    if scale <= 0:
        raise AttentionError(f"scale must be positive, got {scale}")
    if padding not in PADDING_MODES:
        raise AttentionError(f"unknown padding mode {padding!r}")
    if not isinstance(scores, SegmentScores):
        scores = SegmentScores(list(scores))
    values, valids = [], []
    for seg in scores.segments:
        if isinstance(seg, BandMatrix):
            values.append(seg.data)
            valids.append(seg.valid)
        else:
            seg = np.asarray(seg)
            values.append(seg)
            valids.append(None)
    probs = masked_segment_softmax(values, valids, scale, padding)
    out = []
    for seg, p in zip(scores.segments, probs):
        if isinstance(seg, BandMatrix):
            if padding == "zero-logit":
                # Padded slots carry real probability mass here; keep it
                # inspectable but outside the BandMatrix zero-invariant.
                out.append(BandMatrix(np.where(seg.valid, p, 0.0), seg.window, seg.target_len))
            else:
                out.append(BandMatrix(p, seg.window, seg.target_len))
        else:
            out.append(p)
    return SegmentScores(out)


def masked_segment_softmax(values, valids, scale: float, padding: str = "exclude"):
    """Core joint softmax over raw arrays with optional validity masks.

    ``values`` are score blocks of shape (..., rows, width_i); ``valids``
    are matching boolean masks broadcastable to each block (None means all
    valid).  Returns probability blocks of the same shapes.  In
    ``zero-logit`` mode invalid slots take part with logit 0 instead of
    being excluded.
    """
    neg_inf = -np.inf
    scaled = []
    for val, ok in zip(values, valids):
        y = val / scale
        if ok is not None:
            if padding == "zero-logit":
                y = np.where(ok, y, 0.0)
            else:
                y = np.where(ok, y, neg_inf)
        scaled.append(y)
    row_max = scaled[0].max(axis=-1)
    for y in scaled[1:]:
        row_max = np.maximum(row_max, y.max(axis=-1))
    if np.any(np.isneginf(row_max)):
        raise AttentionError("a row has zero valid entries across all segments")
    row_max = row_max[..., None]
    exps = [np.exp(y - row_max) for y in scaled]
    denom = exps[0].sum(axis=-1, keepdims=True)
    for e in exps[1:]:
        denom = denom + e.sum(axis=-1, keepdims=True)
    return [e / denom for e in exps]


def masked_segment_softmax_backward(probs, grad_probs):
    """Adjoint of the joint softmax w.r.t. the scaled logits.

    Standard softmax backward over the concatenation of segments; invalid
    slots hold probability 0 and thus receive gradient 0 automatically.
    """
    dot = np.sum(probs[0] * grad_probs[0], axis=-1, keepdims=True)
    for p, g in zip(probs[1:], grad_probs[1:]):
        dot = dot + np.sum(p * g, axis=-1, keepdims=True)
    return [p * (g - dot) for p, g in zip(probs, grad_probs)]


# ---------------------------------------------------------------------------
# Attention over segment tuples.
# ---------------------------------------------------------------------------

def full_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention: softmax(Q K^T / sqrt(h)) V."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise AttentionError(
            f"incompatible shapes: Q {q.shape}, K {k.shape}, V {v.shape}"
        )
    scores = np.matmul(q, np.swapaxes(k, -1, -2))
    (p,) = masked_segment_softmax([scores], [None], math.sqrt(q.shape[-1]))
    return np.matmul(p, v)


def attend_segments(
    q: np.ndarray,
    segments,
    scale: float,
    padding: str = "exclude",
    want_cache: bool = False,
):
    """Windowed cross-attention core over arrays with leading batch axes.

    ``segments`` is a nonempty list of ``(k, v, window, extra_invalid)``
    tuples; ``extra_invalid`` is an optional boolean (rows, 2w+1) mask of
    additionally excluded band slots (True = excluded) and must be None
    for unwindowed segments.  Returns the attention output, plus a cache
    for the adjoint when requested.
    """
    if not segments:
        raise AttentionError("segment tuple must be nonempty")
    s = q.shape[-2]
    values, valids, metas = [], [], []
    for k, v, window, extra_invalid in segments:
        if q.shape[-1] != k.shape[-1]:
            raise AttentionError("query/key feature dims differ")
        if k.shape[-2] != v.shape[-2]:
            raise AttentionError("key/value row counts differ")
        if is_full(window):
            if extra_invalid is not None:
                raise AttentionError("extra_invalid only applies to windowed segments")
            scores = np.matmul(q, np.swapaxes(k, -1, -2))
            ok = None
        else:
            scores = band_scores(q, k, int(window))
            ok = band_validity(s, int(window), k.shape[-2])
            if extra_invalid is not None:
                if padding == "zero-logit":
                    # Zero-logit padding covers only out-of-range slots;
                    # explicit exclusions stay hard.
                    scores = np.where(extra_invalid, -np.inf, scores)
                else:
                    ok = ok & ~extra_invalid
        values.append(scores)
        valids.append(ok)
        metas.append((k, v, window))
    # Score buffers of all segments coexist for the joint softmax, which
    # rewrites them into probabilities; account for them as one block whose
    # lifetime ends with the segment outputs.
    score_bytes = sum(int(val.nbytes) for val in values)
    with memtrack.hold(score_bytes, "attn_scores"):
        probs = masked_segment_softmax(values, valids, scale, padding)
        out = None
        for p, (k, v, window) in zip(probs, metas):
            part = np.matmul(p, v) if is_full(window) else band_apply(p, v, int(window))
            out = part if out is None else out + part
    if not want_cache:
        return out
    cache = {"q": q, "probs": probs, "metas": metas, "scale": scale}
    return out, cache


def attend_segments_backward(cache, grad_out: np.ndarray):
    """Adjoint of attend_segments.

    Returns (grad_q, [(grad_k, grad_v), ...]) in segment order.  Gradients
    at excluded or out-of-range slots never propagate: their probability is
    0 (exclude mode) or their logits are constants (zero-logit padding), and
    the band adjoints drop out-of-range slots by construction.
    """
    q, probs, metas, scale = cache["q"], cache["probs"], cache["metas"], cache["scale"]
    grad_probs, grad_vs = [], []
    for p, (k, v, window) in zip(probs, metas):
        if is_full(window):
            grad_probs.append(np.matmul(grad_out, np.swapaxes(v, -1, -2)))
            grad_vs.append(np.matmul(np.swapaxes(p, -1, -2), grad_out))
        else:
            gp, gv = band_apply_backward(grad_out, p, v, int(window))
            grad_probs.append(gp)
            grad_vs.append(gv)
    grad_scaled = masked_segment_softmax_backward(probs, grad_probs)
    grad_q = np.zeros_like(q)
    grad_kv = []
    for gy, gv, (k, v, window) in zip(grad_scaled, grad_vs, metas):
        ga = gy / scale
        if is_full(window):
            grad_q += np.matmul(ga, k)
            gk = np.matmul(np.swapaxes(ga, -1, -2), q)
        else:
            gq_part, gk = band_scores_backward(ga, q, k, int(window))
            grad_q += gq_part
        grad_kv.append((gk, gv))
    return grad_q, grad_kv


def windowed_cross_attention(
    q: np.ndarray, kv, padding: str = "exclude"
) -> np.ndarray:
    """Attention of Q over a tuple of (K_i, V_i, w_i) target segments.

    Probabilities come from one softmax over all segments (scale sqrt(h));
    the output is the sum of each probability block applied to its values.
    """
    q = np.asarray(q)
    kv = list(kv)
    if not kv:
        raise AttentionError("segment tuple must be nonempty")
    segments = []
    for k, v, window in kv:
        k = np.asarray(k)
        v = np.asarray(v)
        if v.shape[-1] != q.shape[-1]:
            raise AttentionError("value feature dim differs from query")
        segments.append((k, v, window, None))
    return attend_segments(q, segments, math.sqrt(q.shape[-1]), padding)


def qds_band_exclusions(doc_len: int, window: int, global_positions) -> np.ndarray | None:
    """Band slots of the doc-doc segment that hit global tokens (covered densely)."""
    if not len(global_positions):
        return None
    width = 2 * int(window) + 1
    targets = np.arange(doc_len)[:, None] + np.arange(width)[None, :] - int(window)
    is_global = np.zeros(doc_len + 1, dtype=bool)
    is_global[list(global_positions)] = True
    excluded = is_global[np.clip(targets, 0, doc_len)]
    excluded &= band_validity(doc_len, int(window), doc_len)
    return excluded


def group_attention(
    qkv: dict,
    source: str,
    pattern: AttentionPattern,
    scale: float,
    padding: str = "exclude",
    want_cache: bool = False,
):
    """Attention output for one source group under a pattern.

    ``qkv`` maps group name to (Q, K, V) arrays of shape (..., rows, d).
    Handles the QDS global tokens: they are appended as an extra dense
    segment for document sources (with matching band slots excluded so no
    pair is counted twice), and global source rows are recomputed with
    full attention over all groups.
    """
    q = qkv[source][0]
    targets = pattern.targets_of(source)
    globals_ = pattern.global_positions
    if globals_:
        doc_len = qkv["doc"][1].shape[-2]
        if max(globals_) >= doc_len:
            raise AttentionError("global positions outside the document group")
    segments = []
    for target, window in targets:
        if target not in qkv:
            raise AttentionError(f"pattern references absent group {target!r}")
        k, v = qkv[target][1], qkv[target][2]
        extra = None
        if (
            globals_
            and source == "doc"
            and target == "doc"
            and not is_full(window)
        ):
            extra = qds_band_exclusions(doc_len, int(window), globals_)
        segments.append((k, v, window, extra))
    if globals_ and source == "doc":
        kd, vd = qkv["doc"][1], qkv["doc"][2]
        idx = np.asarray(globals_, dtype=np.intp)
        segments.append((kd[..., idx, :], vd[..., idx, :], FULL, None))
    result = attend_segments(q, segments, scale, padding, want_cache=want_cache)
    out, cache = result if want_cache else (result, None)

    overwrite_cache = None
    if globals_ and source == "doc":
        # Global rows get full attention over every group; their windowed
        # results above are discarded.
        idx = np.asarray(globals_, dtype=np.intp)
        qg = q[..., idx, :]
        gsegs = [(qkv[g][1], qkv[g][2], FULL, None) for g in GROUPS]
        gres = attend_segments(qg, gsegs, scale, padding, want_cache=want_cache)
        gout, overwrite_cache = gres if want_cache else (gres, None)
        out = np.array(out)
        out[..., idx, :] = gout
    if not want_cache:
        return out
    return out, {"segments": cache, "overwrite": overwrite_cache, "globals": globals_}


def group_attention_backward(cache, grad_out: np.ndarray, source: str, pattern: AttentionPattern):
    """Adjoint of group_attention.

    Returns (grad_q, contributions) where contributions is a list of
    (target_group, index_or_None, grad_k, grad_v); ``index_or_None`` holds
    the doc-relative positions for the QDS globals segment.
    """
    globals_ = cache["globals"]
    targets = pattern.targets_of(source)
    if globals_ and source == "doc":
        idx = np.asarray(globals_, dtype=np.intp)
        grad_local = np.array(grad_out)
        grad_local[..., idx, :] = 0.0
        gq, seg_grads = attend_segments_backward(cache["segments"], grad_local)
        gq_glob, glob_grads = attend_segments_backward(
            cache["overwrite"], grad_out[..., idx, :]
        )
        gq = np.array(gq)
        gq[..., idx, :] += gq_glob
        contributions = []
        for (target, _w), (gk, gv) in zip(targets, seg_grads[: len(targets)]):
            contributions.append((target, None, gk, gv))
        gk, gv = seg_grads[len(targets)]
        contributions.append(("doc", idx, gk, gv))
        for g, (gk, gv) in zip(GROUPS, glob_grads):
            contributions.append((g, None, gk, gv))
        return gq, contributions
    gq, seg_grads = attend_segments_backward(cache["segments"], grad_out)
    contributions = [
        (target, None, gk, gv) for (target, _w), (gk, gv) in zip(targets, seg_grads)
    ]
    return gq, contributions


def apply_pattern(
    partition,
    qkv: dict,
    pattern: AttentionPattern,
    scale: float | None = None,
    padding: str = "exclude",
):
    """Attention outputs (O_cls, O_query, O_doc) for all groups under a pattern.

    ``qkv`` maps each group to its (Q, K, V) matrices; ``partition`` is
    accepted for interface symmetry with the encoder and only used to
    sanity-check group sizes when provided.
    """
    for g in GROUPS:
        if g not in qkv:
            raise AttentionError(f"missing Q/K/V for group {g!r}")
    if partition is not None:
        for g in GROUPS:
            expect = partition.group_len(g)
            if qkv[g][0].shape[-2] != expect:
                raise AttentionError(
                    f"group {g!r} queries have {qkv[g][0].shape[-2]} rows, partition says {expect}"
                )
    if scale is None:
        scale = math.sqrt(qkv["cls"][0].shape[-1])
    return tuple(
        group_attention(qkv, g, pattern, scale, padding) for g in GROUPS
    )
