"""Dense masked reference implementations for verification.

Everything here recomputes model outputs along an independent route:
attention patterns become explicit (seq, seq) boolean masks built by
brute-force enumeration, and the encoder is a plain dense transformer
that applies the mask additively inside a standard softmax.  The band
kernels, segment softmax, and grouped attention of the production path
are never used, so agreement between the two routes is meaningful.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .attention import FULL, AttentionPattern, is_full
from .encoder import LAYER_NORM_EPS, EncoderConfig, SubsequencePartition


def _locate(partition: SubsequencePartition, pos: int) -> tuple[str, int]:
    for group in ("cls", "query", "doc"):
        lo, hi = partition.span(group)
        if lo <= pos < hi:
            return group, pos - lo
    raise ValueError(f"position {pos} outside partition")


def pattern_mask(pattern: AttentionPattern, partition: SubsequencePartition) -> np.ndarray:
    """Boolean (seq, seq) mask: entry (i, t) is True iff i may attend to t.

    Built position by position from the pattern definition: a target is
    allowed if its group appears in the source group's target list and
    either the window is unbounded or the group-relative offset fits the
    window.  QDS global document tokens additionally attend to every
    position and are attendable from every document position.
    """
    s = partition.seq_len
    globals_ = set(pattern.global_positions)
    mask = np.zeros((s, s), dtype=bool)
    for i in range(s):
        gi, ri = _locate(partition, i)
        targets = dict(pattern.targets.get(gi, ()))
        for t in range(s):
            gt, rt = _locate(partition, t)
            ok = False
            if gt in targets:
                w = targets[gt]
                ok = is_full(w) or abs(rt - ri) <= w
            if globals_ and gi == "doc":
                if ri in globals_:
                    ok = True
                if gt == "doc" and rt in globals_:
                    ok = True
            mask[i, t] = ok
    return mask


def masked_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, scale: float
) -> np.ndarray:
    """Straightforward dense attention with a {0, -inf} additive mask."""
    logits = (q @ k.T) / scale
    logits = np.where(mask, logits, -np.inf)
    if np.any(~mask.any(axis=1)):
        raise ValueError("mask leaves a row with no attendable position")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)) @ v


def reference_encoder_forward(
    ids: np.ndarray,
    partition: SubsequencePartition,
    pattern: AttentionPattern,
    config: EncoderConfig,
    weights: dict,
) -> np.ndarray:
    """Dense masked-attention encoder over a single (seq,) id vector."""
    ids = np.asarray(ids)
    s = ids.shape[0]
    mask = pattern_mask(pattern, partition)
    x = weights["tok_emb"][ids] + weights["pos_emb"][:s]
    heads, d = config.heads, config.head_dim
    scale = math.sqrt(d)
    for i in range(config.layers):
        p = f"L{i}."
        q = x @ weights[p + "wq"] + weights[p + "bq"]
        k = x @ weights[p + "wk"] + weights[p + "bk"]
        v = x @ weights[p + "wv"] + weights[p + "bv"]
        head_outs = []
        for hd in range(heads):
            cols = slice(hd * d, (hd + 1) * d)
            head_outs.append(masked_attention(q[:, cols], k[:, cols], v[:, cols], mask, scale))
        attn = np.concatenate(head_outs, axis=1) @ weights[p + "wo"] + weights[p + "bo"]
        x = _ref_layer_norm(x + attn, weights[p + "ln1_g"], weights[p + "ln1_b"])
        mid = x @ weights[p + "w1"] + weights[p + "b1"]
        mid = 0.5 * mid * (1.0 + erf(mid / math.sqrt(2.0)))
        ff = mid @ weights[p + "w2"] + weights[p + "b2"]
        x = _ref_layer_norm(x + ff, weights[p + "ln2_g"], weights[p + "ln2_b"])
    return x


def reference_relevance(last_layer: np.ndarray, weights: dict) -> float:
    return float(last_layer[0] @ weights["head_w"] + weights["head_b"])


def _ref_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + LAYER_NORM_EPS) + bias
