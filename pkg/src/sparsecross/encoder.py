"""Transformer cross-encoder parameterized by an attention pattern.

The input is one sequence [CLS] q_1..q_m [SEP] d_1..d_n [SEP], partitioned
into cls / query / document groups (each separator belongs to the group it
terminates).  Every layer runs multi-head attention under the configured
pattern, followed by residual + layer norm, a two-layer feed-forward block
with a Gaussian-error activation, and a second residual + layer norm.  The
relevance score is a linear map of the final [CLS] embedding.

Forward and backward passes are hand-written over numpy and operate on
batches of equal-length sequences; all reductions have fixed order, so
runs are reproducible bit-for-bit for identical inputs and seeds.
Weights are plain arrays in a flat dict and are read-only during
inference; concurrent forward passes on shared weights are safe.

Attention scaling is sqrt(d_head) per head, which reduces to the sqrt(h)
of the single-head formulation when heads == 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from . import memtrack
from .attention import (
    GROUPS,
    FULL,
    AttentionError,
    AttentionPattern,
    group_attention,
    group_attention_backward,
    is_full,
    make_pattern,
)
from .tokenizer import CLS_ID, SEP_ID

LAYER_NORM_EPS = 1e-12

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class EncoderError(ValueError):
    """Raised for malformed configs, partitions, or inputs."""


class NonFiniteActivationError(FloatingPointError):
    """A layer produced NaN or infinite activations."""

    def __init__(self, layer: int):
        super().__init__(f"non-finite activations in layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class SubsequencePartition:
    """Half-open index spans of the cls / query / document groups.

    Spans are disjoint, ordered cls < query < doc, and cover the whole
    sequence; each trailing separator belongs to the group it closes.
    """

    cls_span: tuple[int, int]
    query_span: tuple[int, int]
    doc_span: tuple[int, int]

    def __post_init__(self):
        spans = (self.cls_span, self.query_span, self.doc_span)
        if self.cls_span != (0, 1):
            raise EncoderError(f"cls span must be (0, 1), got {self.cls_span}")
        prev_stop = 0
        for name, (start, stop) in zip(GROUPS, spans):
            if start != prev_stop or stop <= start:
                raise EncoderError(
                    f"{name} span {start, stop} must be nonempty and contiguous"
                )
            prev_stop = stop

    @property
    def seq_len(self) -> int:
        return self.doc_span[1]

    def span(self, group: str) -> tuple[int, int]:
        try:
            return {"cls": self.cls_span, "query": self.query_span, "doc": self.doc_span}[group]
        except KeyError:
            raise EncoderError(f"unknown group {group!r}")

    def group_len(self, group: str) -> int:
        start, stop = self.span(group)
        return stop - start


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    partition: SubsequencePartition

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        if self.ids.ndim != 1 or self.ids.shape[0] != self.partition.seq_len:
            raise EncoderError("token ids inconsistent with partition")


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture plus attention-pattern settings.

    ``window`` may be a non-negative int or ``FULL`` (infinity).  The QDS
    pattern marks every ``qds_global_every``-th document token as global;
    positions are resolved per input from its partition.
    """

    layers: int
    embed_dim: int
    heads: int
    ff_dim: int
    max_positions: int
    vocab_size: int
    pattern: str = "sparse"
    window: float = 4
    qds_global_every: int = 30
    precision: str = "f64"
    padding: str = "exclude"

    def __post_init__(self):
        if self.layers < 0 or self.embed_dim < 1 or self.heads < 1 or self.ff_dim < 1:
            raise EncoderError("layers/embed_dim/heads/ff_dim out of range")
        if self.embed_dim % self.heads != 0:
            raise EncoderError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.precision not in PRECISIONS:
            raise EncoderError(f"precision must be one of {sorted(PRECISIONS)}")
        if not is_full(self.window) and (int(self.window) != self.window or self.window < 0):
            raise EncoderError(f"bad window {self.window!r}")
        make_pattern(self.pattern, self.window)  # validates the name

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def with_pattern(self, pattern: str, window=None) -> "EncoderConfig":
        return replace(self, pattern=pattern, window=self.window if window is None else window)


def assemble_input(query_ids, doc_ids, max_positions: int | None = None) -> TokenSequence:
    """Build [CLS] query [SEP] doc [SEP] with its partition.

    If the assembled length exceeds ``max_positions`` the document tail is
    truncated; the query is never truncated and overflow from the query
    alone is an error.
    """
    query_ids = list(query_ids)
    doc_ids = list(doc_ids)
    m = len(query_ids)
    if m < 1:
        raise EncoderError("query must contain at least one token")
    if max_positions is not None:
        if m + 3 > max_positions:
            raise EncoderError(
                f"query of {m} tokens cannot fit in {max_positions} positions"
            )
        keep = max_positions - m - 3
        if len(doc_ids) > keep:
            doc_ids = doc_ids[:keep]
    n = len(doc_ids)
    ids = [CLS_ID] + query_ids + [SEP_ID] + doc_ids + [SEP_ID]
    partition = SubsequencePartition((0, 1), (1, m + 2), (m + 2, m + n + 3))
    return TokenSequence(np.asarray(ids, dtype=np.int64), partition)


def qds_global_positions(doc_token_count: int, every: int = 30) -> tuple[int, ...]:
    """Document-relative indices of the global tokens: every ``every``-th token."""
    if every < 1:
        raise EncoderError("global spacing must be >= 1")
    return tuple(range(every - 1, doc_token_count, every))


def resolve_pattern(config: EncoderConfig, partition: SubsequencePartition) -> AttentionPattern:
    """Concrete pattern for one input; QDS global positions depend on doc length."""
    globals_ = ()
    if config.pattern == "qds":
        doc_tokens = partition.group_len("doc") - 1  # trailing separator is not global
        globals_ = qds_global_positions(doc_tokens, config.qds_global_every)
    return make_pattern(config.pattern, config.window, globals_)


def interpolate_positions(pos_embeddings: np.ndarray, new_max: int) -> np.ndarray:
    """Linearly resample positional embeddings to a new maximum length.

    Row p of the output blends the two old rows nearest to the scaled
    coordinate p * (old_max - 1) / (new_max - 1); endpoints map exactly.
    """
    pos_embeddings = np.asarray(pos_embeddings)
    old_max = pos_embeddings.shape[0]
    if new_max < 2 or old_max < 2:
        raise EncoderError("positional interpolation requires at least 2 rows")
    coords = np.arange(new_max) * (old_max - 1) / (new_max - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, old_max - 1)
    frac = (coords - lo).astype(pos_embeddings.dtype)[:, None]
    return (1 - frac) * pos_embeddings[lo] + frac * pos_embeddings[hi]


# ---------------------------------------------------------------------------
# Weights.
# ---------------------------------------------------------------------------

def init_weights(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Symmetric uniform init scaled by 1/sqrt(fan_in), seeded."""
    rng = np.random.default_rng(seed)
    dt = config.dtype
    h, ff = config.embed_dim, config.ff_dim

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dt)

    # Embedding rows act on one-hot inputs, so their fan-in is 1.
    weights: dict[str, np.ndarray] = {
        "tok_emb": uniform((config.vocab_size, h), 1),
        "pos_emb": uniform((config.max_positions, h), 1),
    }
    for i in range(config.layers):
        p = f"L{i}."
        for name in ("wq", "wk", "wv", "wo"):
            weights[p + name] = uniform((h, h), h)
            weights[p + name.replace("w", "b")] = np.zeros(h, dtype=dt)
        weights[p + "ln1_g"] = np.ones(h, dtype=dt)
        weights[p + "ln1_b"] = np.zeros(h, dtype=dt)
        weights[p + "w1"] = uniform((h, ff), h)
        weights[p + "b1"] = np.zeros(ff, dtype=dt)
        weights[p + "w2"] = uniform((ff, h), ff)
        weights[p + "b2"] = np.zeros(h, dtype=dt)
        weights[p + "ln2_g"] = np.ones(h, dtype=dt)
        weights[p + "ln2_b"] = np.zeros(h, dtype=dt)
    weights["head_w"] = uniform((h,), h)
    weights["head_b"] = np.zeros((), dtype=dt)
    return weights


def weight_nbytes(weights: dict[str, np.ndarray]) -> int:
    return sum(int(w.nbytes) for w in weights.values())


# ---------------------------------------------------------------------------
# Primitive layers.
# ---------------------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0).astype(x.dtype)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi).astype(x.dtype)
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0).astype(x.dtype))) + x * phi


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def layer_norm_backward(grad_y, cache, gain):
    xhat, inv = cache
    dxhat = grad_y * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(grad_y.ndim - 1))
    dgain = (grad_y * xhat).sum(axis=axes)
    dbias = grad_y.sum(axis=axes)
    return dx, dgain, dbias


def _to_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, s, h = x.shape
    return x.reshape(b, s, heads, h // heads).transpose(0, 2, 1, 3)


def _from_heads(x: np.ndarray) -> np.ndarray:
    b, heads, s, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, heads * d)


def _split_groups(partition: SubsequencePartition, q, k, v) -> dict:
    qkv = {}
    for g in GROUPS:
        lo, hi = partition.span(g)
        qkv[g] = (q[..., lo:hi, :], k[..., lo:hi, :], v[..., lo:hi, :])
    return qkv


def layer_forward(
    x: np.ndarray,
    partition: SubsequencePartition,
    pattern: AttentionPattern,
    weights: dict,
    layer_index: int,
    config: EncoderConfig,
    want_cache: bool = False,
):
    """One transformer layer over a (batch, seq, embed) activation tensor."""
    p = f"L{layer_index}."
    w = weights
    b, s, h = x.shape
    itemsize = x.dtype.itemsize

    with memtrack.hold(3 * b * s * h * itemsize, "projections"):
        qf = x @ w[p + "wq"] + w[p + "bq"]
        kf = x @ w[p + "wk"] + w[p + "bk"]
        vf = x @ w[p + "wv"] + w[p + "bv"]
        qh = _to_heads(qf, config.heads)
        kh = _to_heads(kf, config.heads)
        vh = _to_heads(vf, config.heads)
        qkv = _split_groups(partition, qh, kh, vh)
        scale = math.sqrt(config.head_dim)

        group_outs, group_caches = [], {}
        for g in GROUPS:
            res = group_attention(
                qkv, g, pattern, scale, config.padding, want_cache=want_cache
            )
            if want_cache:
                out_g, group_caches[g] = res
            else:
                out_g = res
            group_outs.append(out_g)

        with memtrack.hold(b * s * h * itemsize, "attn_out"):
            oh = np.concatenate(group_outs, axis=-2)
            of = _from_heads(oh)
            y = of @ w[p + "wo"] + w[p + "bo"]
            r1 = x + y
            ln1, ln1_cache = layer_norm(r1, w[p + "ln1_g"], w[p + "ln1_b"])

        with memtrack.hold(b * s * config.ff_dim * itemsize, "ffn"):
            f1 = ln1 @ w[p + "w1"] + w[p + "b1"]
            g1 = gelu(f1)
            f2 = g1 @ w[p + "w2"] + w[p + "b2"]
            r2 = ln1 + f2
            out, ln2_cache = layer_norm(r2, w[p + "ln2_g"], w[p + "ln2_b"])

    if not np.all(np.isfinite(out)):
        raise NonFiniteActivationError(layer_index)
    if not want_cache:
        return out
    cache = {
        "x": x,
        "qkv": qkv,
        "groups": group_caches,
        "of": of,
        "ln1": ln1,
        "ln1_cache": ln1_cache,
        "f1": f1,
        "g1": g1,
        "ln2_cache": ln2_cache,
    }
    return out, cache


def layer_backward(
    grad_out: np.ndarray,
    cache: dict,
    partition: SubsequencePartition,
    pattern: AttentionPattern,
    weights: dict,
    layer_index: int,
    config: EncoderConfig,
    grads: dict,
) -> np.ndarray:
    """Adjoint of layer_forward; accumulates weight gradients into ``grads``."""
    p = f"L{layer_index}."
    w = weights
    x = cache["x"]
    bsz, s, h = x.shape

    def accumulate(name, value):
        grads[name] = grads.get(name, 0) + value

    # Second layer norm and feed-forward block.
    d_r2, dg, db = layer_norm_backward(grad_out, cache["ln2_cache"], w[p + "ln2_g"])
    accumulate(p + "ln2_g", dg)
    accumulate(p + "ln2_b", db)
    d_ln1 = d_r2.copy()
    d_f2 = d_r2
    accumulate(p + "w2", np.einsum("bsf,bsh->fh", cache["g1"], d_f2))
    accumulate(p + "b2", d_f2.sum(axis=(0, 1)))
    d_g1 = d_f2 @ w[p + "w2"].T
    d_f1 = d_g1 * gelu_grad(cache["f1"])
    accumulate(p + "w1", np.einsum("bsh,bsf->hf", cache["ln1"], d_f1))
    accumulate(p + "b1", d_f1.sum(axis=(0, 1)))
    d_ln1 += d_f1 @ w[p + "w1"].T

    # First layer norm, output projection, attention.
    d_r1, dg, db = layer_norm_backward(d_ln1, cache["ln1_cache"], w[p + "ln1_g"])
    accumulate(p + "ln1_g", dg)
    accumulate(p + "ln1_b", db)
    d_x = d_r1.copy()
    d_y = d_r1
    accumulate(p + "wo", np.einsum("bsh,bsk->hk", cache["of"], d_y))
    accumulate(p + "bo", d_y.sum(axis=(0, 1)))
    d_of = d_y @ w[p + "wo"].T
    d_oh = _to_heads(d_of, config.heads)

    d_qh = np.zeros((bsz, config.heads, s, config.head_dim), dtype=x.dtype)
    d_kh = np.zeros_like(d_qh)
    d_vh = np.zeros_like(d_qh)
    for g in GROUPS:
        lo, hi = partition.span(g)
        gq, contributions = group_attention_backward(
            cache["groups"][g], d_oh[..., lo:hi, :], g, pattern
        )
        d_qh[..., lo:hi, :] += gq
        for target, idx, gk, gv in contributions:
            t0, t1 = partition.span(target)
            if idx is None:
                d_kh[..., t0:t1, :] += gk
                d_vh[..., t0:t1, :] += gv
            else:
                d_kh[..., t0 + idx, :] += gk
                d_vh[..., t0 + idx, :] += gv

    d_qf = _from_heads(d_qh)
    d_kf = _from_heads(d_kh)
    d_vf = _from_heads(d_vh)
    for name, grad_f in (("q", d_qf), ("k", d_kf), ("v", d_vf)):
        accumulate(p + "w" + name, np.einsum("bsh,bsk->hk", x, grad_f))
        accumulate(p + "b" + name, grad_f.sum(axis=(0, 1)))
        d_x += grad_f @ w[p + "w" + name].T
    return d_x


# ---------------------------------------------------------------------------
# Whole-model forward/backward.
# ---------------------------------------------------------------------------

class CrossEncoder:
    """Config + weights bundle with batched forward/backward passes."""

    def __init__(self, config: EncoderConfig, weights: dict | None = None, seed: int = 0):
        self.config = config
        self.weights = init_weights(config, seed) if weights is None else weights

    @property
    def weight_nbytes(self) -> int:
        return weight_nbytes(self.weights)

    def _check_ids(self, ids: np.ndarray, partition: SubsequencePartition) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] != partition.seq_len:
            raise EncoderError(
                f"ids shape {ids.shape} inconsistent with partition length {partition.seq_len}"
            )
        if ids.shape[1] > self.config.max_positions:
            raise EncoderError("sequence longer than max_positions")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise EncoderError("token id outside vocabulary")
        return ids

    def forward(
        self, ids, partition: SubsequencePartition, want_cache: bool = False
    ):
        """Final-layer embeddings (batch, seq, embed) for a batch of sequences."""
        ids = self._check_ids(ids, partition)
        b, s = ids.shape
        w = self.weights
        pattern = resolve_pattern(self.config, partition)
        x = (w["tok_emb"][ids] + w["pos_emb"][:s]).astype(self.config.dtype, copy=False)
        memtrack.record_alloc(int(x.nbytes), "embeddings")
        layer_caches = []
        try:
            for i in range(self.config.layers):
                res = layer_forward(
                    x, partition, pattern, w, i, self.config, want_cache=want_cache
                )
                if want_cache:
                    x, cache = res
                    layer_caches.append(cache)
                else:
                    x = res
        finally:
            memtrack.record_release(int(x.nbytes), "embeddings")
        if not want_cache:
            return x
        return x, {"ids": ids, "partition": partition, "pattern": pattern, "layers": layer_caches, "last": x}

    def score(self, ids, partition: SubsequencePartition, want_cache: bool = False):
        """Relevance scores (batch,) from the final [CLS] embeddings."""
        res = self.forward(ids, partition, want_cache=want_cache)
        x, cache = res if want_cache else (res, None)
        scores = x[:, 0, :] @ self.weights["head_w"] + self.weights["head_b"]
        if not want_cache:
            return scores
        return scores, cache

    def backward(self, cache: dict, grad_scores: np.ndarray) -> dict:
        """Weight gradients of sum(grad_scores * scores)."""
        grad_scores = np.asarray(grad_scores, dtype=self.config.dtype)
        x_last = cache["last"]
        grads: dict[str, np.ndarray] = {}
        grads["head_w"] = grad_scores @ x_last[:, 0, :]
        grads["head_b"] = grad_scores.sum()
        d_x = np.zeros_like(x_last)
        d_x[:, 0, :] = grad_scores[:, None] * self.weights["head_w"]
        partition, pattern = cache["partition"], cache["pattern"]
        for i in reversed(range(self.config.layers)):
            d_x = layer_backward(
                d_x, cache["layers"][i], partition, pattern, self.weights, i, self.config, grads
            )
        ids = cache["ids"]
        s = ids.shape[1]
        d_tok = np.zeros_like(self.weights["tok_emb"])
        np.add.at(d_tok, ids.reshape(-1), d_x.reshape(-1, d_x.shape[-1]))
        grads["tok_emb"] = d_tok
        d_pos = np.zeros_like(self.weights["pos_emb"])
        d_pos[:s] = d_x.sum(axis=0)
        grads["pos_emb"] = d_pos
        return grads

    def score_pair(self, query_ids, doc_ids) -> float:
        """Relevance of one (query, document) token-id pair."""
        seq = assemble_input(query_ids, doc_ids, self.config.max_positions)
        return float(self.score(seq.ids, seq.partition)[0])


def encoder_forward(seq: TokenSequence, config: EncoderConfig, weights: dict) -> np.ndarray:
    """Final-layer (seq, embed) matrix for a single token sequence."""
    model = CrossEncoder(config, weights)
    return model.forward(seq.ids, seq.partition)[0]


def relevance_score(last_layer: np.ndarray, head_w: np.ndarray, head_b=0.0) -> float:
    """Linear readout of the [CLS] row (row 0) of the final layer matrix."""
    last_layer = np.asarray(last_layer)
    if last_layer.ndim != 2 or last_layer.shape[0] < 1:
        raise EncoderError("last layer matrix must be 2-D with a [CLS] row")
    return float(last_layer[0] @ np.asarray(head_w) + head_b)
