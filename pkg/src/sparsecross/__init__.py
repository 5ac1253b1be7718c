"""Windowed band-matrix attention for cross-encoder re-ranking.

Subpackages cover the banded kernels and their adjoints (``band``), the
generalized windowed cross-attention and the attention patterns
(``attention``), a pattern-parameterized transformer encoder
(``encoder``) with dense masked reference implementations
(``reference``), desk-scale training on a synthetic ranking task
(``training``), an efficiency benchmark with instrumented memory
accounting (``bench``, ``memtrack``), and ranking metrics with paired
equivalence testing (``evaluation``).
"""

from .attention import (
    FULL,
    AttentionPattern,
    SegmentScores,
    apply_pattern,
    full_attention,
    full_pattern,
    longformer_pattern,
    make_pattern,
    qds_pattern,
    segment_softmax,
    sparse_pattern,
    windowed_cross_attention,
)
from .band import (
    MASKED,
    BandMatrix,
    OpCounter,
    band_pv,
    band_pv_backward,
    band_qk,
    band_qk_backward,
    band_to_dense,
    dense_band_oracle,
)
from .bench import BenchRecord, BenchSpec, emit_report, flop_count, gen_random_batch, measure, run_bench
from .encoder import (
    CrossEncoder,
    EncoderConfig,
    SubsequencePartition,
    TokenSequence,
    assemble_input,
    encoder_forward,
    init_weights,
    interpolate_positions,
    relevance_score,
)
from .evaluation import RunEntry, ndcg_at_k, paired_tost, rerank
from .serialize import load_model, save_model
from .training import (
    AdamW,
    SyntheticTask,
    Triple,
    grad_check,
    margin_mse_loss,
    ranknet_loss,
    train_toy,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AttentionPattern",
    "BandMatrix",
    "BenchRecord",
    "BenchSpec",
    "CrossEncoder",
    "EncoderConfig",
    "FULL",
    "MASKED",
    "OpCounter",
    "RunEntry",
    "SegmentScores",
    "SubsequencePartition",
    "SyntheticTask",
    "TokenSequence",
    "Triple",
    "apply_pattern",
    "assemble_input",
    "band_pv",
    "band_pv_backward",
    "band_qk",
    "band_qk_backward",
    "band_to_dense",
    "dense_band_oracle",
    "emit_report",
    "encoder_forward",
    "flop_count",
    "full_attention",
    "full_pattern",
    "gen_random_batch",
    "grad_check",
    "init_weights",
    "interpolate_positions",
    "load_model",
    "longformer_pattern",
    "make_pattern",
    "margin_mse_loss",
    "measure",
    "ndcg_at_k",
    "paired_tost",
    "qds_pattern",
    "ranknet_loss",
    "relevance_score",
    "rerank",
    "run_bench",
    "save_model",
    "segment_softmax",
    "sparse_pattern",
    "train_toy",
    "windowed_cross_attention",
]
