"""Benchmark harness tests: batch generation, FLOP model, measurement, reports."""

import numpy as np
import pytest

from sparsecross import memtrack
from sparsecross.attention import FULL, longformer_pattern, qds_pattern, sparse_pattern
from sparsecross.band import OpCounter, naive_band_pv, naive_band_qk, naive_matmul
from sparsecross.band import BandMatrix, band_validity
from sparsecross.bench import (
    BenchConfigError,
    BenchRecord,
    BenchSpec,
    default_model_config,
    emit_report,
    flop_count,
    gen_random_batch,
    measure,
    run_bench,
)
from sparsecross.encoder import CrossEncoder


def spec_for(pattern="sparse", window=4, doc_lens=(16,), **kw):
    defaults = dict(
        pattern=pattern,
        window=window,
        query_len=10,
        doc_lens=doc_lens,
        batch_size=2,
        repetitions=3,
        warmup=1,
        precision="f64",
        seed=0,
    )
    defaults.update(kw)
    return BenchSpec(**defaults)


class TestBenchSpec:
    def test_rejects_oversized_batch(self):
        with pytest.raises(BenchConfigError):
            spec_for(batch_size=101)

    def test_rejects_too_few_repetitions(self):
        with pytest.raises(BenchConfigError):
            spec_for(repetitions=2)

    def test_rejects_unknown_pattern(self):
        with pytest.raises(BenchConfigError):
            spec_for(pattern="strided")

    def test_rejects_empty_doc_lens(self):
        with pytest.raises(BenchConfigError):
            spec_for(doc_lens=())


class TestGenRandomBatch:
    def test_sequence_length_is_query_plus_doc_plus_three(self):
        spec = spec_for(doc_lens=(164,))
        config = default_model_config(spec)
        batch = gen_random_batch(spec, 164, config)
        assert batch.ids.shape == (2, 177)
        assert batch.partition.seq_len == 177

    def test_long_document_arithmetic(self):
        spec = spec_for(doc_lens=(4086,), batch_size=1)
        config = default_model_config(spec)
        batch = gen_random_batch(spec, 4086, config)
        assert batch.ids.shape[1] == 4099

    def test_qds_marks_every_30th_token(self):
        spec = spec_for(pattern="qds", window=4, doc_lens=(120,))
        config = default_model_config(spec)
        batch = gen_random_batch(spec, 120, config)
        assert len(batch.pattern.global_positions) == 4

    def test_seeded_determinism(self):
        spec = spec_for()
        config = default_model_config(spec)
        a = gen_random_batch(spec, 16, config)
        b = gen_random_batch(spec, 16, config)
        np.testing.assert_array_equal(a.ids, b.ids)


class TestFlopModel:
    def test_full_pattern_attention_cost_is_quadratic(self):
        from sparsecross.attention import full_pattern

        s_groups = (1, 11, 20)
        s = sum(s_groups)
        h = 8
        fb = flop_count(full_pattern(), s_groups, h, layers=1, heads=1, ff_dim=16)
        assert fb.attention_qk == s * s * h
        assert fb.attention_pv == s * s * h

    def test_windowed_doc_segment_cost(self):
        # Difference between two sparse patterns isolates the doc-doc term.
        s_groups = (1, 5, 40)
        h, w = 8, 3
        with_band = flop_count(sparse_pattern(w), s_groups, h, layers=1, ff_dim=16)
        amputated = flop_count(sparse_pattern(0), s_groups, h, layers=1, ff_dim=16)
        expected = 40 * (2 * w + 1) * h - 40 * 1 * h
        assert with_band.attention_qk - amputated.attention_qk == expected

    def test_matches_naive_kernel_instrumentation(self):
        rng = np.random.default_rng(0)
        for s_d, w, h in ((5, 0, 3), (17, 4, 8), (33, 2, 4), (64, 1, 2)):
            q = rng.normal(size=(s_d, h))
            k = rng.normal(size=(s_d, h))
            counter = OpCounter()
            band = naive_band_qk(q, k, w, counter)
            assert counter.multiply_adds == s_d * (2 * w + 1) * h
            counter = OpCounter()
            naive_band_pv(band, rng.normal(size=(s_d, h)), counter)
            assert counter.multiply_adds == s_d * (2 * w + 1) * h

    def test_dense_segment_matches_naive_matmul_count(self):
        rng = np.random.default_rng(1)
        m, n, h = 6, 9, 4
        counter = OpCounter()
        naive_matmul(rng.normal(size=(m, h)), rng.normal(size=(h, n)), counter)
        assert counter.multiply_adds == m * n * h

    def test_edge_case_flagged_when_window_covers_target(self):
        s_groups = (1, 5, 10)
        wide = flop_count(sparse_pattern(9), s_groups, 4, layers=1, ff_dim=8)
        assert wide.window_exceeds_dense
        narrow = flop_count(sparse_pattern(2), s_groups, 4, layers=1, ff_dim=8)
        assert not narrow.window_exceeds_dense

    def test_qds_costs_exceed_longformer(self):
        s_groups = (1, 11, 120)
        lf = flop_count(longformer_pattern(4), s_groups, 8, layers=2, ff_dim=16)
        qds = flop_count(qds_pattern(4, (29, 59, 89, 119)), s_groups, 8, layers=2, ff_dim=16)
        assert qds.attention > lf.attention
        assert qds.projections == lf.projections


class TestMeasure:
    def test_record_fields_and_determinism(self):
        spec = spec_for()
        config = default_model_config(spec)
        model = CrossEncoder(config, seed=0)
        batch = gen_random_batch(spec, 16, config)
        rec1 = measure(model, batch, spec)
        rec2 = measure(model, batch, spec)
        assert rec1.flops == rec2.flops
        assert rec1.peak_bytes == rec2.peak_bytes
        assert rec1.time_per_doc > 0
        assert rec1.peak_bytes >= model.weight_nbytes
        assert not rec1.oom

    def test_oom_recorded_not_raised(self):
        spec = spec_for()
        config = default_model_config(spec)
        model = CrossEncoder(config, seed=0)
        batch = gen_random_batch(spec, 16, config)
        record = measure(model, batch, spec, mem_limit_bytes=model.weight_nbytes + 1)
        assert record.oom
        assert record.time_per_doc is None and record.peak_bytes is None
        assert record.flops > 0

    def test_attention_buffer_accounting_is_exact(self):
        # Single sequence, single head: the attn_scores peak must equal the
        # analytic sum over the largest group's segments.
        spec = spec_for(batch_size=1)
        config = default_model_config(spec, heads=1)
        model = CrossEncoder(config, seed=1)
        batch = gen_random_batch(spec, 16, config)
        with memtrack.track() as tracker:
            model.score(batch.ids, batch.partition)
        itemsize = np.dtype(config.dtype).itemsize
        q_len, d_len = 11, 17  # query tokens + [SEP]; doc tokens + [SEP]
        w = int(spec.window)
        per_group = {
            "cls": 1 * 1 + 1 * q_len + 1 * d_len,
            "query": q_len * q_len,
            "doc": d_len * 1 + d_len * q_len + d_len * (2 * w + 1),
        }
        expected = max(per_group.values()) * itemsize
        assert tracker.tag_peak("attn_scores") == expected

    def test_sparse_attention_buffers_shrink_with_window(self):
        spec_small = spec_for(window=1, doc_lens=(64,))
        spec_big = spec_for(window=16, doc_lens=(64,))
        config_small = default_model_config(spec_small)
        config_big = default_model_config(spec_big)
        rec_small = measure(
            CrossEncoder(config_small, seed=0), gen_random_batch(spec_small, 64, config_small), spec_small
        )
        rec_big = measure(
            CrossEncoder(config_big, seed=0), gen_random_batch(spec_big, 64, config_big), spec_big
        )
        assert rec_small.attn_score_bytes < rec_big.attn_score_bytes


class TestRunBenchOrdering:
    def test_time_ordering_at_512(self):
        # At s >= 512 the sparse w=4 model must beat longformer w=64, which
        # must beat full attention.
        doc = 512
        times = {}
        for pattern, window in (("sparse", 4), ("longformer", 64), ("full", FULL)):
            spec = spec_for(
                pattern=pattern,
                window=window,
                doc_lens=(doc,),
                batch_size=2,
                repetitions=3,
                precision="f32",
            )
            times[pattern] = run_bench(spec)[0].time_per_doc
        assert times["sparse"] < times["longformer"] < times["full"]


class TestEmitReport:
    def record(self, pattern="sparse", window=4, doc_len=16, time=1e-3, peak=1000, oom=False):
        return BenchRecord(
            pattern=pattern,
            window=window,
            query_len=10,
            doc_len=doc_len,
            batch=2,
            time_per_doc=None if oom else time,
            time_variance=None if oom else 0.0,
            peak_bytes=None if oom else peak,
            attn_score_bytes=None if oom else 10,
            flops=1234,
            threads=1,
            oom=oom,
        )

    def test_csv_single_record(self):
        text = emit_report([self.record()], "csv")
        lines = text.strip().split("\n")
        assert lines[0] == "pattern,w,query_len,doc_len,batch,time_per_doc_s,peak_bytes,flops"
        assert len(lines) == 2
        assert lines[1].startswith("sparse,4,10,16,2,")

    def test_oom_cells(self):
        text = emit_report([self.record(oom=True)], "csv")
        assert ",OOM," in text

    def test_markdown_relative_columns(self):
        records = [
            self.record(pattern="longformer", window=64, time=2e-3, peak=2000),
            self.record(pattern="sparse", window=4, time=1e-3, peak=1000),
        ]
        text = emit_report(records, "md", baseline=("longformer", 64))
        assert "(-50%)" in text
        assert "(+0%)" in text

    def test_unknown_format_rejected(self):
        with pytest.raises(BenchConfigError):
            emit_report([self.record()], "yaml")

    def test_missing_baseline_rejected(self):
        with pytest.raises(BenchConfigError):
            emit_report([self.record()], "md", baseline=("full", FULL))

    def test_infinite_window_rendered(self):
        text = emit_report([self.record(pattern="full", window=FULL)], "csv")
        assert "full,inf," in text
