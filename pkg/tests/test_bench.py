import numpy as np
import pytest

from convgla import ConfigError, DataError
from convgla.bench import (
    CSV_COLUMNS,
    BenchConfig,
    BenchRow,
    _percentile_ns,
    bench_prefill,
    crossover_length,
    fit_scaling_exponent,
    peak_state_bytes,
    read_csv,
    rows_to_csv,
    write_csv,
    write_gnuplot_long,
)


def mkrow(impl, n, median, p10=None, p90=None, reps=5):
    return BenchRow(impl, n, 32, 2, 1, reps,
                    p10 if p10 is not None else median,
                    median,
                    p90 if p90 is not None else median,
                    peak_state_bytes(impl, BenchConfig(), n))


class TestRowValidation:
    def test_impl_enum(self):
        with pytest.raises(ConfigError):
            mkrow("flash", 64, 100)

    def test_percentile_order(self):
        with pytest.raises(DataError):
            mkrow("softmax", 64, 100, p10=200, p90=300)

    def test_min_reps(self):
        with pytest.raises(ConfigError):
            mkrow("softmax", 64, 100, reps=3)


class TestPercentile:
    def test_nearest_rank(self):
        xs = [50, 10, 40, 20, 30]
        assert _percentile_ns(xs, 50) == 30
        assert _percentile_ns(xs, 10) == 10
        assert _percentile_ns(xs, 90) == 50

    def test_single_sample(self):
        assert _percentile_ns([7], 10) == 7
        assert _percentile_ns([7], 90) == 7


class TestFit:
    def _rows(self, fn):
        return [mkrow("gla_recurrent", n, int(fn(n))) for n in (256, 512, 1024, 2048)]

    def test_exact_linear(self):
        alpha = fit_scaling_exponent(self._rows(lambda n: 100 * n))
        assert abs(alpha - 1.0) < 1e-9

    def test_exact_quadratic(self):
        alpha = fit_scaling_exponent(self._rows(lambda n: 3 * n * n))
        assert abs(alpha - 2.0) < 1e-9

    def test_too_few_points(self):
        with pytest.raises(DataError):
            fit_scaling_exponent(self._rows(lambda n: n)[:3])

    def test_mixed_impls_rejected(self):
        rows = self._rows(lambda n: n)
        rows[0] = mkrow("softmax", 256, 256)
        with pytest.raises(DataError):
            fit_scaling_exponent(rows)

    def test_narrow_span_rejected(self):
        rows = [mkrow("swa", n, n) for n in (256, 320, 384, 448)]
        with pytest.raises(DataError):
            fit_scaling_exponent(rows)

    def test_failed_rows_ignored(self):
        rows = self._rows(lambda n: 100 * n)
        rows.append(BenchRow("gla_recurrent", 4096, 32, 2, 1, 0, -1, -1, -1, 0,
                             failed_reason="budget"))
        assert abs(fit_scaling_exponent(rows) - 1.0) < 1e-9


class TestCrossover:
    def test_finds_smallest_win(self):
        rows = [mkrow("softmax", 64, 10), mkrow("gla_recurrent", 64, 20),
                mkrow("softmax", 128, 40), mkrow("gla_recurrent", 128, 39),
                mkrow("softmax", 256, 160), mkrow("gla_recurrent", 256, 80)]
        assert crossover_length(rows) == 128

    def test_none_when_never_faster(self):
        rows = [mkrow("softmax", 64, 10), mkrow("gla_recurrent", 64, 20)]
        assert crossover_length(rows) is None


class TestStateBytes:
    def test_gla_constant_softmax_linear(self):
        cfg = BenchConfig()
        g1 = peak_state_bytes("gla_recurrent", cfg, 1024)
        g2 = peak_state_bytes("gla_recurrent", cfg, 32768)
        assert g1 == g2
        s1 = peak_state_bytes("softmax", cfg, 1024)
        s2 = peak_state_bytes("softmax", cfg, 2048)
        assert s2 == 2 * s1

    def test_swa_caps_at_window(self):
        cfg = BenchConfig(window=64)
        assert peak_state_bytes("swa", cfg, 4096) == peak_state_bytes("swa", cfg, 8192)
        assert peak_state_bytes("swa", cfg, 32) < peak_state_bytes("swa", cfg, 64)


class TestBenchPrefill:
    def test_smoke_all_impls(self):
        rows = bench_prefill(BenchConfig(), [96], reps=5)
        assert len(rows) == 4
        assert {r.impl for r in rows} == {"softmax", "swa", "gla_recurrent", "gla_chunked"}
        for r in rows:
            assert r.wall_ns_p10 > 0 and r.wall_ns_p10 <= r.wall_ns_median <= r.wall_ns_p90
            assert r.seq_len == 96 and r.reps == 5

    def test_reps_floor(self):
        with pytest.raises(ConfigError):
            bench_prefill(BenchConfig(), [64], reps=2)

    def test_unknown_impl(self):
        with pytest.raises(ConfigError):
            bench_prefill(BenchConfig(), [64], impls=("softmax", "flash"))

    def test_budget_marks_failed_rows(self):
        cfg = BenchConfig(memory_budget_bytes=1)
        rows = bench_prefill(cfg, [64], reps=5)
        assert all(r.failed_reason and r.reps == 0 and r.wall_ns_median == -1 for r in rows)

    def test_empty_lengths(self):
        with pytest.raises(ConfigError):
            bench_prefill(BenchConfig(), [])


class TestOutputs:
    def test_csv_header_exact(self):
        text = rows_to_csv([mkrow("swa", 64, 123)])
        first = text.splitlines()[0]
        assert first == "impl,seq_len,d_model,n_heads,n_layers,reps,wall_ns_p10,wall_ns_median,wall_ns_p90,peak_state_bytes"

    def test_roundtrip(self, tmp_path):
        rows = [mkrow("softmax", 64, 10), mkrow("gla_chunked", 128, 20)]
        p = tmp_path / "bench.csv"
        write_csv(p, rows)
        back = read_csv(p)
        assert [(r.impl, r.seq_len, r.wall_ns_median) for r in back] == \
               [(r.impl, r.seq_len, r.wall_ns_median) for r in rows]

    def test_failures_sidecar(self, tmp_path):
        rows = [mkrow("softmax", 64, 10),
                BenchRow("swa", 1 << 20, 32, 2, 1, 0, -1, -1, -1, 0, failed_reason="too big")]
        p = tmp_path / "bench.csv"
        write_csv(p, rows)
        assert "too big" in (tmp_path / "bench.csv.failures.txt").read_text()

    def test_gnuplot_long(self, tmp_path):
        rows = [mkrow("softmax", 64, 10)]
        p = tmp_path / "plot.dat"
        write_gnuplot_long(p, rows)
        lines = p.read_text().splitlines()
        assert lines[0].startswith("#") and lines[1] == "softmax 64 10"
