"""Prefill-latency harness: quadratic softmax vs sliding-window vs the
gated-linear paths (recurrent and chunked), plus log-log scaling-exponent
fits over the measured medians.

Forward-only, single worker, monotonic clock. The same random input is
reused by every implementation at a given length, warm-up runs are
discarded, and every published timing at length ≤ 512 is preceded by an
equality check against the parallel oracle — benchmarks never time a wrong
implementation.

``peak_state_bytes`` is the analytic per-step decode state (what a
generation loop must carry), not the prefill working set: KV cache for the
attention baselines, the (S, z) pair plus conv rings for the gated-linear
paths — constant in sequence length by construction.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    EPS,
    conv_gla_attention,
    gla_parallel_oracle,
    init_conv_gla_params,
)
from .baselines import sliding_window_attention, softmax_prefill_blocked
from .errors import ConfigError, DataError

IMPLS = ("softmax", "swa", "gla_recurrent", "gla_chunked")
CSV_COLUMNS = (
    "impl", "seq_len", "d_model", "n_heads", "n_layers", "reps",
    "wall_ns_p10", "wall_ns_median", "wall_ns_p90", "peak_state_bytes",
)
ORACLE_CHECK_MAX_LEN = 512
ORACLE_CHECK_TOL = 1e-8


@dataclass(frozen=True)
class BenchConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    window: int = 64
    chunk: int = 16
    softmax_block: int = 512
    seed: int = 0
    memory_budget_bytes: int = 4 << 30  # stay clear of the 5 GB box limit

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.window < 1 or self.chunk < 1:
            raise ConfigError("n_layers, window and chunk must be >= 1")


@dataclass
class BenchRow:
    impl: str
    seq_len: int
    d_model: int
    n_heads: int
    n_layers: int
    reps: int
    wall_ns_p10: int
    wall_ns_median: int
    wall_ns_p90: int
    peak_state_bytes: int
    failed_reason: str = ""  # not a CSV column; failed rows carry reps=0 and -1 timings

    def __post_init__(self):
        if self.impl not in IMPLS:
            raise ConfigError(f"impl {self.impl!r} not in {IMPLS}")
        if not self.failed_reason:
            if not self.wall_ns_p10 <= self.wall_ns_median <= self.wall_ns_p90:
                raise DataError(
                    f"percentile order violated: {self.wall_ns_p10} / "
                    f"{self.wall_ns_median} / {self.wall_ns_p90}"
                )
            if self.reps < 5:
                raise ConfigError(f"reps must be >= 5, got {self.reps}")


def _percentile_ns(samples: list[int], q: float) -> int:
    """Nearest-rank percentile on raw nanosecond samples."""
    s = sorted(samples)
    rank = max(1, int(np.ceil(q / 100.0 * len(s))))
    return s[rank - 1]


def peak_state_bytes(impl: str, cfg: BenchConfig, seq_len: int,
                     d_feat: Optional[int] = None, kernel_width: int = 4) -> int:
    """Per-step decode state, bytes, for the whole stack (float64)."""
    dh = cfg.d_model // cfg.n_heads
    f = d_feat if d_feat is not None else dh
    if impl == "softmax":
        per_layer = 2 * cfg.n_heads * seq_len * dh  # K and V caches
    elif impl == "swa":
        per_layer = 2 * cfg.n_heads * min(seq_len, cfg.window) * dh
    else:
        # S [H, F, dh] + z [H, F] + two conv rings [H, K-1, dh]
        per_layer = cfg.n_heads * (f * dh + f + 2 * (kernel_width - 1) * dh)
    return per_layer * cfg.n_layers * 8


def _working_set_bytes(impl: str, cfg: BenchConfig, n: int) -> int:
    """Rough prefill working-set estimate used for the memory-budget gate."""
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    if impl == "softmax":
        per = min(n, cfg.softmax_block) * n * 3  # score block + exp + weights
    elif impl == "swa":
        per = n * min(n, cfg.window) * 3
    else:
        per = n * dh * 8  # projections, features, gates, cumsums
    return (per * h + 4 * n * cfg.d_model) * 8


def _make_inputs(cfg: BenchConfig, n: int, rng: np.random.Generator):
    x = rng.normal(0.0, 1.0, (n, cfg.d_model))
    params = init_conv_gla_params(rng, cfg.d_model, cfg.n_heads)
    wq = params.Wq.data
    wk = params.Wk.data
    wv = params.Wv.data
    q = np.matmul(x[None, :, :], wq)  # [H, N, dh]
    k = np.matmul(x[None, :, :], wk)
    v = np.matmul(x[None, :, :], wv)
    return x, params, q, k, v


def _forward(impl: str, cfg: BenchConfig, x, params, q, k, v):
    if impl == "softmax":
        return softmax_prefill_blocked(q, k, v, block=cfg.softmax_block)
    if impl == "swa":
        return sliding_window_attention(q, k, v, cfg.window)
    mode = "recurrent" if impl == "gla_recurrent" else "chunked"
    return conv_gla_attention(x, params, mode=mode, chunk=cfg.chunk)


def _oracle_gap(cfg: BenchConfig, x, params) -> float:
    got = conv_gla_attention(x, params, mode="recurrent")
    want = conv_gla_attention(x, params, mode="oracle")
    return float(np.max(np.abs(got - want)))


def bench_prefill(cfg: BenchConfig, lengths: list[int], reps: int = 5,
                  impls: tuple = IMPLS) -> list[BenchRow]:
    if reps < 5:
        raise ConfigError(f"reps must be >= 5, got {reps}")
    if not lengths:
        raise ConfigError("no lengths given")
    unknown = set(impls) - set(IMPLS)
    if unknown:
        raise ConfigError(f"unknown impls {sorted(unknown)}")
    rng = np.random.default_rng(cfg.seed)
    rows: list[BenchRow] = []
    for n in sorted(lengths):
        x, params, q, k, v = _make_inputs(cfg, n, rng)
        if n <= ORACLE_CHECK_MAX_LEN and ("gla_recurrent" in impls or "gla_chunked" in impls):
            gap = _oracle_gap(cfg, x, params)
            if gap >= ORACLE_CHECK_TOL:
                raise DataError(f"oracle check failed at n={n}: max |Δ| = {gap:.3e}")
        for impl in impls:
            state = peak_state_bytes(impl, cfg, n)
            need = _working_set_bytes(impl, cfg, n)
            if need > cfg.memory_budget_bytes:
                rows.append(BenchRow(impl, n, cfg.d_model, cfg.n_heads, cfg.n_layers,
                                     0, -1, -1, -1, state,
                                     failed_reason=f"predicted working set {need} B "
                                                   f"exceeds budget {cfg.memory_budget_bytes} B"))
                continue
            for _ in range(2):  # warm-up, excluded
                _forward(impl, cfg, x, params, q, k, v)
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter_ns()
                for _layer in range(cfg.n_layers):
                    _forward(impl, cfg, x, params, q, k, v)
                samples.append(time.perf_counter_ns() - t0)
            rows.append(BenchRow(
                impl, n, cfg.d_model, cfg.n_heads, cfg.n_layers, reps,
                _percentile_ns(samples, 10), _percentile_ns(samples, 50),
                _percentile_ns(samples, 90), state,
            ))
    return rows


def fit_scaling_exponent(rows: list[BenchRow]) -> float:
    """Least-squares slope of log(median wall time) vs log(seq_len)."""
    rows = [r for r in rows if not r.failed_reason]
    impls = {r.impl for r in rows}
    if len(impls) != 1:
        raise DataError(f"fit needs rows from exactly one impl, got {sorted(impls)}")
    if len(rows) < 4:
        raise DataError(f"fit needs >= 4 points, got {len(rows)}")
    lens = np.array([r.seq_len for r in rows], dtype=np.float64)
    if lens.max() / lens.min() < 8.0:
        raise DataError(f"lengths must span >= 8x, got {lens.min():g}..{lens.max():g}")
    t = np.array([r.wall_ns_median for r in rows], dtype=np.float64)
    slope, _ = np.polyfit(np.log(lens), np.log(t), 1)
    return float(slope)


def crossover_length(rows: list[BenchRow], fast: str = "gla_recurrent",
                     slow: str = "softmax") -> Optional[int]:
    """Smallest benchmarked length at which `fast` beats `slow`, or None."""
    by_len: dict[int, dict[str, int]] = {}
    for r in rows:
        if not r.failed_reason:
            by_len.setdefault(r.seq_len, {})[r.impl] = r.wall_ns_median
    for n in sorted(by_len):
        d = by_len[n]
        if fast in d and slow in d and d[fast] < d[slow]:
            return n
    return None


# ---------------------------------------------------------------------------
# output formats


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([getattr(r, c) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w") as fh:
        fh.write(rows_to_csv(rows))
    failed = [r for r in rows if r.failed_reason]
    if failed:
        with open(str(path) + ".failures.txt", "w") as fh:
            for r in failed:
                fh.write(f"{r.impl},{r.seq_len}: {r.failed_reason}\n")


def read_csv(path) -> list[BenchRow]:
    with open(path) as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CSV_COLUMNS:
            raise DataError(f"unexpected CSV header {header}")
        out = []
        for line in rd:
            vals = dict(zip(CSV_COLUMNS, line))
            out.append(BenchRow(
                impl=vals["impl"],
                **{c: int(vals[c]) for c in CSV_COLUMNS[1:]},
                failed_reason="(from csv)" if int(vals["reps"]) == 0 else "",
            ))
        return out


def write_gnuplot_long(path, rows: list[BenchRow]) -> None:
    """Whitespace-separated long format: one (impl, length, median) per line."""
    with open(path, "w") as fh:
        fh.write("# impl seq_len wall_ns_median\n")
        for r in rows:
            if not r.failed_reason:
                fh.write(f"{r.impl} {r.seq_len} {r.wall_ns_median}\n")
