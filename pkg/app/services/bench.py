"""
Scaling benchmark: WKV7 scans against quadratic softmax attention

Each (operator, length) point gets one warmup run and `reps` timed runs on a
single thread; the median is recorded. A memory budget, checked against an
estimate before allocation, turns too-large points into status=OOM rows
without stopping the sweep.
"""

import logging
import statistics
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from app.exceptions import ContractError
from app.models import BenchOperator, BenchPoint
from app.services.wkv import WKVStepInputs, bi_wkv, naive_attention_reference, wkv7_scan
from app.utils.helpers import torch_threads
from app.utils.rng import RngStreams

logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = [2 ** i for i in range(4, 14)]
DEFAULT_CHANNELS = 192
DEFAULT_HEAD_DIM = 64
DEFAULT_REPS = 5
BYTES_PER_VALUE = 4


def estimate_peak_bytes(operator: BenchOperator, seq_len: int, channels: int, batch: int, head_dim: int) -> int:
    """Allocator high-water estimate for one float32 forward pass"""
    heads = channels // head_dim
    tokens = batch * seq_len * channels
    if operator in (BenchOperator.WKV7, BenchOperator.WKV7_BI):
        scans = 2 if operator is BenchOperator.WKV7_BI else 1
        # six step inputs, one output and one d x d state per scan
        values = 6 * tokens + scans * (tokens + 2 * batch * heads * head_dim * head_dim)
        if scans == 2:
            values += 6 * tokens + 2 * tokens  # reversed inputs, gate and fused output
    else:
        # q, k, v, output plus scores and their softmax
        values = 4 * tokens + 2 * batch * heads * seq_len * seq_len
    return int(values * BYTES_PER_VALUE)


def _wkv_inputs(seq_len: int, channels: int, batch: int, head_dim: int, generator: torch.Generator) -> WKVStepInputs:
    heads = channels // head_dim
    shape = (batch, seq_len, heads, head_dim)

    def uniform(low: float, high: float) -> torch.Tensor:
        return low + (high - low) * torch.rand(shape, generator=generator)

    kappa = torch.randn(shape, generator=generator)
    kappa = kappa / kappa.norm(dim=-1, keepdim=True)
    return WKVStepInputs(
        r=torch.randn(shape, generator=generator),
        w=uniform(0.85, 0.98),
        kappa_hat=kappa,
        a=uniform(0.1, 0.9),
        k_tilde=torch.randn(shape, generator=generator) / head_dim ** 0.5,
        v=torch.randn(shape, generator=generator),
    )


def make_runner(
    operator: BenchOperator,
    seq_len: int,
    channels: int,
    batch: int,
    head_dim: int,
    generator: torch.Generator,
) -> Callable[[], torch.Tensor]:
    """Allocate inputs once and return a closure running the operator under no_grad"""
    inputs = _wkv_inputs(seq_len, channels, batch, head_dim, generator)
    if operator is BenchOperator.WKV7:
        return lambda: wkv7_scan(inputs)[0]
    if operator is BenchOperator.WKV7_BI:
        gate = torch.full_like(inputs.r, 0.5)
        return lambda: bi_wkv(inputs, gate)
    causal = operator is BenchOperator.ATTENTION_CAUSAL
    return lambda: naive_attention_reference(inputs.r, inputs.k_tilde, inputs.v, causal=causal)


def time_runner(run: Callable[[], torch.Tensor], reps: int) -> float:
    """Median wall time in milliseconds after one warmup run"""
    with torch.no_grad():
        run()
        samples = []
        for _ in range(reps):
            started = time.perf_counter()
            run()
            samples.append((time.perf_counter() - started) * 1000.0)
    return statistics.median(samples)


def _is_oom(error: BaseException) -> bool:
    return isinstance(error, MemoryError) or "out of memory" in str(error).lower()


def run_benchmark(
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    channels: int = DEFAULT_CHANNELS,
    batch: int = 1,
    reps: int = DEFAULT_REPS,
    operators: Sequence[BenchOperator] = tuple(BenchOperator),
    head_dim: int = DEFAULT_HEAD_DIM,
    mem_budget_bytes: Optional[int] = None,
    seed: int = 0,
    record_timing: bool = True,
) -> List[BenchPoint]:
    """
    Measure every (operator, length) pair

    Args:
        lengths: Ascending sequence lengths
        reps: Timed repetitions per point (>= 3)
        mem_budget_bytes: Points whose estimate exceeds this are recorded as OOM
        record_timing: False writes wall_ms=0 so reruns produce identical rows
    """
    lengths = [int(n) for n in lengths]
    if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ContractError(f"lengths must be non-empty and strictly ascending, got {lengths}")
    if reps < 3:
        raise ContractError(f"reps must be >= 3, got {reps}")
    if channels % head_dim:
        raise ContractError(f"channels ({channels}) must be divisible by head_dim ({head_dim})")

    streams = RngStreams(seed)
    points: List[BenchPoint] = []
    with torch_threads(1):
        for index, operator in enumerate(BenchOperator(op) for op in operators):
            generator = streams.torch("bench", index)
            for seq_len in lengths:
                peak = estimate_peak_bytes(operator, seq_len, channels, batch, head_dim)
                common = dict(operator=operator, seq_len=seq_len, channels=channels, batch=batch, reps=reps, peak_bytes=peak)
                if mem_budget_bytes is not None and peak > mem_budget_bytes:
                    logger.warning("⚠️ %s at L=%d needs ~%d bytes, over budget", operator.value, seq_len, peak)
                    points.append(BenchPoint(**common, status="OOM"))
                    continue
                try:
                    run = make_runner(operator, seq_len, channels, batch, head_dim, generator)
                    wall_ms = time_runner(run, reps)
                except (MemoryError, RuntimeError) as e:
                    if not _is_oom(e):
                        raise
                    logger.warning("⚠️ %s at L=%d ran out of memory", operator.value, seq_len)
                    points.append(BenchPoint(**common, status="OOM"))
                    continue
                if record_timing:
                    tokens_per_sec = batch * seq_len / (wall_ms / 1000.0)
                    points.append(BenchPoint(**common, wall_ms=wall_ms, tokens_per_sec=tokens_per_sec))
                else:
                    points.append(BenchPoint(**common, wall_ms=0.0))
                logger.info("⏱️ %s L=%d %.3f ms", operator.value, seq_len, wall_ms)
    return points


def loglog_slope(points: Sequence[BenchPoint], operator: BenchOperator, top: int = 4) -> float:
    """Least-squares slope of log(wall_ms) against log(seq_len) over the longest `top` ok points"""
    rows = sorted(
        (p for p in points if p.operator is BenchOperator(operator) and p.status == "ok" and p.wall_ms),
        key=lambda p: p.seq_len,
    )[-top:]
    if len(rows) < 2:
        raise ContractError(f"need at least two measured {operator} points for a slope, got {len(rows)}")
    x = np.log([p.seq_len for p in rows])
    y = np.log([p.wall_ms for p in rows])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def throughput_ratio(points: Sequence[BenchPoint], operator: BenchOperator, top: int = 4) -> float:
    """max / min tokens_per_sec over the longest `top` measured points"""
    rates = [
        p.tokens_per_sec
        for p in sorted(points, key=lambda p: p.seq_len)
        if p.operator is BenchOperator(operator) and p.tokens_per_sec
    ][-top:]
    if not rates:
        raise ContractError(f"no throughput recorded for {operator}")
    return max(rates) / min(rates)


def summarize(points: Sequence[BenchPoint]) -> Dict[str, float]:
    summary = {}
    for operator in {p.operator for p in points}:
        try:
            summary[operator.value] = loglog_slope(points, operator)
        except ContractError:
            continue
    return summary
