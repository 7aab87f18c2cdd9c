"""Wall-clock scaling of the state-space scan against an attention baseline.

Times M stacked ssm_scan forwards, whose work grows linearly in sequence
length L (projections cost L*N^2, the recurrence L*N), against a
grouped-query attention stack whose score maps grow quadratically
(L^2 * N / G).  Fitting log time against log L over a geometric ladder of
lengths exposes the two exponents and the length where the scan becomes
cheaper.

The attention baseline is deliberately naive: plain float64 matmuls, no
fused kernels, no masking tricks.  Queries are pooled into N/G-wide groups
before scoring, so one score map and one key/value projection serve each
group; that is what makes its cost scale as 1/G.  The point of the
comparison is asymptotics, not absolute speed of either side.

Timing protocol: a monotonic nanosecond clock, warmup runs discarded, then
the median (and 10th/90th percentiles) of at least five repetitions.
Kernels run single-threaded unless the config says otherwise; a non-default
thread count is part of the kernel label so results never mix silently.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .mamba import ssm_scan
from .numerics import ArgumentError, RngState


class BenchError(RuntimeError):
    """A measurement cannot be trusted (e.g. below timer resolution)."""


@dataclass(frozen=True)
class BenchConfig:
    lengths: Tuple[int, ...]
    n: int = 64
    m: int = 4
    g: int = 4
    repetitions: int = 5
    warmup: int = 2
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if len(self.lengths) == 0:
            raise ArgumentError("BenchConfig: lengths must be non-empty")
        if any(l < 1 for l in self.lengths):
            raise ArgumentError("BenchConfig: lengths must be >= 1")
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ArgumentError(
                f"BenchConfig: lengths must be strictly increasing, "
                f"got {self.lengths}")
        if self.repetitions < 5:
            raise ArgumentError(
                f"BenchConfig: repetitions must be >= 5, got {self.repetitions}")
        if self.warmup < 0:
            raise ArgumentError(f"BenchConfig: warmup must be >= 0, got {self.warmup}")
        if self.n < 1 or self.m < 1 or self.g < 1:
            raise ArgumentError("BenchConfig: n, m, g must be >= 1")
        if self.n % self.g:
            raise ArgumentError(
                f"BenchConfig: g ({self.g}) must divide n ({self.n})")
        if self.threads < 1:
            raise ArgumentError(f"BenchConfig: threads must be >= 1, got {self.threads}")

    def kernel_label(self, base: str) -> str:
        return base if self.threads == 1 else f"{base}-t{self.threads}"


@dataclass(frozen=True)
class BenchPoint:
    kernel: str
    length: int
    n: int
    m: int
    g: int
    median_us: float
    p10_us: float
    p90_us: float


CSV_HEADER = "kernel,L,N,M,G,median_us,p10_us,p90_us"


def points_to_csv(points: Sequence[BenchPoint]) -> str:
    lines = [CSV_HEADER]
    for p in points:
        lines.append(f"{p.kernel},{p.length},{p.n},{p.m},{p.g},"
                     f"{p.median_us:.3f},{p.p10_us:.3f},{p.p90_us:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# kernels

def _scan_stack(cfg: BenchConfig, rng: RngState) -> List[Dict[str, np.ndarray]]:
    n = cfg.n
    blocks = []
    for _ in range(cfg.m):
        blocks.append({
            "A": -1.0 - rng.uniform((n,)),
            "B": rng.normal((n, n)) / math.sqrt(n),
            "C": rng.normal((n, n)) / math.sqrt(n),
            "D": np.ones(n),
            "delta_raw": -2.0 + 0.5 * rng.normal((n,)),
        })
    return blocks


def _scan_forward(blocks: List[Dict[str, np.ndarray]], u: np.ndarray) -> np.ndarray:
    for block in blocks:
        u, _ = ssm_scan(block, u)
    return u


def _attention_stack(cfg: BenchConfig, rng: RngState) -> List[Dict[str, np.ndarray]]:
    n, kv = cfg.n, cfg.n // cfg.g
    layers = []
    for _ in range(cfg.m):
        layers.append({
            "wq": rng.normal((n, kv)) / math.sqrt(n),
            "wk": rng.normal((n, kv)) / math.sqrt(n),
            "wv": rng.normal((n, kv)) / math.sqrt(n),
            "wo": rng.normal((kv, n)) / math.sqrt(kv),
        })
    return layers


def gqa_layer(layer: Dict[str, np.ndarray], u: np.ndarray,
              chunk: int = 1024) -> np.ndarray:
    """One pooled grouped-query attention layer over u [L, N].

    Score rows are produced in chunks so the [L, L] map never materializes
    whole; the flop count is unchanged.
    """
    q = u @ layer["wq"]
    k = u @ layer["wk"]
    v = u @ layer["wv"]
    scale = 1.0 / math.sqrt(q.shape[-1])
    ctx = np.empty_like(q)
    for lo in range(0, q.shape[0], chunk):
        hi = lo + chunk
        scores = scale * (q[lo:hi] @ k.T)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        ctx[lo:hi] = w @ v
    return ctx @ layer["wo"]


def _attention_forward(layers: List[Dict[str, np.ndarray]],
                       u: np.ndarray) -> np.ndarray:
    for layer in layers:
        u = gqa_layer(layer, u)
    return u


# ---------------------------------------------------------------------------
# timing

def _time_once(fn: Callable[[], np.ndarray]) -> float:
    start = time.perf_counter_ns()
    fn()
    return (time.perf_counter_ns() - start) / 1e3


def _measure(cfg: BenchConfig, label: str, length: int,
             fn: Callable[[], np.ndarray]) -> BenchPoint:
    for _ in range(cfg.warmup):
        fn()
    times = np.array([_time_once(fn) for _ in range(cfg.repetitions)])
    median = float(np.median(times))
    if median < 1.0:
        raise BenchError(
            f"{label} at L={length}: median {median:.3f} us is below timer "
            "resolution; increase L (or stack more layers)")
    return BenchPoint(kernel=label, length=length, n=cfg.n, m=cfg.m, g=cfg.g,
                      median_us=median,
                      p10_us=float(np.percentile(times, 10)),
                      p90_us=float(np.percentile(times, 90)))


def bench_scan(cfg: BenchConfig) -> List[BenchPoint]:
    """Median forward time of M stacked scans at each length."""
    rng = RngState(cfg.seed)
    blocks = _scan_stack(cfg, rng)
    label = cfg.kernel_label("scan")
    # preflight at the largest length settles the allocator and caches so
    # the first measured lengths are not charged for process start-up
    _scan_forward(blocks, rng.normal((cfg.lengths[-1], cfg.n)))
    points = []
    for length in cfg.lengths:
        u = rng.normal((length, cfg.n))
        points.append(_measure(cfg, label, length,
                               lambda u=u: _scan_forward(blocks, u)))
    return points


def bench_attention(cfg: BenchConfig) -> List[BenchPoint]:
    """Median forward time of M stacked attention layers at each length."""
    rng = RngState(cfg.seed)
    layers = _attention_stack(cfg, rng)
    label = cfg.kernel_label("attention")
    _attention_forward(layers, rng.normal((cfg.lengths[-1], cfg.n)))
    points = []
    for length in cfg.lengths:
        u = rng.normal((length, cfg.n))
        points.append(_measure(cfg, label, length,
                               lambda u=u: _attention_forward(layers, u)))
    return points


# ---------------------------------------------------------------------------
# analysis

def loglog_fit(lengths: Sequence[float],
               times_us: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares line through (log L, log t): (slope, intercept, R^2)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times_us, dtype=np.float64))
    if x.size < 2:
        raise ArgumentError("loglog_fit: need at least 2 points")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def find_crossover(scan_points: Sequence[BenchPoint],
                   attn_points: Sequence[BenchPoint]) -> Optional[int]:
    """Smallest length where the scan is faster and stays faster.

    Returns None when no suffix of the shared length ladder has the scan
    strictly below attention everywhere.
    """
    scan_l = [p.length for p in scan_points]
    attn_l = [p.length for p in attn_points]
    if scan_l != attn_l:
        raise ArgumentError(
            f"find_crossover: length ladders differ, {scan_l} vs {attn_l}")
    crossover = None
    for s, a in zip(reversed(scan_points), reversed(attn_points)):
        if s.median_us < a.median_us:
            crossover = s.length
        else:
            break
    return crossover
