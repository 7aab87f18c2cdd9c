"""Figure rendering for training metrics and benchmark results.

Renders to files only (Agg backend), so it works headless and never blocks
on a display.  Callers hand in the same rows that go into the CSVs, keeping
figure and delimited output in lockstep.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bench import BenchPoint  # noqa: E402
from .numerics import ArgumentError  # noqa: E402

_LOSS_KEYS = ("loss_total", "loss_se", "loss_rec_img", "loss_rec_txt", "loss_kl")


def render_loss_curves(rows: Sequence[Dict[str, float]], path) -> None:
    """Loss components over training steps, one line each."""
    if not rows:
        raise ArgumentError("render_loss_curves: no metric rows")
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in _LOSS_KEYS:
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bench_curves(points: Sequence[BenchPoint], path,
                        crossover: Optional[int] = None) -> None:
    """Median latency against length on log-log axes, one line per kernel."""
    if not points:
        raise ArgumentError("render_bench_curves: no bench points")
    by_kernel: Dict[str, list] = {}
    for p in points:
        by_kernel.setdefault(p.kernel, []).append(p)
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for kernel, pts in by_kernel.items():
        pts = sorted(pts, key=lambda p: p.length)
        ls = [p.length for p in pts]
        ax.plot(ls, [p.median_us for p in pts], marker="o", label=kernel)
        ax.fill_between(ls, [p.p10_us for p in pts], [p.p90_us for p in pts],
                        alpha=0.2)
    if crossover is not None:
        ax.axvline(crossover, color="gray", linestyle="--", linewidth=1,
                   label=f"crossover L={crossover}")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length L")
    ax.set_ylabel("median time (us)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
