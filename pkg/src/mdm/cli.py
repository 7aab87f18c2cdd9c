"""Command-line front end tying the library together.

Subcommands: make-dataset, tokenize-train, tokenize, train, sample,
gradcheck, bench.  Exit codes: 0 success, 1 usage error (unknown flag or
missing subcommand; argparse's own usage text goes to stderr), 2 runtime
failure (bad files, domain validation, numeric trouble), with one error
line on stderr.  Nothing is written outside the given --out path.

The MDM_THREADS environment variable caps BLAS worker threads for the whole
process; `bench --threads` overrides it and shows up in the kernel label.
`train` builds its configuration from TrainConfig defaults, then a JSON file
(--config, keys mirror TrainConfig fields), then individual flags, so a flag
always wins over the file.  Values that pass flag parsing but fail domain
validation (a negative learning rate, a benchmark repetition count below
the minimum) surface as runtime errors, not usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import (
    BenchConfig,
    bench_attention,
    bench_scan,
    find_crossover,
    points_to_csv,
)
from .dataset import (
    caption_tokens,
    load_dataset,
    make_dataset,
    sample_batch,
    save_dataset,
)
from .numerics import ArgumentError, RngState
from .pipeline import (
    TrainConfig,
    generate,
    gradient_check,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from .tokenizer import (
    SPECIALS,
    TokenizerModel,
    encode,
    decode,
    load_tokenizer,
    save_tokenizer,
    train_unigram,
)

METRICS_HEADER = "step,loss_total,loss_se,loss_rec_img,loss_rec_txt,loss_kl"
GRADCHECK_TOL = 1e-4

# keeps the cap alive for the process lifetime; threadpoolctl would restore
# the original limits once the limiter object is collected
_LIMITER = None


def _apply_thread_cap(explicit: Optional[int]) -> None:
    global _LIMITER
    n = explicit
    if n is None:
        raw = os.environ.get("MDM_THREADS")
        if raw is None:
            return
        try:
            n = int(raw)
        except ValueError:
            raise ArgumentError(
                f"MDM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ArgumentError(f"thread cap must be >= 1, got {n}")
    _LIMITER = threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# small shared helpers

def _parse_lengths(text: str) -> tuple:
    try:
        lengths = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"lengths must be comma-separated integers, got {text!r}") from None
    if not lengths:
        raise argparse.ArgumentTypeError("lengths must be non-empty")
    return lengths


def _padded_ids(model: TokenizerModel, text: str, text_len: int) -> np.ndarray:
    """Tokenizer ids truncated or padded (with the pad special) to text_len."""
    ids = encode(model, text)[:text_len]
    ids = ids + [SPECIALS["pad"]] * (text_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def _draw_batch(data: Dict, rng: RngState, cfg: TrainConfig,
                tok: Optional[TokenizerModel]) -> Dict[str, np.ndarray]:
    if tok is None:
        return sample_batch(data, rng, cfg.batch, cfg.text_len)
    count = data["images"].shape[0]
    if data["class_ids"] is None:
        raise ArgumentError("train: dataset has no class ids")
    idx = rng.integers(0, count, (cfg.batch,))
    return {
        "images": data["images"][idx],
        "token_ids": np.stack([_padded_ids(tok, data["captions"][int(i)],
                                           cfg.text_len) for i in idx]),
        "class_ids": data["class_ids"][idx],
    }


def _decode_caption(ids: np.ndarray, tok: Optional[TokenizerModel]) -> str:
    if tok is not None:
        text = decode(tok, [int(i) for i in ids])
    else:
        text = bytes(int(i) % 256 for i in ids).decode("utf-8", errors="replace")
    return "".join(ch if ch.isprintable() else "?" for ch in text)


def _pnm_text(image: np.ndarray) -> str:
    """P2 (one channel) or P3 (three channel) text form of a [H, W, C] image."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ArgumentError(
            f"pnm: image must be [H, W, 1] or [H, W, 3], got shape {arr.shape}")
    h, w, c = arr.shape
    levels = np.rint(arr * 255).astype(int)
    magic = "P2" if c == 1 else "P3"
    rows = [" ".join(str(v) for v in levels[y].reshape(-1)) for y in range(h)]
    return f"{magic}\n{w} {h}\n255\n" + "\n".join(rows) + "\n"


def _metrics_row(metrics: Dict[str, float]) -> str:
    parts = [str(int(metrics["step"]))]
    parts += [f"{metrics[k]:.10g}" for k in METRICS_HEADER.split(",")[1:]]
    return ",".join(parts)


def _read_metrics(path: Path) -> List[Dict[str, float]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    keys = METRICS_HEADER.split(",")
    return [dict(zip(keys, map(float, line.split(","))))
            for line in lines[1:]]


# ---------------------------------------------------------------------------
# subcommands

def _cmd_make_dataset(args) -> int:
    rng = RngState(args.seed)
    data = make_dataset(args.count, rng, num_classes=args.classes,
                        image_hw=args.image_hw, channels=args.channels,
                        jitter=args.jitter)
    save_dataset(data, args.out)
    print(f"wrote {args.count} examples ({args.classes} classes, "
          f"{args.image_hw}x{args.image_hw}x{args.channels}) to {args.out}")
    return 0


def _cmd_tokenize_train(args) -> int:
    corpus = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    model = train_unigram(corpus, args.vocab_size,
                          character_coverage=args.coverage)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_tokenizer(model, out)
    print(f"trained tokenizer: vocab {model.vocab_size} "
          f"({len(model.pieces)} pieces), coverage {model.coverage}, "
          f"wrote {out}")
    return 0


def _cmd_tokenize(args) -> int:
    model = load_tokenizer(args.model)
    for line in sys.stdin.read().splitlines():
        print(" ".join(str(i) for i in encode(model, line)))
    return 0


def _train_config(args) -> TrainConfig:
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    over: Dict[str, object] = {}
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ArgumentError(f"{args.config}: config must be a JSON object")
        unknown = sorted(set(raw) - field_names)
        if unknown:
            raise ArgumentError(f"{args.config}: unknown config keys {unknown}")
        over.update(raw)
    for flag in ("steps", "batch", "seed", "learning_rate"):
        value = getattr(args, flag)
        if value is not None:
            over[flag] = value
    return TrainConfig(**over)


def _cmd_train(args) -> int:
    tok = load_tokenizer(args.tokenizer) if args.tokenizer else None
    if args.resume:
        fixed = [name for name in ("config", "batch", "learning_rate", "seed",
                                   "tokenizer")
                 if getattr(args, name) is not None]
        if fixed:
            raise ArgumentError(
                "train: --resume takes configuration from the checkpoint; "
                f"remove --{', --'.join(f.replace('_', '-') for f in fixed)}")
        state = load_checkpoint(args.resume)
        cfg = state.cfg
        total = args.steps if args.steps is not None else cfg.steps
    else:
        cfg = _train_config(args)
        if tok is not None:
            cfg = dataclasses.replace(cfg, vocab=tok.vocab_size)
        state = init_state(cfg)
        total = cfg.steps

    data = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.mdmt"
    metrics_path = out / "metrics.csv"
    fresh = not metrics_path.exists()

    metrics: Dict[str, float] = {}
    with open(metrics_path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(METRICS_HEADER + "\n")
        while state.step < total:
            batch = _draw_batch(data, state.rng, cfg, tok)
            metrics = train_step(state, batch)
            fh.write(_metrics_row(metrics) + "\n")
            if args.save_every and state.step % args.save_every == 0:
                fh.flush()
                save_checkpoint(state, ckpt_path)
    save_checkpoint(state, ckpt_path)

    if not args.no_figure:
        from .plotting import render_loss_curves
        render_loss_curves(_read_metrics(metrics_path), out / "loss.png")
    if metrics:
        print(f"step {int(metrics['step'])}: "
              f"loss_total {metrics['loss_total']:.6f}, wrote {ckpt_path}")
    else:
        print(f"step {state.step}: nothing to do (target {total}), "
              f"wrote {ckpt_path}")
    return 0


def _cmd_sample(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    params = state.ema if args.ema else state.params
    tok = load_tokenizer(args.tokenizer) if args.tokenizer else None
    if tok is not None and tok.vocab_size != cfg.vocab:
        raise ArgumentError(
            f"sample: tokenizer vocab {tok.vocab_size} does not match "
            f"checkpoint vocab {cfg.vocab}")
    prompt_tokens = None
    if args.prompt is not None:
        prompt_tokens = (_padded_ids(tok, args.prompt, cfg.text_len)
                         if tok is not None
                         else caption_tokens(args.prompt, cfg.text_len))
    rng = RngState(args.seed)
    images, ids = generate(params, cfg, rng, class_id=args.class_id,
                           prompt_tokens=prompt_tokens, steps=args.steps,
                           guidance=args.guidance, n_samples=args.n,
                           sched=state.sched)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if cfg.channels == 1 else "ppm"
    for i in range(args.n):
        path = out / f"sample_{i:03d}.{ext}"
        path.write_text(_pnm_text(images[i]), encoding="ascii")
        print(f"{path.name}\t{_decode_caption(ids[i], tok)}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradient_check(seed=args.seed,
                            coords_per_tensor=args.coords_per_tensor)
    width = max(len(name) for name in report)
    for name, rel in report.items():
        print(f"{name:<{width}}  {rel:.3e}")
    worst = max(report.values())
    ok = worst < GRADCHECK_TOL
    print(f"worst {worst:.3e} ({'pass' if ok else 'FAIL'}, "
          f"tolerance {GRADCHECK_TOL:.1e})")
    return 0 if ok else 2


def _cmd_bench(args) -> int:
    if args.threads is not None:
        _apply_thread_cap(args.threads)
    cfg = BenchConfig(lengths=args.lengths, n=args.n, m=args.m, g=args.g,
                      repetitions=args.reps, warmup=args.warmup,
                      seed=args.seed, threads=args.threads or 1)
    points = bench_scan(cfg) + bench_attention(cfg)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(points_to_csv(points), encoding="utf-8")
    crossover = find_crossover(points[:len(cfg.lengths)],
                               points[len(cfg.lengths):])
    print(f"wrote {len(points)} rows to {out}")
    if crossover is None:
        print("no crossover within the tested lengths")
    else:
        print(f"crossover at L={crossover}")
    if not args.no_figure:
        from .plotting import render_bench_curves
        render_bench_curves(points, out.with_suffix(".png"),
                            crossover=crossover)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdm",
        description="Two-modality latent diffusion with selective scan blocks.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("make-dataset", help="synthesize a labeled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--image-hw", type=int, default=8)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("tokenize-train", help="train a unigram tokenizer")
    p.add_argument("--corpus", required=True, help="UTF-8 text, one line per example")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--coverage", type=float, default=1.0)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=_cmd_tokenize_train)

    p = sub.add_parser("tokenize",
                       help="encode stdin lines to space-separated ids")
    p.add_argument("--model", required=True, help="tokenizer model file")
    p.set_defaults(func=_cmd_tokenize)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True,
                   help="run directory (metrics.csv, checkpoint.mdmt, loss.png)")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--steps", type=int, help="total step target")
    p.add_argument("--batch", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--tokenizer", help="tokenizer model for captions "
                                       "(default: raw bytes)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--save-every", type=int, default=0,
                   help="also checkpoint every N steps")
    p.add_argument("--no-figure", action="store_true",
                   help="skip the loss-curve image")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="directory for image files")
    p.add_argument("--n", type=int, default=1, help="number of samples")
    p.add_argument("--class", type=int, dest="class_id",
                   help="class condition (default: unconditional)")
    p.add_argument("--prompt", help="caption text to pin instead of sampling")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--guidance", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ema", action="store_true",
                   help="sample the EMA shadow instead of the raw weights")
    p.add_argument("--tokenizer", help="tokenizer model for decoding captions")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords-per-tensor", type=int, default=40)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench", help="scan vs attention latency ladder")
    p.add_argument("--lengths", type=_parse_lengths,
                   default=(64, 128, 256, 512, 1024, 2048, 4096, 8192),
                   help="comma-separated sequence lengths")
    p.add_argument("--n", type=int, default=64, help="model width")
    p.add_argument("--m", type=int, default=4, help="stacked layers")
    p.add_argument("--g", type=int, default=4, help="query groups")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int,
                   help="BLAS thread cap for this run (labels the kernels)")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--no-figure", action="store_true",
                   help="skip the log-log latency image")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; fold the
        # latter into our usage code
        return 0 if exc.code == 0 else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _apply_thread_cap(getattr(args, "threads", None))
        return args.func(args)
    except (RuntimeError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
