"""Command line: ``aaformer {train,eval,export-maps,bench-sinkhorn}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, format_config, load_config
from .data import SyntheticDataset
from .evaluation import evaluate
from .export import export_maps, part_maps
from .plotting import plot_cmc, plot_part_maps, plot_training
from .sinkhorn import entropic_transport, round_assignment
from .training import METRIC_FIELDS, Trainer

log = logging.getLogger("aaformer")

ASSIGNMENT_FLAGS = {"ot": "ot", "nn": "nn", "stripes": "stripes"}


def write_metrics_csv(path, records) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow((r.step, repr(r.lr), repr(r.loss_total), repr(r.loss_cls), repr(r.loss_tri)))
    return path


def write_eval_csv(path, report) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value"))
        for name, value in report.rows():
            w.writerow((name, f"{value:.6f}"))
    return path


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.assignment:
        cfg = cfg.replace(assignment=ASSIGNMENT_FLAGS[args.assignment])
    return cfg


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        overrides = {"assignment": args.assignment} if args.assignment else {}
        trainer = Trainer.from_checkpoint(ck, **overrides)
        log.info("resumed from %s at step %d", args.checkpoint, trainer.step)
    else:
        cfg = _run_config(args)
        (out / "config.txt").write_text(format_config(cfg))
        trainer = Trainer(cfg.model, cfg.train, SyntheticDataset(cfg.data), cfg.seed, dump_dir=out)
    trainer.dump_dir = out
    steps = args.steps if args.steps is not None else trainer.train_cfg.steps
    t0 = time.perf_counter()
    records = trainer.run(steps)
    elapsed = time.perf_counter() - t0
    write_metrics_csv(out / "metrics.csv", trainer.history)
    save_checkpoint(trainer.to_checkpoint(), out / "checkpoint.aafk")
    if records:
        plot_training(trainer.history, out / "training.png")
    report = evaluate(trainer.model, trainer.dataset.query, trainer.dataset.gallery)
    write_eval_csv(out / "eval.csv", report)
    plot_cmc(report, out / "cmc.png")
    print(f"trained {len(records)} steps in {elapsed:.1f}s; rank1={report.rank1:.4f} mAP={report.mAP:.4f}")
    print(f"wrote {out / 'metrics.csv'}, {out / 'checkpoint.aafk'}, {out / 'eval.csv'}")
    return 0


def _load_trainer(args) -> Trainer:
    ck = load_checkpoint(args.checkpoint)
    overrides = {"assignment": args.assignment} if getattr(args, "assignment", None) else {}
    return Trainer.from_checkpoint(ck, **overrides)


def cmd_eval(args) -> int:
    trainer = _load_trainer(args)
    report = evaluate(trainer.model, trainer.dataset.query, trainer.dataset.gallery)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out / "eval.csv", report)
    plot_cmc(report, out / "cmc.png")
    for name, value in report.rows():
        print(f"{name},{value:.6f}")
    if report.excluded_queries:
        print(f"excluded queries without positives: {report.excluded_queries}", file=sys.stderr)
    return 0


def cmd_export_maps(args) -> int:
    trainer = _load_trainer(args)
    cfg = trainer.model_cfg
    gallery = trainer.dataset.gallery
    if not 0 <= args.image < len(gallery):
        raise SystemExit(f"--image must be in [0, {len(gallery)})")
    image = gallery.images[args.image]
    with T.no_grad():
        out = trainer.model.forward(image)
    if not 0 <= args.layer < cfg.layers:
        raise SystemExit(f"--layer must be in [0, {cfg.layers})")
    if not 0 <= args.head < cfg.heads:
        raise SystemExit(f"--head must be in [0, {cfg.heads})")
    paths = export_maps(out.traces, args.layer, args.head, args.out, cfg.grid, scale=args.scale)
    maps = part_maps(out.traces[args.layer], args.head, cfg.grid)
    paths.append(plot_part_maps(maps, Path(args.out) / f"part_L{args.layer}_H{args.head}.png",
                                image=image, sets=cfg.granularity_sets))
    for p in paths:
        print(p)
    return 0


def bench_sinkhorn(parts: int = 5, patches: int = 576, iters: int = 3, epsilon: float = 0.05,
                   repeats: int = 200, seed: int = 0) -> np.ndarray:
    """Wall time in ms of transport + rounding for one [parts, patches] similarity, per call."""
    rng = np.random.default_rng(seed)
    sim = rng.standard_normal((parts, patches))
    for _ in range(3):
        round_assignment(entropic_transport(sim, epsilon, iters))
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        round_assignment(entropic_transport(sim, epsilon, iters))
        times.append(time.perf_counter() - t0)
    return np.array(times) * 1e3


def cmd_bench_sinkhorn(args) -> int:
    ms = bench_sinkhorn(args.parts, args.patches, args.iters, args.epsilon, args.repeats, args.seed)
    print(f"sinkhorn P={args.parts} N={args.patches} iters={args.iters}: "
          f"median {np.median(ms):.3f} ms, min {ms.min():.3f} ms, max {ms.max():.3f} ms over {args.repeats} calls")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("metric", "value"))
            for name, v in (("parts", args.parts), ("patches", args.patches), ("iters", args.iters),
                            ("median_ms", np.median(ms)), ("min_ms", ms.min()), ("max_ms", ms.max())):
                w.writerow((name, v))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aaformer", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="key = value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--assignment", choices=sorted(ASSIGNMENT_FLAGS))
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("train", help="train on the synthetic benchmark")
    common(p, "runs/train")
    p.add_argument("--steps", type=int, help="stop after this many total steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CMC / mAP of a checkpoint on the held-out split")
    common(p, "runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-maps", help="write part-token assignment maps")
    common(p, "runs/maps")
    p.add_argument("--layer", type=int, default=2)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--image", type=int, default=0, help="gallery image index")
    p.add_argument("--scale", type=int, default=8, help="pixels per patch cell in the PGM")
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("bench-sinkhorn", help="time one patch-assignment solve")
    p.add_argument("--parts", type=int, default=5)
    p.add_argument("--patches", type=int, default=576)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV path")
    p.set_defaults(func=cmd_bench_sinkhorn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("eval", "export-maps") and not args.checkpoint:
        raise SystemExit(f"{args.command} needs --checkpoint")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
