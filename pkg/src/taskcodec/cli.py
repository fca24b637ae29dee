"""Command-line interface: dataset generation, training, evaluation,
sweeps, and the pixel-codec baseline."""
from __future__ import annotations

import argparse
import os
import sys

from .config import grid_from_kv, load_kv, train_from_kv, world_from_kv
from .harness import (RateDistortionRecord, baseline_eval, evaluate_run,
                      run_sweep, write_records_csv)
from .models import ModelBundle
from .training import TrainingDiverged, train_phase1, train_phase2
from .world import gen_dataset, load_dataset, save_dataset


def _resolve_data(path) -> str:
    if os.path.isdir(path):
        return os.path.join(path, "data.tocd")
    return path


def _cmd_gen_data(args):
    spec = world_from_kv(load_kv(args.spec))
    dataset = gen_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "data.tocd")
    save_dataset(out, dataset)
    print(f"wrote {dataset.frames} frames x {dataset.cameras} cameras to {out}")


def _cmd_train(args):
    kv = load_kv(args.config)
    cfg = train_from_kv(kv)
    data_path = args.data or kv.get("data")
    if not data_path:
        raise SystemExit("no dataset: pass --data or put 'data = <path>' in the config")
    dataset = load_dataset(_resolve_data(data_path))
    bundle = None
    if args.phase in ("2",) or (args.phase == "all" and args.resume):
        bundle = ModelBundle.load(args.resume or args.out)
    try:
        if args.phase in ("1", "all") and bundle is None:
            bundle = train_phase1(dataset, cfg, log_path=args.log)
        elif args.phase == "1":
            bundle = train_phase1(dataset, cfg, bundle=bundle, log_path=args.log)
        if args.phase in ("2", "all"):
            bundle = train_phase2(dataset, bundle, cfg, log_path=args.log)
    except TrainingDiverged as exc:
        if exc.bundle is not None:
            exc.bundle.save(args.out)
            print(f"training diverged ({exc}); last good checkpoint saved to {args.out}",
                  file=sys.stderr)
        raise SystemExit(1)
    bundle.save(args.out)
    print(f"checkpoint written to {args.out}")


def _cmd_evaluate(args):
    bundle = ModelBundle.load(args.ckpt)
    dataset = load_dataset(_resolve_data(args.data))
    result = evaluate_run(bundle, dataset, split=args.split,
                          bandwidth_mbps=args.bandwidth,
                          mode_policy=args.mode,
                          dump_dir=args.dump_bitmaps,
                          figures_dir=args.figures)
    record = RateDistortionRecord(
        config_id=f"t1{bundle.cfg.tau1}_t2{bundle.cfg.tau2}", seed=dataset.seed,
        tau1=bundle.cfg.tau1, tau2=bundle.cfg.tau2, beta=0.0, r_bit=0.0,
        bits_measured=result.bits_measured, bits_estimated=result.bits_estimated,
        bce=result.bce, moda=result.moda, latency_ms=result.latency_ms)
    write_records_csv(args.csv, [record])
    print(f"{result.n_frames} frames: {result.bits_measured:.1f} bits/frame, "
          f"bce {result.bce:.2f}, moda {result.moda:.3f} -> {args.csv}")


def _cmd_sweep(args):
    grid = grid_from_kv(load_kv(args.grid))
    train_missing = grid.pop("train_missing", not args.no_train_missing)
    records = run_sweep(grid, args.csv, args.workdir,
                        train_missing=train_missing and not args.no_train_missing,
                        figures_dir=args.figures)
    print(f"{len(records)} records -> {args.csv}")


def _cmd_baseline(args):
    dataset = load_dataset(_resolve_data(args.data))
    if args.ckpt:
        bundle = ModelBundle.load(args.ckpt)
        result = baseline_eval(bundle, dataset, q=args.q, split=args.split,
                               bandwidth_mbps=args.bandwidth)
        bce, moda = result.bce, result.moda
        bits = result.bits_measured
        latency = result.latency_ms
    else:
        from .baseline import baseline_encode_frame
        from .world import split_ranges
        frames = split_ranges(dataset.frames)[args.split]
        totals = [sum(baseline_encode_frame(dataset.images[t, k], args.q)[0]
                      for k in range(dataset.cameras)) for t in frames]
        bits = sum(totals) / len(totals)
        bce, moda = float("nan"), float("nan")
        latency = bits / (args.bandwidth * 1000.0)
    record = RateDistortionRecord(
        config_id=f"baseline_q{args.q}", seed=dataset.seed, tau1=-1, tau2=-1,
        beta=0.0, r_bit=0.0, bits_measured=bits, bits_estimated=bits,
        bce=bce, moda=moda, latency_ms=latency)
    write_records_csv(args.csv, [record])
    print(f"baseline q={args.q}: {bits:.1f} bits/frame -> {args.csv}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskcodec",
        description="Task-oriented feature compression for multi-camera edge analytics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="world key/value file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the pipeline")
    p.add_argument("--phase", choices=["1", "2", "all"], default="all")
    p.add_argument("--config", required=True, help="training key/value file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--data", help="dataset directory or .tocd file")
    p.add_argument("--resume", help="checkpoint to continue from (phase 2)")
    p.add_argument("--log", help="training log CSV path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--mode", choices=["auto", "hierarchical"], default="auto")
    p.add_argument("--bandwidth", type=float, default=1.0, help="Mbit/s")
    p.add_argument("--dump-bitmaps", help="directory for PGM dumps")
    p.add_argument("--figures", help="directory for prediction/bit-map panels")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="run a configuration sweep")
    p.add_argument("--grid", required=True, help="grid key/value file")
    p.add_argument("--csv", required=True)
    p.add_argument("--workdir", default="sweep_work")
    p.add_argument("--figures", help="directory for report figures")
    p.add_argument("--no-train-missing", action="store_true",
                   help="error out instead of training missing checkpoints")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("baseline", help="evaluate the pixel-codec baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--q", type=int, required=True, help="bit depth 1..8")
    p.add_argument("--csv", required=True)
    p.add_argument("--ckpt", help="checkpoint for task metrics on reconstructions")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.set_defaults(func=_cmd_baseline)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
