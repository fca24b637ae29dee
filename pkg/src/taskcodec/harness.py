"""Experiment harness: per-run evaluation, configuration sweeps, and the
rate-performance CSV/figure reports."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, fields
from itertools import product

import numpy as np

from .baseline import baseline_encode_frame
from .inference import (bce_distortion, bits_to_bitmap, build_fusion_input,
                        fuse_predict, moda_counts, write_pgm)
from .models import ModelBundle
from .pipeline import (DeviceState, ServerState, decode_frame, encode_frame_info,
                       measure_rate, parse_packet, serialize_packet)
from .quantize import round_nearest
from .training import TrainConfig, train_phase1, train_phase2
from .world import Dataset, WorldSpec, gen_dataset, load_dataset, save_dataset, split_ranges

__all__ = [
    "RateDistortionRecord", "CSV_COLUMNS", "EvalResult", "evaluate_run",
    "baseline_eval", "run_sweep", "write_records_csv", "records_to_csv_text",
]

CSV_COLUMNS = ["config_id", "seed", "tau1", "tau2", "beta", "r_bit",
               "bits_measured", "bits_estimated", "bce", "moda", "latency_ms"]


@dataclass
class RateDistortionRecord:
    config_id: str
    seed: int
    tau1: int
    tau2: int
    beta: float
    r_bit: float
    bits_measured: float
    bits_estimated: float
    bce: float
    moda: float
    latency_ms: float


@dataclass
class EvalResult:
    bits_measured: float      # mean bits/frame, headers included
    bits_estimated: float     # mean bits/frame, model estimate, no headers
    bce: float                # mean per-frame BCE (nats)
    moda: float               # sequence-level MODA
    latency_ms: float
    n_frames: int


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".10g")


def records_to_csv_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(getattr(r, f.name)) for f in fields(RateDistortionRecord)])
    return buf.getvalue()


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv_text(records))


# --------------------------------------------------------------------------
# single-run evaluation

def evaluate_run(bundle: ModelBundle, dataset: Dataset, split: str = "test",
                 bandwidth_mbps: float = 1.0, mode_policy: str = "auto",
                 dump_dir=None, figures_dir=None,
                 moda_threshold: float = 0.5) -> EvalResult:
    """Streams a dataset slice through encode -> decode -> fuse and
    aggregates rate and task metrics. Any decode mismatch aborts."""
    frame_range = split_ranges(dataset.frames)[split]
    n = len(frame_range)
    if n == 0:
        raise ValueError("empty evaluation set")
    K = bundle.cfg.devices
    if dataset.cameras != K:
        raise ValueError(f"dataset has {dataset.cameras} cameras, bundle {K}")

    devices = []
    server = ServerState()
    for k in range(K):
        spec, params = bundle.extractor(k)
        devices.append(DeviceState(device_id=k, extractor_spec=spec,
                                   extractor_params=params, hyper=bundle.hyper(k),
                                   temporal=bundle.temporal(k)))
        server.add_device(k, bundle.hyper(k), bundle.temporal(k))

    fusion_spec, fusion_params = bundle.fusion()
    tau1 = bundle.cfg.tau1
    decoded_history: list[list] = []   # one entry per frame: K features
    bits_measured = []
    bits_estimated = []
    bce_values = []
    fn = fp = n_gt = 0
    panels = []
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
    if figures_dir is not None:
        os.makedirs(figures_dir, exist_ok=True)

    for i, t in enumerate(frame_range):
        packets = []
        feats = []
        frame_est = 0.0
        frame_bits_map = None
        for k in range(K):
            frame = dataset.images[t, k].astype(np.float64)[None] / 255.0
            packet, sent, info = encode_frame_info(devices[k], frame, mode_policy)
            packet = parse_packet(serialize_packet(packet))
            received = decode_frame(server, packet)
            if not np.array_equal(sent.values, received.values):
                raise RuntimeError(
                    f"lossless contract violated at frame {t}, device {k}")
            packets.append(packet)
            feats.append(received)
            frame_est += info.est_feature_bits + info.est_hyper_bits
            frame_bits_map = (info.per_element_bits if frame_bits_map is None
                              else frame_bits_map + info.per_element_bits)
            if dump_dir is not None and i < 8:
                write_pgm(os.path.join(dump_dir, f"bits_d{k}_t{t}.pgm"),
                          bits_to_bitmap(info.per_element_bits))
        decoded_history.append(feats)
        bits_measured.append(measure_rate(packets))
        bits_estimated.append(frame_est)

        by_offset = []
        for off in range(tau1 + 1):
            j = len(decoded_history) - 1 - off
            by_offset.append(decoded_history[j] if j >= 0 else None)
        fin = build_fusion_input(by_offset, K, bundle.cfg.feat_hw)
        pred = fuse_predict(fin, fusion_spec, fusion_params)
        truth = dataset.truth[t]
        bce_values.append(bce_distortion(pred, truth))
        d_fn, d_fp, d_gt = moda_counts(pred, truth, moda_threshold)
        fn += d_fn
        fp += d_fp
        n_gt += d_gt
        if dump_dir is not None and i < 8:
            write_pgm(os.path.join(dump_dir, f"pred_t{t}.pgm"),
                      np.round(pred * 255).astype(np.uint8))
            write_pgm(os.path.join(dump_dir, f"truth_t{t}.pgm"),
                      (np.asarray(truth) * 255).astype(np.uint8))
        if figures_dir is not None and i < 3:
            panels.append((t, pred, np.asarray(truth, dtype=float),
                           bits_to_bitmap(frame_bits_map)))

    if figures_dir is not None:
        from .figures import eval_panel_figure
        for t, pred, truth_img, bitmap in panels:
            eval_panel_figure(pred, truth_img, bitmap,
                              os.path.join(figures_dir, f"panel_t{t}.png"))

    mean_bits = float(np.mean(bits_measured))
    return EvalResult(
        bits_measured=mean_bits,
        bits_estimated=float(np.mean(bits_estimated)),
        bce=float(np.mean(bce_values)),
        moda=1.0 - (fn + fp) / max(1, n_gt),
        latency_ms=mean_bits / (bandwidth_mbps * 1000.0),
        n_frames=n)


def baseline_eval(bundle: ModelBundle, dataset: Dataset, q: int, split: str = "test",
                  bandwidth_mbps: float = 1.0, moda_threshold: float = 0.5) -> EvalResult:
    """Pixel-codec transport at quality q, then the same trained inference
    (feature extraction on reconstructions, fusion prediction) at the server."""
    frame_range = split_ranges(dataset.frames)[split]
    n = len(frame_range)
    if n == 0:
        raise ValueError("empty evaluation set")
    K = bundle.cfg.devices
    fusion_spec, fusion_params = bundle.fusion()
    tau1 = bundle.cfg.tau1
    history: list[list] = []
    bits_all = []
    bce_values = []
    fn = fp = n_gt = 0
    from .autodiff import graph_forward

    for t in frame_range:
        frame_bits = 0
        feats = []
        for k in range(K):
            bits, recon = baseline_encode_frame(dataset.images[t, k], q)
            frame_bits += bits
            spec, params = bundle.extractor(k)
            z = graph_forward(spec, params, recon[None] / 255.0)
            feats.append(round_nearest(z, device_id=k, timestamp=t + 1))
        history.append(feats)
        bits_all.append(frame_bits)
        by_offset = []
        for off in range(tau1 + 1):
            j = len(history) - 1 - off
            by_offset.append(history[j] if j >= 0 else None)
        fin = build_fusion_input(by_offset, K, bundle.cfg.feat_hw)
        pred = fuse_predict(fin, fusion_spec, fusion_params)
        truth = dataset.truth[t]
        bce_values.append(bce_distortion(pred, truth))
        d_fn, d_fp, d_gt = moda_counts(pred, truth, moda_threshold)
        fn += d_fn
        fp += d_fp
        n_gt += d_gt

    mean_bits = float(np.mean(bits_all))
    return EvalResult(
        bits_measured=mean_bits, bits_estimated=mean_bits,
        bce=float(np.mean(bce_values)),
        moda=1.0 - (fn + fp) / max(1, n_gt),
        latency_ms=mean_bits / (bandwidth_mbps * 1000.0),
        n_frames=n)


# --------------------------------------------------------------------------
# sweeps

def _config_id(tau1, tau2, beta, r_bit) -> str:
    return f"t1{tau1}_t2{tau2}_b{beta:g}_r{r_bit:g}"


def _grid_points(grid: dict):
    axes = [grid.get("tau1", [1]), grid.get("tau2", [1]),
            grid.get("beta", [0.02]), grid.get("r_bit", [1500.0])]
    return list(product(*axes))


def run_sweep(grid: dict, csv_path, workdir, train_missing: bool = True,
              figures_dir=None):
    """Evaluates (and optionally trains) every grid point x seed.

    grid carries list-valued axes tau1/tau2/beta/r_bit plus scalar world and
    training keys. Checkpoints and per-seed datasets are cached in workdir;
    with train_missing=False a missing checkpoint is an error naming the
    grid point. Records come back in deterministic grid order.
    """
    os.makedirs(workdir, exist_ok=True)
    seeds = [int(s) for s in grid.get("seeds", [0])]
    bandwidth = float(grid.get("bandwidth_mbps", 1.0))
    records = []
    for (tau1, tau2, beta, r_bit) in _grid_points(grid):
        cid = _config_id(tau1, tau2, beta, r_bit)
        for seed in seeds:
            dataset = _seed_dataset(grid, seed, workdir)
            ckpt = os.path.join(workdir, f"ckpt_{cid}_s{seed}.tocp")
            if os.path.exists(ckpt):
                bundle = ModelBundle.load(ckpt)
            elif train_missing:
                cfg = _train_config(grid, tau1, tau2, beta, r_bit, seed)
                bundle = train_phase1(dataset, cfg)
                bundle = train_phase2(dataset, bundle, cfg)
                bundle.save(ckpt)
            else:
                raise FileNotFoundError(
                    f"missing checkpoint for grid point {cid} seed {seed}: {ckpt}")
            result = evaluate_run(bundle, dataset, split="test",
                                  bandwidth_mbps=bandwidth)
            records.append(RateDistortionRecord(
                config_id=cid, seed=seed, tau1=int(tau1), tau2=int(tau2),
                beta=float(beta), r_bit=float(r_bit),
                bits_measured=result.bits_measured,
                bits_estimated=result.bits_estimated,
                bce=result.bce, moda=result.moda,
                latency_ms=result.latency_ms))
    write_records_csv(csv_path, records)
    if figures_dir is not None:
        from .figures import rate_performance_figure, tau2_bits_figure
        os.makedirs(figures_dir, exist_ok=True)
        rate_performance_figure(records, os.path.join(figures_dir, "rate_moda.png"))
        tau2_bits_figure(records, os.path.join(figures_dir, "bits_by_tau2.png"))
    return records


def _seed_dataset(grid: dict, seed: int, workdir) -> Dataset:
    path = os.path.join(workdir, f"data_seed{seed}.tocd")
    if os.path.exists(path):
        return load_dataset(path)
    spec = WorldSpec(
        cameras=int(grid.get("cameras", 2)), agents=int(grid.get("agents", 3)),
        frames=int(grid.get("frames", 600)), grid=int(grid.get("grid", 12)),
        height=int(grid.get("height", 48)), width=int(grid.get("width", 48)),
        speed=float(grid.get("speed", 0.012)), jitter=float(grid.get("jitter", 0.002)),
        blob_radius=float(grid.get("blob_radius", 3.0)),
        pixel_noise=float(grid.get("pixel_noise", 40.0)), seed=seed)
    dataset = gen_dataset(spec)
    save_dataset(path, dataset)
    return dataset


def _train_config(grid: dict, tau1, tau2, beta, r_bit, seed) -> TrainConfig:
    return TrainConfig(
        beta=float(beta), r_bit=float(r_bit), tau1=int(tau1), tau2=int(tau2),
        batch_size=int(grid.get("batch_size", 8)),
        steps_phase1=int(grid.get("steps_phase1", 2000)),
        steps_phase2=int(grid.get("steps_phase2", 3000)),
        lr=float(grid.get("lr", 3e-3)), seed=int(seed))
