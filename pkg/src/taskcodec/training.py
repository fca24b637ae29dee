"""Training losses and the two-phase optimization schedule.

Phase 1 jointly trains the feature extractors, hierarchical entropy models,
and auxiliary predictors on a distortion-plus-gated-rate objective. Phase 2
freezes those and trains, independently, the temporal entropy models (one
per device, by conditional code length) and the fusion head (by prediction
distortion on hard-quantized features).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import OptState, adam_step, backward_trace, forward_trace, graph_forward
from .entropy import rate_bits_grad, sigma_from_raw, sigma_from_raw_grad
from .inference import bce_value_and_logit_grad
from .models import BundleConfig, ModelBundle, build_bundle
from .quantize import round_half_away
from .world import Dataset, split_ranges

__all__ = [
    "TrainConfig", "LossReport", "TrainingDiverged",
    "loss_L1", "loss_L2", "loss_L3", "train_phase1", "train_phase2",
    "verify_variational_bound", "entropy_bits", "joint_entropy_bits",
    "marginal_entropy_bits", "TRAIN_LOG_COLUMNS",
]

TRAIN_LOG_COLUMNS = ["step", "phase", "loss_total", "distortion_nats",
                     "rate_bits", "lr", "seed"]


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.02
    r_bit: float = 1500.0       # bits; rate below this floor exerts no pressure
    tau1: int = 1
    tau2: int = 1
    weights: tuple = None       # per-offset distortion weights, default all 1
    batch_size: int = 8
    steps_phase1: int = 2000
    steps_phase2: int = 3000
    lr: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0 or self.r_bit < 0:
            raise ValueError("beta and r_bit must be non-negative")
        if self.tau1 < 0 or self.tau2 < 0:
            raise ValueError("tau1/tau2 must be non-negative")
        if self.weights is None:
            object.__setattr__(self, "weights", (1.0,) * (self.tau1 + 1))
        weights = tuple(float(w) for w in self.weights)
        if len(weights) != self.tau1 + 1 or any(w <= 0 for w in weights):
            raise ValueError(f"need {self.tau1 + 1} positive weights, got {weights}")
        object.__setattr__(self, "weights", weights)
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size must be >= 1 and lr positive")


@dataclass
class LossReport:
    distortion_nats: float
    rate_bits_estimated: float
    rate_term_after_max: float
    total: float


class TrainingDiverged(RuntimeError):
    """Raised on NaN; carries the last finite checkpoint."""

    def __init__(self, message, bundle=None):
        super().__init__(message)
        self.bundle = bundle


def _accumulate(flat: dict, section: str, grads: dict):
    for key, value in grads.items():
        name = f"{section}/{key}"
        if name in flat:
            flat[name] = flat[name] + value
        else:
            flat[name] = value


# --------------------------------------------------------------------------
# phase-1 loss

def loss_L1(frames: np.ndarray, targets: np.ndarray, bundle: ModelBundle,
            cfg: TrainConfig, rng: np.random.Generator):
    """Distortion plus gated rate on a minibatch.

    frames: (B, K, 1, h, w) in [0, 1]; targets: (B, tau1+1, G, G) in {0, 1}.
    Rate uses noisy relaxations of both the feature and the hyper-latent;
    distortion feeds the same noisy features to every auxiliary predictor.
    The rate term enters as beta * max(batch-mean bits, r_bit): below the
    floor no gradient reaches any entropy-model parameter.
    """
    B, K = frames.shape[0], frames.shape[1]
    c = bundle.cfg.feat_channels
    if K != bundle.cfg.devices:
        raise ValueError(f"batch carries {K} devices, bundle has {bundle.cfg.devices}")

    per_device = []
    rate_sum = 0.0
    for k in range(K):
        ex_spec, ex_params = bundle.extractor(k)
        hyper = bundle.hyper(k)
        acts_ex, _ = forward_trace(ex_spec, ex_params, frames[:, k])
        z = acts_ex[-1]
        z_tilde = z + rng.uniform(-0.5, 0.5, size=z.shape)
        acts_enc, _ = forward_trace(hyper.enc_spec, hyper.enc_params, z)
        v = acts_enc[-1]
        v_tilde = v + rng.uniform(-0.5, 0.5, size=v.shape)
        acts_dec, _ = forward_trace(hyper.dec_spec, hyper.dec_params, v_tilde)
        raw = acts_dec[-1]
        mu, raw_sigma = raw[:, :c], raw[:, c:]
        sigma = sigma_from_raw(raw_sigma)
        bits_z, dzt, dmu, dsig = rate_bits_grad(z_tilde, mu, sigma)

        prior = hyper.prior
        p_mu = prior.mu[None, :, None, None]
        p_sigma = sigma_from_raw(prior.raw_sigma)[None, :, None, None]
        bits_v, dvt, dpmu, dpsig = rate_bits_grad(v_tilde, p_mu, p_sigma)

        rate_sum += bits_z + bits_v
        per_device.append(dict(
            ex_spec=ex_spec, ex_params=ex_params, hyper=hyper,
            acts_ex=acts_ex, acts_enc=acts_enc, acts_dec=acts_dec,
            z_tilde=z_tilde, raw_sigma=raw_sigma,
            dzt=dzt, dmu=dmu, dsig=dsig, dvt=dvt, dpmu=dpmu, dpsig=dpsig))

    rate_mean = rate_sum / B

    # distortion across auxiliary predictors on the noisy features
    fused = np.concatenate([d["z_tilde"] for d in per_device], axis=1)
    grads: dict[str, np.ndarray] = {}
    d_fused = np.zeros_like(fused)
    distortion = 0.0
    for tau in range(cfg.tau1 + 1):
        spec, params = bundle.aux(tau)
        acts, _ = forward_trace(spec, params, fused)
        value, dlogits = bce_value_and_logit_grad(acts[-1], targets[:, tau])
        distortion += cfg.weights[tau] * value / B
        pg, din = backward_trace(spec, params, acts, dlogits * (cfg.weights[tau] / B))
        _accumulate(grads, f"aux_{tau}", pg)
        d_fused += din

    gated = rate_mean <= cfg.r_bit
    rscale = 0.0 if gated else cfg.beta / B

    for k, dev in enumerate(per_device):
        d_zt = d_fused[:, k * c:(k + 1) * c].copy()
        if rscale:
            d_zt += rscale * dev["dzt"]
            d_raw = np.concatenate(
                [rscale * dev["dmu"],
                 rscale * dev["dsig"] * sigma_from_raw_grad(dev["raw_sigma"])], axis=1)
            hyper = dev["hyper"]
            pg_dec, d_vt = backward_trace(hyper.dec_spec, hyper.dec_params,
                                          dev["acts_dec"], d_raw)
            _accumulate(grads, f"hyper_dec{k}", pg_dec)
            d_vt = d_vt + rscale * dev["dvt"]
            pg_enc, d_z_enc = backward_trace(hyper.enc_spec, hyper.enc_params,
                                             dev["acts_enc"], d_vt)
            _accumulate(grads, f"hyper_enc{k}", pg_enc)
            _accumulate(grads, f"prior{k}", {
                "mu": rscale * dev["dpmu"].sum(axis=(0, 2, 3)),
                "raw_sigma": rscale * dev["dpsig"].sum(axis=(0, 2, 3))
                * sigma_from_raw_grad(dev["hyper"].prior.raw_sigma)})
            d_z = d_zt + d_z_enc
        else:
            d_z = d_zt
        pg_ex, _ = backward_trace(dev["ex_spec"], dev["ex_params"], dev["acts_ex"], d_z)
        _accumulate(grads, f"extractor{k}", pg_ex)

    rate_term = max(rate_mean, cfg.r_bit)
    total = distortion + cfg.beta * rate_term
    report = LossReport(distortion_nats=distortion,
                        rate_bits_estimated=rate_mean,
                        rate_term_after_max=rate_term,
                        total=total)
    return report, grads


# --------------------------------------------------------------------------
# phase-2 losses

def loss_L2(histories: np.ndarray, currents: np.ndarray, temporal):
    """Mean conditional code length (bits) of hard-quantized features given
    the channel-stacked history, plus gradients for the transform only."""
    B = histories.shape[0]
    if histories.shape[1:] != temporal.spec.input_shape:
        raise ValueError(
            f"history shape {histories.shape[1:]} does not match "
            f"temporal input {temporal.spec.input_shape} (wrong history length?)")
    c = currents.shape[1]
    acts, _ = forward_trace(temporal.spec, temporal.params, histories)
    raw = acts[-1]
    mu, raw_sigma = raw[:, :c], raw[:, c:]
    sigma = sigma_from_raw(raw_sigma)
    bits, _, dmu, dsig = rate_bits_grad(currents.astype(np.float64), mu, sigma)
    d_raw = np.concatenate([dmu, dsig * sigma_from_raw_grad(raw_sigma)], axis=1) / B
    grads, _ = backward_trace(temporal.spec, temporal.params, acts, d_raw)
    return bits / B, grads


def loss_L3(fusion_inputs: np.ndarray, targets: np.ndarray, spec, params):
    """Mean fusion BCE (nats) on hard features, gradients for the head only."""
    B = fusion_inputs.shape[0]
    acts, _ = forward_trace(spec, params, fusion_inputs)
    if acts[-1].shape[1:] != targets.shape[1:]:
        raise ValueError(f"prediction {acts[-1].shape[1:]} vs target {targets.shape[1:]}")
    value, dlogits = bce_value_and_logit_grad(acts[-1], targets)
    grads, _ = backward_trace(spec, params, acts, dlogits / B)
    return value / B, grads


# --------------------------------------------------------------------------
# orchestration

def _frames_targets(dataset: Dataset, idx: np.ndarray, tau1: int):
    frames = dataset.images[idx].astype(np.float64)[:, :, None] / 255.0
    targets = np.stack([dataset.truth[idx + tau] for tau in range(tau1 + 1)],
                       axis=1).astype(np.float64)
    return frames, targets


PHASE1_SECTIONS = ("extractor", "hyper_enc", "hyper_dec", "prior", "aux_")


def _phase1_names(bundle: ModelBundle):
    return [name for name in bundle.params
            if name.startswith(PHASE1_SECTIONS)]


def train_phase1(dataset: Dataset, cfg: TrainConfig, bundle: ModelBundle | None = None,
                 log_path=None) -> ModelBundle:
    """Trains extractors, hierarchical entropy models, and auxiliary
    predictors for a fixed step budget; deterministic given the seed."""
    if bundle is None:
        bundle = build_bundle(BundleConfig(
            devices=dataset.images.shape[1],
            image_hw=dataset.images.shape[2:4],
            grid=dataset.truth.shape[1],
            tau1=cfg.tau1, tau2=cfg.tau2), seed=cfg.seed)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    train = split_ranges(dataset.frames)["train"]
    hi = train.stop - cfg.tau1
    if hi <= train.start:
        raise ValueError("training slice too short for the requested tau1")

    names = _phase1_names(bundle)
    opt = OptState.for_params({n: bundle.params[n] for n in names}, lr=cfg.lr)
    rows = []
    last_good = bundle.copy()
    for step in range(cfg.steps_phase1):
        idx = rng.integers(train.start, hi, size=cfg.batch_size)
        frames, targets = _frames_targets(dataset, idx, cfg.tau1)
        report, grads = loss_L1(frames, targets, bundle, cfg, rng)
        if not np.isfinite(report.total):
            _write_log(log_path, rows)
            raise TrainingDiverged(f"non-finite loss at step {step}", bundle=last_good)
        sub = {n: bundle.params[n] for n in names}
        sub, opt = adam_step(sub, {n: grads.get(n, np.zeros_like(sub[n])) for n in names}, opt)
        bundle.params.update(sub)
        rows.append([step, 1, report.total, report.distortion_nats,
                     report.rate_bits_estimated, cfg.lr, cfg.seed])
        if step % 100 == 0:
            last_good = bundle.copy()
    _write_log(log_path, rows)
    return bundle


def hard_features(dataset: Dataset, bundle: ModelBundle, frame_range) -> np.ndarray:
    """Hard-quantized features for every frame/device in range, shaped
    (n, K, c, fh, fw) int64; extractor runs frozen."""
    idx = np.arange(frame_range.start, frame_range.stop)
    feats = []
    for k in range(bundle.cfg.devices):
        spec, params = bundle.extractor(k)
        z = graph_forward(spec, params,
                          dataset.images[idx, k].astype(np.float64)[:, None] / 255.0)
        feats.append(round_half_away(z))
    return np.stack(feats, axis=1)


def _fusion_batch(feats: np.ndarray, truth: np.ndarray, idx: np.ndarray, tau1: int):
    """Batched fusion inputs with zero-fill and validity planes for t < tau."""
    n, K, c, fh, fw = feats.shape
    B = idx.shape[0]
    planes = np.zeros((B, (tau1 + 1) * K * c + (tau1 + 1), fh, fw))
    col = 0
    for k in range(K):
        for off in range(tau1 + 1):
            ok = idx - off >= 0
            planes[ok, col:col + c] = feats[idx[ok] - off, k]
            col += c
    for off in range(tau1 + 1):
        planes[idx - off >= 0, col] = 1.0
        col += 1
    return planes, truth[idx].astype(np.float64)


def train_phase2(dataset: Dataset, bundle: ModelBundle, cfg: TrainConfig,
                 log_path=None, train_temporal: bool = True,
                 train_fusion: bool = True) -> ModelBundle:
    """Trains temporal entropy models and the fusion head on hard features
    from the frozen phase-1 extractor. Extractor, hyper, prior, and
    auxiliary parameters are not touched."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    train = split_ranges(dataset.frames)["train"]
    feats = hard_features(dataset, bundle, train)
    truth = dataset.truth[train.start:train.stop]
    n = feats.shape[0]
    K = bundle.cfg.devices
    c = bundle.cfg.feat_channels

    do_temporal = train_temporal and bundle.cfg.tau2 >= 1
    opts_t = {}
    if do_temporal:
        for k in range(K):
            sec = bundle.section(f"temporal{k}")
            opts_t[k] = OptState.for_params(sec, lr=cfg.lr)
    spec_f, _ = bundle.fusion()
    if train_fusion:
        opt_f = OptState.for_params(bundle.section("fusion"), lr=cfg.lr)

    rows = []
    for step in range(cfg.steps_phase2):
        bits_step = 0.0
        if do_temporal:
            for k in range(K):
                idx = rng.integers(cfg.tau2, n, size=cfg.batch_size)
                hist = np.concatenate(
                    [feats[idx - 1 - d, k] for d in range(cfg.tau2)], axis=1)
                temporal = bundle.temporal(k)
                bits, grads = loss_L2(hist.astype(np.float64), feats[idx, k], temporal)
                if not np.isfinite(bits):
                    _write_log(log_path, rows)
                    raise TrainingDiverged(f"non-finite code length at step {step}",
                                           bundle=bundle)
                sec, opts_t[k] = adam_step(bundle.section(f"temporal{k}"), grads, opts_t[k])
                bundle.set_section(f"temporal{k}", sec)
                bits_step += bits
        nats = 0.0
        if train_fusion:
            idx = rng.integers(0, n, size=cfg.batch_size)
            fin, y = _fusion_batch(feats, truth, idx, bundle.cfg.tau1)
            nats, grads = loss_L3(fin, y, spec_f, bundle.section("fusion"))
            if not np.isfinite(nats):
                _write_log(log_path, rows)
                raise TrainingDiverged(f"non-finite fusion loss at step {step}",
                                       bundle=bundle)
            sec, opt_f = adam_step(bundle.section("fusion"), grads, opt_f)
            bundle.set_section("fusion", sec)
        rows.append([step, 2, nats + bits_step, nats, bits_step, cfg.lr, cfg.seed])
    _write_log(log_path, rows)
    return bundle


def _write_log(log_path, rows):
    # appends so both phases share one file; header written once
    if log_path is None:
        return
    fresh = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(TRAIN_LOG_COLUMNS)
        writer.writerows(rows)


# --------------------------------------------------------------------------
# exact bound verification on enumerable distributions

def entropy_bits(pmf: np.ndarray) -> float:
    p = np.asarray(pmf, dtype=np.float64).reshape(-1)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def joint_entropy_bits(joint: np.ndarray) -> float:
    return entropy_bits(joint)


def marginal_entropy_bits(joint: np.ndarray, axis: int) -> float:
    return entropy_bits(np.asarray(joint, dtype=np.float64).sum(axis=axis))


def verify_variational_bound(joint: np.ndarray, q: np.ndarray):
    """Exact cross-entropy vs conditional entropy on a finite joint pmf.

    joint[y, z] is the true distribution; q[y, z] the candidate conditional
    of y given z (each column normalized). Returns (cross_entropy_bits,
    conditional_entropy_bits, gap); the gap is the average KL divergence and
    can only be negative through floating-point noise.
    """
    joint = np.asarray(joint, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if joint.ndim != 2 or joint.shape != q.shape:
        raise ValueError("joint and q must be matching 2-d arrays")
    if joint.shape[0] > 16 or joint.shape[1] > 16:
        raise ValueError("enumeration limited to 16x16 alphabets")
    if abs(float(joint.sum()) - 1.0) > 1e-12 or np.any(joint < 0):
        raise ValueError("joint pmf must be non-negative and sum to 1 within 1e-12")
    marg = joint.sum(axis=0)
    colsum = q.sum(axis=0)
    if np.any(np.abs(colsum - 1.0) > 1e-12) or np.any(q < 0):
        raise ValueError("candidate conditional columns must each sum to 1 within 1e-12")

    mask = joint > 0
    with np.errstate(divide="ignore"):
        cross = float(-np.sum(joint[mask] * np.log2(q[mask])))
        cond_tbl = joint / np.where(marg > 0, marg, 1.0)[None, :]
        cond = float(-np.sum(joint[mask] * np.log2(cond_tbl[mask])))
    return cross, cond, cross - cond
