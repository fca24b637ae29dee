"""Server-side prediction heads and task metrics.

Predictors are plain networks producing grid logits; the sigmoid lives here
so an all-zero head yields a uniform 0.5 occupancy grid. Fusion consumes
features from all devices over a window of past frames, channel-stacked in
(device, offset) order with one validity plane per offset so sequence
starts need no special casing.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .autodiff import NetSpec, graph_forward
from .quantize import QuantizedFeature

__all__ = [
    "PRED_EPS", "auxiliary_predict", "fuse_predict", "build_fusion_input",
    "fusion_channels", "bce_distortion", "bce_value_and_logit_grad",
    "moda_score", "write_pgm", "bits_to_bitmap",
]

PRED_EPS = 1e-7


def _as_array(feature) -> np.ndarray:
    if isinstance(feature, QuantizedFeature):
        return feature.values.astype(np.float64)
    return np.asarray(feature, dtype=np.float64)


def _stack_devices(features) -> np.ndarray:
    arrays = [_as_array(f) for f in features]
    shape0 = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape0:
            raise ValueError(f"device features disagree on shape: {a.shape} vs {shape0}")
    return np.concatenate(arrays, axis=0)


def auxiliary_predict(features, spec: NetSpec, params: dict) -> np.ndarray:
    """Occupancy probabilities from the current features of all devices."""
    logits = graph_forward(spec, params, _stack_devices(features))
    return expit(logits)


def fusion_channels(devices: int, feat_channels: int, window: int) -> int:
    """Channel count of the fusion input: window = tau1 + 1 time slots."""
    return window * devices * feat_channels + window


def build_fusion_input(features_by_offset, devices: int, spatial: tuple[int, int]):
    """Assembles the fusion tensor from per-offset device features.

    features_by_offset[off] is the list of K features at t - off, or None
    when that history slot does not exist yet; missing slots are zero-filled
    and flagged through their validity plane.
    """
    h, w = spatial
    planes = []
    window = len(features_by_offset)
    per_device = None
    for k in range(devices):
        for off in range(window):
            slot = features_by_offset[off]
            if slot is None:
                if per_device is None:
                    raise ValueError("cannot infer feature shape from an all-empty window")
                planes.append(np.zeros(per_device))
            else:
                a = _as_array(slot[k])
                if per_device is None:
                    per_device = a.shape
                elif a.shape != per_device:
                    raise ValueError(
                        f"inconsistent feature shape {a.shape} vs {per_device}")
                planes.append(a)
    for off in range(window):
        valid = 0.0 if features_by_offset[off] is None else 1.0
        planes.append(np.full((1, h, w), valid))
    return np.concatenate(planes, axis=0)


def fuse_predict(fusion_input: np.ndarray, spec: NetSpec, params: dict) -> np.ndarray:
    logits = graph_forward(spec, params, fusion_input)
    return expit(logits)


def bce_distortion(pred: np.ndarray, truth: np.ndarray) -> float:
    """Summed binary cross-entropy over grid cells, in nats."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p = np.clip(pred, PRED_EPS, 1.0 - PRED_EPS)
    return float(-np.sum(truth * np.log(p) + (1.0 - truth) * np.log1p(-p)))


def bce_value_and_logit_grad(logits: np.ndarray, truth: np.ndarray):
    """BCE of clamped sigmoid(logits) plus its exact gradient w.r.t. logits.

    Where the clamp saturates, the value is constant in the logit, so the
    gradient there is exactly zero.
    """
    p = expit(logits)
    inside = (p >= PRED_EPS) & (p <= 1.0 - PRED_EPS)
    value = bce_distortion(p, truth)
    grad = np.where(inside, p - truth, 0.0)
    return value, grad


def moda_score(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """1 - (misses + false positives) / ground-truth count, exact cell match."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth) > 0.5
    detections = pred >= threshold
    fn = int(np.sum(truth & ~detections))
    fp = int(np.sum(~truth & detections))
    n_gt = int(np.sum(truth))
    return 1.0 - (fn + fp) / max(1, n_gt)


def moda_counts(pred, truth, threshold: float = 0.5):
    """(misses, false positives, ground-truth count) for sequence-level MODA."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth) > 0.5
    detections = pred >= threshold
    return (int(np.sum(truth & ~detections)),
            int(np.sum(~truth & detections)),
            int(np.sum(truth)))


# --------------------------------------------------------------------------
# qualitative dumps

def write_pgm(path, image: np.ndarray):
    """Binary (P5) grayscale dump of a 2-d uint8 array."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM dump needs a 2-d array")
    img = np.clip(img, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def bits_to_bitmap(per_element_bits: np.ndarray) -> np.ndarray:
    """Collapses a (c, h, w) per-element bit map to a uint8 (h, w) image,
    normalized so the busiest location is white."""
    summed = np.asarray(per_element_bits, dtype=np.float64).sum(axis=0)
    top = float(summed.max())
    if top <= 0:
        return np.zeros(summed.shape, dtype=np.uint8)
    return np.round(255.0 * summed / top).astype(np.uint8)
