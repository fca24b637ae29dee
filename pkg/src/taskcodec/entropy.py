"""Probability models over quantized features.

All three coding models (factorized prior over hyper-latents, hyperprior
conditional, temporal conditional) share one primitive: the probability of
an integer symbol under a Gaussian convolved with a unit-width uniform,
i.e. the Gaussian mass of the symbol's quantization bin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .autodiff import NetSpec, graph_forward
from .quantize import QuantizedFeature, add_uniform_noise, round_half_away

__all__ = [
    "SIGMA_MIN", "GaussianParams", "FactorizedPrior", "HyperModel", "TemporalModel",
    "bin_mass", "bin_mass_grad", "gu_pmf", "gu_bits", "rate_bits", "rate_bits_grad",
    "softplus", "softplus_inv", "sigma_from_raw", "sigma_from_raw_grad",
    "split_and_clamp", "factorized_params", "hyper_path", "temporal_params",
]

SIGMA_MIN = 0.11

# Bin masses below this floor are clamped before taking logs; the clamp also
# gates gradients to zero so rates stay finite for far-out symbols.
MASS_FLOOR = 1e-12

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class GaussianParams:
    """Per-element (mu, sigma) of the coding distribution; sigma >= SIGMA_MIN."""
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")
        if self.sigma.size and float(self.sigma.min()) < SIGMA_MIN - 1e-12:
            raise ValueError(f"sigma below floor {SIGMA_MIN}")

    @property
    def shape(self):
        return self.mu.shape


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    # inverse of log(1 + e^x); y must be positive
    return float(np.log(np.expm1(y)))


def sigma_from_raw(raw):
    """softplus then clamp at SIGMA_MIN; the scale head of every model."""
    return np.maximum(softplus(raw), SIGMA_MIN)


def sigma_from_raw_grad(raw):
    """d sigma / d raw; zero where the clamp is active."""
    sp = softplus(raw)
    return np.where(sp > SIGMA_MIN, expit(raw), 0.0)


def _phi(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def bin_mass(x, mu, sigma):
    """P(symbol bin) = Phi((x+0.5-mu)/sigma) - Phi((x-0.5-mu)/sigma).

    Evaluated at integer x this is the coding pmf; at continuous x it is the
    density proxy used with noisy relaxations. Computed from whichever tail
    is smaller so the difference never cancels catastrophically.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    upper = (x + 0.5 - mu) / sigma
    lower = (x - 0.5 - mu) / sigma
    flip = x > mu
    hi = np.where(flip, -lower, upper)
    lo = np.where(flip, -upper, lower)
    return ndtr(hi) - ndtr(lo)


def bin_mass_grad(x, mu, sigma):
    """Returns (mass, d/dx, d/dmu, d/dsigma). d/dmu is always -d/dx."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    upper = (x + 0.5 - mu) / sigma
    lower = (x - 0.5 - mu) / sigma
    mass = bin_mass(x, mu, sigma)
    pu = _phi(upper)
    pl = _phi(lower)
    d_dx = (pu - pl) / sigma
    d_dsigma = -(pu * upper - pl * lower) / sigma
    return mass, d_dx, -d_dx, d_dsigma


def gu_pmf(k, mu: float, sigma: float) -> float:
    """Probability of integer symbol k under Gaussian(mu, sigma) * U(-.5,.5)."""
    if sigma < SIGMA_MIN - 1e-12:
        raise ValueError(f"sigma {sigma} below floor {SIGMA_MIN}; clamp before calling")
    return float(bin_mass(k, mu, sigma))


def gu_bits(zhat, params: GaussianParams) -> float:
    """Estimated code length in bits: sum of -log2 pmf over all elements."""
    values = zhat.values if isinstance(zhat, QuantizedFeature) else np.asarray(zhat)
    if values.shape != params.shape:
        raise ValueError(f"feature shape {values.shape} != params shape {params.shape}")
    if values.size == 0:
        return 0.0
    mass = np.maximum(bin_mass(values, params.mu, params.sigma), MASS_FLOOR)
    return float(-np.sum(np.log2(mass)))


def gu_bits_per_element(zhat, params: GaussianParams) -> np.ndarray:
    values = zhat.values if isinstance(zhat, QuantizedFeature) else np.asarray(zhat)
    mass = np.maximum(bin_mass(values, params.mu, params.sigma), MASS_FLOOR)
    return -np.log2(mass)


def rate_bits(x, mu, sigma) -> float:
    mass = np.maximum(bin_mass(x, mu, sigma), MASS_FLOOR)
    return float(-np.sum(np.log2(mass)))


def rate_bits_grad(x, mu, sigma):
    """(bits, d/dx, d/dmu, d/dsigma) of -sum log2 mass; grads vanish at the floor."""
    mass, dx, dmu, dsigma = bin_mass_grad(x, mu, sigma)
    clamped = mass < MASS_FLOOR
    mass = np.maximum(mass, MASS_FLOOR)
    scale = np.where(clamped, 0.0, -1.0 / (mass * np.log(2.0)))
    bits = float(-np.sum(np.log2(mass)))
    return bits, scale * dx, scale * dmu, scale * dsigma


# --------------------------------------------------------------------------
# model containers

@dataclass
class FactorizedPrior:
    """Per-channel learnable location/scale for the hyper-latent code."""
    mu: np.ndarray          # (channels,)
    raw_sigma: np.ndarray   # (channels,), scale = clamp(softplus(raw))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.raw_sigma = np.asarray(self.raw_sigma, dtype=np.float64)
        if self.mu.shape != self.raw_sigma.shape or self.mu.ndim != 1:
            raise ValueError("prior needs matching 1-d mu/raw_sigma arrays")

    @property
    def channels(self) -> int:
        return self.mu.shape[0]


@dataclass
class HyperModel:
    """Hyper encoder/decoder pair plus the prior that codes the hyper-latent."""
    enc_spec: NetSpec
    enc_params: dict
    dec_spec: NetSpec
    dec_params: dict
    prior: FactorizedPrior


@dataclass
class TemporalModel:
    """Transform predicting (mu, sigma) of the current feature from history."""
    spec: NetSpec
    params: dict
    order: int              # number of conditioning features, >= 1

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("temporal model order must be >= 1")


# --------------------------------------------------------------------------
# parameter producers

def split_and_clamp(raw_out: np.ndarray) -> GaussianParams:
    """Splits a 2c-channel map into mu and clamped sigma halves."""
    c2 = raw_out.shape[0]
    if c2 % 2:
        raise ValueError(f"cannot split {c2} channels into (mu, raw_sigma)")
    c = c2 // 2
    return GaussianParams(mu=raw_out[:c], sigma=sigma_from_raw(raw_out[c:]))


def factorized_params(prior: FactorizedPrior, shape) -> GaussianParams:
    """Broadcasts per-channel (mu, sigma) over the spatial positions of shape."""
    shape = tuple(shape)
    if len(shape) != 3 or shape[0] != prior.channels:
        raise ValueError(
            f"shape {shape} incompatible with {prior.channels}-channel prior")
    reps = (1, shape[1], shape[2])
    mu = np.tile(prior.mu[:, None, None], reps)
    sigma = np.tile(sigma_from_raw(prior.raw_sigma)[:, None, None], reps)
    return GaussianParams(mu=mu, sigma=sigma)


def hyper_path(z: np.ndarray, model: HyperModel, mode: str,
               rng: np.random.Generator | None = None):
    """Runs encoder -> (noise | round) -> decoder, yielding feature params.

    mode "train" perturbs the latent with uniform noise (rng required);
    mode "infer" rounds it to integers exactly as transmitted.
    Returns (v_latent, v_coded, GaussianParams for the feature).
    """
    v = graph_forward(model.enc_spec, model.enc_params, z)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        v_coded = add_uniform_noise(v, rng)
        dec_in = v_coded
    elif mode == "infer":
        v_coded = round_half_away(v)
        dec_in = v_coded.astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    raw = graph_forward(model.dec_spec, model.dec_params, dec_in)
    return v, v_coded, split_and_clamp(raw)


def temporal_params(prev, model: TemporalModel) -> GaussianParams:
    """Conditional (mu, sigma) for the current feature given the last
    `order` quantized features, most recent first."""
    if len(prev) != model.order:
        raise ValueError(f"need {model.order} previous features, got {len(prev)}")
    planes = []
    shape0 = None
    for item in prev:
        values = item.values if isinstance(item, QuantizedFeature) else np.asarray(item)
        if shape0 is None:
            shape0 = values.shape
        elif values.shape != shape0:
            raise ValueError("history features must share one shape")
        planes.append(values.astype(np.float64))
    stacked = np.concatenate(planes, axis=0)
    raw = graph_forward(model.spec, model.params, stacked)
    return split_and_clamp(raw)
