"""Model bundle: every network in the system plus one flat parameter store.

Sections are name-prefixed in the store (extractor0/, hyper_enc0/, prior0/,
temporal0/, aux_0/, fusion/, ...) and serialize through the checkpoint
format with a handful of meta scalars so a bundle can be rebuilt from the
file alone.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (Conv2d, Dense, LeakyRelu, NetSpec, Reshape,
                       init_params, load_params, save_params)
from .entropy import FactorizedPrior, HyperModel, TemporalModel, softplus_inv
from .inference import fusion_channels

__all__ = ["BundleConfig", "ModelBundle", "build_bundle", "rebuild_fusion"]

HIDDEN = 16


@dataclass(frozen=True)
class BundleConfig:
    devices: int = 2
    image_hw: tuple[int, int] = (48, 48)
    feat_channels: int = 8
    hyper_channels: int = 4
    grid: int = 12
    tau1: int = 1
    tau2: int = 1

    def __post_init__(self):
        if self.devices < 1 or self.grid < 2:
            raise ValueError("need at least one device and a 2x2 grid")
        if self.tau1 < 0 or self.tau2 < 0:
            raise ValueError("history lengths cannot be negative")
        if self.feat_hw != (self.grid, self.grid):
            raise ValueError(
                f"prediction heads are convolutional: the feature map "
                f"{self.feat_hw} must match the occupancy grid "
                f"({self.grid}, {self.grid}); use image_hw = 4 * grid")

    @property
    def feat_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // 4, self.image_hw[1] // 4)


def _extractor_spec(cfg: BundleConfig) -> NetSpec:
    c = cfg.feat_channels
    return NetSpec((1,) + cfg.image_hw, (
        Conv2d(1, c, 3, stride=2, padding=1), LeakyRelu(),
        Conv2d(c, c, 3, stride=2, padding=1), LeakyRelu(),
        Conv2d(c, c, 3, stride=1, padding=1),
    ))


def _hyper_enc_spec(cfg: BundleConfig) -> NetSpec:
    c, hc = cfg.feat_channels, cfg.hyper_channels
    fh, fw = cfg.feat_hw
    return NetSpec((c, fh, fw), (
        Conv2d(c, c, 3, stride=1, padding=1), LeakyRelu(),
        Conv2d(c, hc, 3, stride=2, padding=1),
    ))


def _hyper_dec_spec(cfg: BundleConfig) -> NetSpec:
    c, hc = cfg.feat_channels, cfg.hyper_channels
    fh, fw = cfg.feat_hw
    hh, hw = (fh + 1) // 2, (fw + 1) // 2
    flat_in = hc * hh * hw
    flat_out = 2 * c * fh * fw
    return NetSpec((hc, hh, hw), (
        Reshape((flat_in,)),
        Dense(flat_in, 128), LeakyRelu(),
        Dense(128, flat_out),
        Reshape((2 * c, fh, fw)),
    ))


def _temporal_spec(cfg: BundleConfig) -> NetSpec:
    c = cfg.feat_channels
    fh, fw = cfg.feat_hw
    return NetSpec((cfg.tau2 * c, fh, fw), (
        Conv2d(cfg.tau2 * c, HIDDEN, 3, stride=1, padding=1), LeakyRelu(),
        Conv2d(HIDDEN, 2 * c, 3, stride=1, padding=1),
    ))


def _predictor_spec(cfg: BundleConfig, in_channels: int) -> NetSpec:
    # fully convolutional: the feature lattice is aligned with the grid, so
    # localization generalizes across positions instead of being memorized
    fh, fw = cfg.feat_hw
    return NetSpec((in_channels, fh, fw), (
        Conv2d(in_channels, HIDDEN, 3, stride=1, padding=1), LeakyRelu(),
        Conv2d(HIDDEN, HIDDEN, 3, stride=1, padding=1), LeakyRelu(),
        Conv2d(HIDDEN, 1, 3, stride=1, padding=1),
        Reshape((cfg.grid, cfg.grid)),
    ))


def _aux_spec(cfg: BundleConfig) -> NetSpec:
    return _predictor_spec(cfg, cfg.devices * cfg.feat_channels)


def _fusion_spec(cfg: BundleConfig) -> NetSpec:
    channels = fusion_channels(cfg.devices, cfg.feat_channels, cfg.tau1 + 1)
    return _predictor_spec(cfg, channels)


def _zero_scale_head(params: dict, spec: NetSpec, mu_units: int):
    """Zeroes the final dense layer and biases the scale half at sigma = 1."""
    idx = max(i for i, _ in enumerate(spec.layers)
              if isinstance(spec.layers[i], (Dense, Conv2d)))
    params[f"{idx}.w"] = np.zeros_like(params[f"{idx}.w"])
    bias = params[f"{idx}.b"]
    bias[:] = 0.0
    bias[mu_units:] = softplus_inv(1.0)


def _zero_head(params: dict, spec: NetSpec):
    idx = max(i for i, _ in enumerate(spec.layers)
              if isinstance(spec.layers[i], (Dense, Conv2d)))
    params[f"{idx}.w"] = np.zeros_like(params[f"{idx}.w"])
    params[f"{idx}.b"] = np.zeros_like(params[f"{idx}.b"])


@dataclass
class ModelBundle:
    cfg: BundleConfig
    params: dict[str, np.ndarray]

    def section(self, name: str) -> dict[str, np.ndarray]:
        prefix = name + "/"
        sub = {k[len(prefix):]: v for k, v in self.params.items()
               if k.startswith(prefix)}
        if not sub:
            raise KeyError(f"no parameters under section {name!r}")
        return sub

    def set_section(self, name: str, sub: dict[str, np.ndarray]):
        for key, value in sub.items():
            self.params[f"{name}/{key}"] = value

    # ---- typed views -------------------------------------------------
    def extractor(self, k: int):
        return _extractor_spec(self.cfg), self.section(f"extractor{k}")

    def hyper(self, k: int) -> HyperModel:
        prior_sec = self.section(f"prior{k}")
        return HyperModel(
            enc_spec=_hyper_enc_spec(self.cfg), enc_params=self.section(f"hyper_enc{k}"),
            dec_spec=_hyper_dec_spec(self.cfg), dec_params=self.section(f"hyper_dec{k}"),
            prior=FactorizedPrior(mu=prior_sec["mu"], raw_sigma=prior_sec["raw_sigma"]))

    def temporal(self, k: int) -> TemporalModel | None:
        if self.cfg.tau2 < 1:
            return None
        return TemporalModel(spec=_temporal_spec(self.cfg),
                             params=self.section(f"temporal{k}"),
                             order=self.cfg.tau2)

    def aux(self, tau: int):
        return _aux_spec(self.cfg), self.section(f"aux_{tau}")

    def fusion(self):
        return _fusion_spec(self.cfg), self.section("fusion")

    # ---- persistence --------------------------------------------------
    def save(self, path):
        meta = {
            "meta/devices": np.float64(self.cfg.devices),
            "meta/image_h": np.float64(self.cfg.image_hw[0]),
            "meta/image_w": np.float64(self.cfg.image_hw[1]),
            "meta/feat_channels": np.float64(self.cfg.feat_channels),
            "meta/hyper_channels": np.float64(self.cfg.hyper_channels),
            "meta/grid": np.float64(self.cfg.grid),
            "meta/tau1": np.float64(self.cfg.tau1),
            "meta/tau2": np.float64(self.cfg.tau2),
        }
        save_params(path, {**meta, **self.params})

    @classmethod
    def load(cls, path) -> "ModelBundle":
        raw = load_params(path)
        get = lambda key: int(raw.pop(key))
        cfg = BundleConfig(
            devices=get("meta/devices"),
            image_hw=(get("meta/image_h"), get("meta/image_w")),
            feat_channels=get("meta/feat_channels"),
            hyper_channels=get("meta/hyper_channels"),
            grid=get("meta/grid"),
            tau1=get("meta/tau1"),
            tau2=get("meta/tau2"),
        )
        return cls(cfg=cfg, params=raw)

    def copy(self) -> "ModelBundle":
        return ModelBundle(cfg=self.cfg,
                           params={k: v.copy() for k, v in self.params.items()})


def build_bundle(cfg: BundleConfig, seed: int) -> ModelBundle:
    """Initializes every network deterministically from the seed.

    Scale heads (hyper decoder, temporal transform) start at mu=0, sigma=1;
    prediction heads start at uniform 0.5; the extractor's final layer is
    shrunk so features begin near the lattice origin.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}

    def add(section, spec, head=None, mu_units=None):
        sub = init_params(spec, rng)
        if head == "scale":
            _zero_scale_head(sub, spec, mu_units)
        elif head == "zero":
            _zero_head(sub, spec)
        for key, value in sub.items():
            params[f"{section}/{key}"] = value
        return spec

    for k in range(cfg.devices):
        ex = add(f"extractor{k}", _extractor_spec(cfg))
        last = max(i for i, l in enumerate(ex.layers) if isinstance(l, Conv2d))
        params[f"extractor{k}/{last}.w"] *= 0.2
        add(f"hyper_enc{k}", _hyper_enc_spec(cfg))
        dec = _hyper_dec_spec(cfg)
        c = cfg.feat_channels
        fh, fw = cfg.feat_hw
        add(f"hyper_dec{k}", dec, head="scale", mu_units=c * fh * fw)
        params[f"prior{k}/mu"] = np.zeros(cfg.hyper_channels)
        params[f"prior{k}/raw_sigma"] = np.full(cfg.hyper_channels, softplus_inv(1.0))
        if cfg.tau2 >= 1:
            add(f"temporal{k}", _temporal_spec(cfg), head="scale", mu_units=c)
    for tau in range(cfg.tau1 + 1):
        add(f"aux_{tau}", _aux_spec(cfg), head="zero")
    add("fusion", _fusion_spec(cfg), head="zero")
    return ModelBundle(cfg=cfg, params=params)


def rebuild_fusion(bundle: ModelBundle, tau1: int, seed: int = 0) -> ModelBundle:
    """New bundle sharing all coding parameters but with a fresh fusion head
    sized for a different fusion window (rate side stays bit-identical)."""
    cfg = replace(bundle.cfg, tau1=tau1)
    rng = np.random.Generator(np.random.PCG64(seed))
    out = ModelBundle(cfg=cfg, params={})
    for key, value in bundle.params.items():
        section = key.split("/")[0]
        if section == "fusion" or (section.startswith("aux_")
                                   and int(section[4:]) > tau1):
            continue
        out.params[key] = value.copy()
    spec = _fusion_spec(cfg)
    sub = init_params(spec, rng)
    _zero_head(sub, spec)
    out.set_section("fusion", sub)
    return out
