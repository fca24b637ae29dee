"""Integer-lattice rounding and its additive-uniform-noise training relaxation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["QuantizedFeature", "round_nearest", "round_half_away", "add_uniform_noise"]

INT_LO = -(2 ** 31)
INT_HI = 2 ** 31


@dataclass
class QuantizedFeature:
    """Integer feature array as produced by one device at one frame."""
    values: np.ndarray          # int64, shape matches the extractor output
    device_id: int = 0
    timestamp: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.issubdtype(self.values.dtype, np.integer):
            raise ValueError("QuantizedFeature values must be integers")
        if self.values.size and (self.values.min() < INT_LO or self.values.max() >= INT_HI):
            raise ValueError("quantized values out of 32-bit signed range")

    @property
    def shape(self):
        return self.values.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer with halves rounded away from zero (sign-symmetric)."""
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def round_nearest(z: np.ndarray, device_id: int = 0, timestamp: int = 1) -> QuantizedFeature:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("cannot round non-finite values")
    return QuantizedFeature(round_half_away(z), device_id=device_id, timestamp=timestamp)


def add_uniform_noise(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Continuous relaxation of rounding: z + U(-0.5, 0.5), i.i.d. per element.

    The noisy value lands in [z - 0.5, z + 0.5), so its density interpolates
    the rounded value's probability masses at the integers.
    """
    z = np.asarray(z, dtype=np.float64)
    return z + rng.uniform(-0.5, 0.5, size=z.shape)
