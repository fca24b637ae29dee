"""Data-oriented pixel codec used as the comparison baseline.

Uniformly quantizes pixels to q bits and range-codes them under a single
per-image Gaussian-convolved-uniform model fit by moments. The server then
runs the regular trained inference on the dequantized reconstruction, so
the comparison against feature coding is at matched machinery.
"""
from __future__ import annotations

from itertools import repeat

import numpy as np

from .entropy import SIGMA_MIN, GaussianParams
from .rangecoder import build_coding_tables, rc_decode, rc_encode

__all__ = ["baseline_encode_frame"]


def baseline_encode_frame(image: np.ndarray, q: int):
    """Returns (bits, reconstruction) for one uint8 image at quality q.

    q is the retained bit depth (1..8). Reported bits cover the coded
    pixel stream; the two-scalar model descriptor is treated like header
    side information and excluded, which favors the baseline.
    """
    if not 1 <= int(q) <= 8:
        raise ValueError("q must be in 1..8")
    q = int(q)
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("baseline expects a uint8 image")
    symbols = (image >> (8 - q)).astype(np.int64)
    step = 256.0 / (1 << q)
    recon = (symbols.astype(np.float64) + 0.5) * step

    flat = symbols.reshape(-1)
    mu = float(flat.mean())
    sigma = max(float(flat.std()), SIGMA_MIN)
    table = build_coding_tables(GaussianParams(mu=np.array([mu]),
                                               sigma=np.array([sigma])))[0]
    stream = rc_encode(flat.tolist(), repeat(table, flat.size))
    decoded = rc_decode(stream, repeat(table, flat.size), flat.size)
    if decoded != flat.tolist():
        raise RuntimeError("baseline codec lost pixels")
    return 8 * len(stream.data), recon
