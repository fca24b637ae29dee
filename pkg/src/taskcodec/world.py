"""Synthetic multi-camera occupancy world.

Agents drift around a unit square with reflective walls; each camera
renders them as Gaussian blobs through its own affine view map and adds
pixel noise. Ground truth marks the occupied cells of a coarse grid.
Everything is a pure function of the seed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = ["WorldSpec", "Dataset", "gen_dataset", "save_dataset", "load_dataset",
           "split_ranges", "DATASET_MAGIC"]

DATASET_MAGIC = b"TOCD"


def default_view_maps(cameras: int, height: int, width: int):
    """One invertible affine map per camera: the unit world fills the image,
    with a small per-camera rotation and translation so views overlap but
    are not identical."""
    maps = []
    scale = float(min(height, width))
    for k in range(cameras):
        centered = k - (cameras - 1) / 2.0
        angle = 0.04 * centered
        ca, sa = np.cos(angle), np.sin(angle)
        a = np.array([[ca, -sa], [sa, ca]]) * scale
        b = np.array([width / 2.0 + 3.0 * centered,
                      height / 2.0 - 2.0 * centered])
        maps.append((a, b))
    return maps


@dataclass
class WorldSpec:
    cameras: int = 2
    agents: int = 3
    frames: int = 600
    grid: int = 12
    height: int = 48
    width: int = 48
    speed: float = 0.012
    jitter: float = 0.002
    blob_radius: float = 3.0
    pixel_noise: float = 40.0
    seed: int = 0
    view_maps: list = field(default=None)

    def __post_init__(self):
        if self.cameras < 1 or self.agents < 1 or self.grid < 4:
            raise ValueError("need cameras >= 1, agents >= 1, grid >= 4")
        if self.view_maps is None:
            self.view_maps = default_view_maps(self.cameras, self.height, self.width)
        for a, _ in self.view_maps:
            if abs(np.linalg.det(a)) < 1e-9:
                raise ValueError("view maps must be invertible")


@dataclass
class Dataset:
    images: np.ndarray        # (N, K, h, w) uint8
    truth: np.ndarray         # (N, G, G) uint8 in {0, 1}
    seed: int = 0

    @property
    def frames(self) -> int:
        return self.images.shape[0]

    @property
    def cameras(self) -> int:
        return self.images.shape[1]

    @property
    def grid(self) -> int:
        return self.truth.shape[1]


def split_ranges(n: int) -> dict[str, range]:
    """Chronological train/val/test split at 2/3, 1/6, 1/6."""
    a = (2 * n) // 3
    b = (5 * n) // 6
    return {"train": range(0, a), "val": range(a, b), "test": range(b, n)}


def gen_dataset(spec: WorldSpec) -> Dataset:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    m = spec.agents
    pos = rng.uniform(0.08, 0.92, size=(m, 2))
    heading = rng.uniform(0.0, 2.0 * np.pi, size=m)
    vel = spec.speed * np.stack([np.cos(heading), np.sin(heading)], axis=1)

    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    images = np.empty((spec.frames, spec.cameras, spec.height, spec.width),
                      dtype=np.uint8)
    truth = np.zeros((spec.frames, spec.grid, spec.grid), dtype=np.uint8)
    inv_two_r2 = 1.0 / (2.0 * spec.blob_radius ** 2)

    for t in range(spec.frames):
        cells = np.clip((pos * spec.grid).astype(int), 0, spec.grid - 1)
        truth[t, cells[:, 1], cells[:, 0]] = 1
        for k, (a, b) in enumerate(spec.view_maps):
            px = (pos - 0.5) @ a.T + b
            canvas = np.full((spec.height, spec.width), 16.0)
            for j in range(m):
                d2 = (xs - px[j, 0]) ** 2 + (ys - px[j, 1]) ** 2
                canvas += 170.0 * np.exp(-d2 * inv_two_r2)
            canvas += rng.normal(0.0, spec.pixel_noise, size=canvas.shape)
            images[t, k] = np.clip(canvas, 0, 255).astype(np.uint8)
        pos = pos + vel + rng.normal(0.0, spec.jitter, size=pos.shape)
        for axis in range(2):
            over = pos[:, axis] > 1.0
            pos[over, axis] = 2.0 - pos[over, axis]
            vel[over, axis] *= -1.0
            under = pos[:, axis] < 0.0
            pos[under, axis] = -pos[under, axis]
            vel[under, axis] *= -1.0
            np.clip(pos[:, axis], 0.0, 1.0, out=pos[:, axis])
    return Dataset(images=images, truth=truth, seed=spec.seed)


# --------------------------------------------------------------------------
# on-disk form: magic, K u16, N u32, h u16, w u16, G u16, seed u64, then per
# frame K image planes and one truth plane, all raw u8

_DS_HEADER = struct.Struct("<4sHIHHHQ")


def save_dataset(path, dataset: Dataset):
    n, k, h, w = dataset.images.shape
    g = dataset.grid
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(DATASET_MAGIC, k, n, h, w, g, dataset.seed))
        for t in range(n):
            fh.write(dataset.images[t].tobytes())
            fh.write(dataset.truth[t].tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise ValueError(f"bad dataset magic {data[:4]!r}")
    magic, k, n, h, w, g, seed = _DS_HEADER.unpack_from(data)
    frame_bytes = k * h * w + g * g
    expected = _DS_HEADER.size + n * frame_bytes
    if len(data) != expected:
        raise ValueError(f"dataset length {len(data)} != expected {expected}")
    images = np.empty((n, k, h, w), dtype=np.uint8)
    truth = np.empty((n, g, g), dtype=np.uint8)
    offset = _DS_HEADER.size
    for t in range(n):
        images[t] = np.frombuffer(data, np.uint8, k * h * w, offset).reshape(k, h, w)
        offset += k * h * w
        truth[t] = np.frombuffer(data, np.uint8, g * g, offset).reshape(g, g)
        offset += g * g
    return Dataset(images=images, truth=truth, seed=seed)
