"""Key/value configuration documents for the CLI.

Format: one `key = value` per line; blank lines and #-comments ignored.
List-valued keys (sweep axes, seeds, weights) use commas.
"""
from __future__ import annotations

from .training import TrainConfig
from .world import WorldSpec

__all__ = ["parse_kv", "load_kv", "world_from_kv", "train_from_kv", "grid_from_kv"]

_WORLD_KEYS = {
    "cameras": int, "agents": int, "frames": int, "grid": int,
    "height": int, "width": int, "speed": float, "jitter": float,
    "blob_radius": float, "pixel_noise": float, "seed": int,
}

_TRAIN_KEYS = {
    "beta": float, "r_bit": float, "tau1": int, "tau2": int,
    "batch_size": int, "steps_phase1": int, "steps_phase2": int,
    "lr": float, "seed": int,
}

_LIST_KEYS = ("tau1", "tau2", "beta", "r_bit", "seeds", "weights")


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_kv(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def world_from_kv(kv: dict[str, str]) -> WorldSpec:
    kwargs = {}
    for key, value in kv.items():
        if key in _WORLD_KEYS:
            kwargs[key] = _WORLD_KEYS[key](value)
        else:
            raise ValueError(f"unknown world key {key!r}")
    return WorldSpec(**kwargs)


def train_from_kv(kv: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for key, value in kv.items():
        if key in _TRAIN_KEYS:
            kwargs[key] = _TRAIN_KEYS[key](value)
        elif key == "weights":
            kwargs["weights"] = tuple(float(v) for v in value.split(","))
        elif key == "data":
            continue          # dataset path, consumed by the CLI
        else:
            raise ValueError(f"unknown training key {key!r}")
    return TrainConfig(**kwargs)


def grid_from_kv(kv: dict[str, str]) -> dict:
    """Sweep grid: list axes for tau1/tau2/beta/r_bit/seeds, scalars pass
    through for the world and training keys."""
    grid: dict = {}
    for key, value in kv.items():
        if key in _LIST_KEYS:
            conv = float if key in ("beta", "r_bit", "weights") else int
            grid[key] = [conv(v) for v in value.split(",")]
        elif key == "train_missing":
            grid[key] = value.lower() in ("1", "true", "yes")
        elif key == "bandwidth_mbps":
            grid[key] = float(value)
        elif key in _WORLD_KEYS or key in _TRAIN_KEYS or key == "data":
            grid[key] = value
        else:
            raise ValueError(f"unknown grid key {key!r}")
    return grid
