"""Minimal deterministic differentiable-computation kernel.

Dense/conv2d networks with pointwise nonlinearities, exact analytic
backward passes, a bias-corrected Adam update, and a binary checkpoint
format. Everything runs in float64 on numpy so repeated runs on one
platform produce bit-identical results.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

__all__ = [
    "Dense", "Conv2d", "Relu", "LeakyRelu", "Softplus", "Reshape",
    "NetSpec", "OptState", "init_params", "graph_forward", "graph_backward",
    "forward_trace", "backward_trace", "gradient_check", "adam_step",
    "save_params", "load_params", "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"TOCP"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# layer descriptors

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class LeakyRelu:
    slope: float = 0.1


@dataclass(frozen=True)
class Softplus:
    pass


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]


def _layer_output_shape(layer, in_shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    name = type(layer).__name__
    if isinstance(layer, Dense):
        if in_shape != (layer.in_features,):
            raise ValueError(
                f"layer {index} (dense): expected input shape ({layer.in_features},), got {in_shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(in_shape) != 3 or in_shape[0] != layer.in_channels:
            raise ValueError(
                f"layer {index} (conv2d): expected input (c={layer.in_channels}, h, w), got {in_shape}")
        _, h, w = in_shape
        k, s, p = layer.kernel, layer.stride, layer.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"layer {index} (conv2d): kernel {k} does not fit input {in_shape}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, Reshape):
        if int(np.prod(in_shape)) != int(np.prod(layer.shape)):
            raise ValueError(
                f"layer {index} (reshape): cannot reshape {in_shape} to {layer.shape}")
        return tuple(layer.shape)
    if isinstance(layer, (Relu, LeakyRelu, Softplus)):
        return in_shape
    raise ValueError(f"layer {index}: unknown layer kind {name!r}")


@dataclass(frozen=True)
class NetSpec:
    """Ordered layer stack with a declared input shape.

    Shapes are validated at construction so that consecutive layers compose.
    """
    input_shape: tuple[int, ...]
    layers: tuple
    shapes: tuple = field(init=False)

    def __post_init__(self):
        if len(self.layers) == 0:
            raise ValueError("NetSpec needs at least one layer")
        shapes = [tuple(self.input_shape)]
        for i, layer in enumerate(self.layers):
            shapes.append(_layer_output_shape(layer, shapes[-1], i))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]


def _param_names(spec: NetSpec):
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Dense, Conv2d)):
            yield i, layer


def init_params(spec: NetSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-style init for weights, zero biases, in deterministic layer order."""
    params: dict[str, np.ndarray] = {}
    for i, layer in _param_names(spec):
        if isinstance(layer, Dense):
            fan_in = layer.in_features
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.out_features, layer.in_features))
            b = np.zeros(layer.out_features)
        else:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
            b = np.zeros(layer.out_channels)
        params[f"{i}.w"] = w
        params[f"{i}.b"] = b
    return params


def _check_params(spec: NetSpec, params: dict[str, np.ndarray]):
    for i, layer in _param_names(spec):
        for suffix in ("w", "b"):
            if f"{i}.{suffix}" not in params:
                raise ValueError(f"layer {i}: missing parameter {i}.{suffix}")


# --------------------------------------------------------------------------
# forward / backward
#
# The canonical internal layout carries a leading batch axis; a plain input
# matching the declared shape is promoted to a batch of one.

def _im2col(x: np.ndarray, k: int, s: int, p: int):
    # x: (B, C, H, W) -> cols (B, C*k*k, oh*ow)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    b, c, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s, :, :]                        # (B, C, oh, ow, k, k)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, in_shape, k: int, s: int, p: int, oh: int, ow: int):
    # cols: (B, C*k*k, oh*ow) scattered back onto the padded input
    b, c, h, w = in_shape
    grad = np.zeros((b, c, h + 2 * p, w + 2 * p))
    cols = cols.reshape(b, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            grad[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += cols[:, :, ki, kj]
    if p:
        grad = grad[:, :, p:-p, p:-p]
    return grad


def _layer_forward(layer, params, i, x):
    if isinstance(layer, Dense):
        return x @ params[f"{i}.w"].T + params[f"{i}.b"]
    if isinstance(layer, Conv2d):
        k, s, p = layer.kernel, layer.stride, layer.padding
        cols, oh, ow = _im2col(x, k, s, p)
        w = params[f"{i}.w"].reshape(layer.out_channels, -1)
        out = np.matmul(w[None], cols) + params[f"{i}.b"][None, :, None]
        return out.reshape(x.shape[0], layer.out_channels, oh, ow)
    if isinstance(layer, Relu):
        return np.maximum(x, 0.0)
    if isinstance(layer, LeakyRelu):
        return np.where(x > 0, x, layer.slope * x)
    if isinstance(layer, Softplus):
        return np.logaddexp(0.0, x)
    if isinstance(layer, Reshape):
        return x.reshape((x.shape[0],) + tuple(layer.shape))
    raise ValueError(f"layer {i}: unknown layer kind")


def _layer_backward(layer, params, i, x, g):
    """Returns (param_grads, input_grad) for one layer given upstream grad g."""
    if isinstance(layer, Dense):
        gw = g.T @ x                       # (out, in) summed over batch
        gb = g.sum(axis=0)
        gx = g @ params[f"{i}.w"]
        return {f"{i}.w": gw, f"{i}.b": gb}, gx
    if isinstance(layer, Conv2d):
        k, s, p = layer.kernel, layer.stride, layer.padding
        cols, oh, ow = _im2col(x, k, s, p)
        gmat = g.reshape(g.shape[0], layer.out_channels, oh * ow)
        w = params[f"{i}.w"].reshape(layer.out_channels, -1)
        gw = np.einsum("bol,bcl->oc", gmat, cols).reshape(params[f"{i}.w"].shape)
        gb = gmat.sum(axis=(0, 2))
        gcols = np.matmul(w.T[None], gmat)
        gx = _col2im(gcols, x.shape, k, s, p, oh, ow)
        return {f"{i}.w": gw, f"{i}.b": gb}, gx
    if isinstance(layer, Relu):
        return {}, g * (x > 0)
    if isinstance(layer, LeakyRelu):
        return {}, g * np.where(x > 0, 1.0, layer.slope)
    if isinstance(layer, Softplus):
        return {}, g * expit(x)
    if isinstance(layer, Reshape):
        return {}, g.reshape(x.shape)
    raise ValueError(f"layer {i}: unknown layer kind")


def _promote(spec: NetSpec, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], True
    if x.shape[1:] == spec.input_shape:
        return x, False
    raise ValueError(
        f"input shape {x.shape} does not match declared {spec.input_shape} "
        f"(a leading batch axis is also accepted)")


def forward_trace(spec: NetSpec, params: dict, x: np.ndarray):
    """Runs the net, returning every intermediate activation (batched layout)."""
    _check_params(spec, params)
    xb, single = _promote(spec, x)
    acts = [xb]
    for i, layer in enumerate(spec.layers):
        acts.append(_layer_forward(layer, params, i, acts[-1]))
    return acts, single


def graph_forward(spec: NetSpec, params: dict, x: np.ndarray) -> np.ndarray:
    acts, single = forward_trace(spec, params, x)
    out = acts[-1]
    return out[0] if single else out


def backward_trace(spec: NetSpec, params: dict, acts, out_grad: np.ndarray):
    """Backward pass over a stored trace. out_grad must be batched like acts[-1]."""
    if out_grad.shape != acts[-1].shape:
        raise ValueError(
            f"out_grad shape {out_grad.shape} does not match output {acts[-1].shape}")
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(out_grad, dtype=np.float64)
    for i in range(len(spec.layers) - 1, -1, -1):
        pg, g = _layer_backward(spec.layers[i], params, i, acts[i], g)
        grads.update(pg)
    ordered = {name: grads[name] for name in params if name in grads}
    return ordered, g


def graph_backward(spec: NetSpec, params: dict, x: np.ndarray, out_grad: np.ndarray):
    """Exact gradients of <out_grad, output> w.r.t. params and input."""
    acts, single = forward_trace(spec, params, x)
    og = np.asarray(out_grad, dtype=np.float64)
    if single:
        if og.shape != spec.output_shape:
            raise ValueError(
                f"out_grad shape {og.shape} does not match output {spec.output_shape}")
        og = og[None]
    grads, gx = backward_trace(spec, params, acts, og)
    return grads, (gx[0] if single else gx)


def gradient_check(spec: NetSpec, params: dict, x: np.ndarray, eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is <out_grad, output> with a fixed pseudo-random
    out_grad so sign errors cannot cancel.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = graph_forward(spec, params, x)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite network output")
    og = np.random.Generator(np.random.PCG64(0xC0FFEE)).normal(size=out.shape)
    analytic, _ = graph_backward(spec, params, x, og)

    def scalar(p):
        y = graph_forward(spec, p, x)
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite intermediate during gradient check")
        return float(np.sum(y * og))

    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = scalar(params)
            flat[j] = orig - eps
            lo = scalar(params)
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[j])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------
# optimizer

@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=zeros, v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptState):
    """One bias-corrected Adam update; pure (returns fresh params and state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"NaN or inf gradient for parameter {name!r}; aborting")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, step=t)


# --------------------------------------------------------------------------
# checkpoint format: magic "TOCP", version u8, count u32, then per entry
# (name_len u16, name bytes, rank u8, dims u32 x rank, values f64 LE)

def save_params(path, params: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(value, dtype=np.float64)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    version = data[4]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 5)
    offset = 9
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rank = data[offset]
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(data, dtype="<f8", count=n, offset=offset).copy()
        offset += 8 * n
        params[name] = values.reshape(dims)
    if offset != len(data):
        raise ValueError(f"trailing bytes in checkpoint: expected {offset}, file has {len(data)}")
    return params
