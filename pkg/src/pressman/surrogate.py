"""LeNet-style CNN in numpy with exact backpropagation and ADAM.

Layout of the default network::

    conv 5x5, 1->6, relu    24 -> 20
    maxpool 2               20 -> 10
    conv 5x5, 6->16, relu   10 -> 6
    maxpool 2               6  -> 3
    flatten                 16*3*3 = 144
    dense 144->120, relu
    dense 120->84, relu
    dense 84->1

The raw scalar is mapped to an extraction rate by
``softplus(raw) * output_scale``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_NAMES = (
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "dense1.weight",
    "dense1.bias",
    "dense2.weight",
    "dense2.bias",
    "dense3.weight",
    "dense3.bias",
)


@dataclass(frozen=True)
class Architecture:
    input_size: int = 24
    kernel: int = 5
    channels: tuple[int, int] = (6, 16)
    hidden: tuple[int, int] = (120, 84)

    def feature_sizes(self) -> list[int]:
        """Spatial size after conv1, pool1, conv2, pool2."""
        n1 = self.input_size - self.kernel + 1
        p1 = n1 // 2
        n2 = p1 - self.kernel + 1
        p2 = n2 // 2
        sizes = [n1, p1, n2, p2]
        if min(sizes) < 1:
            raise ValueError(f"input {self.input_size} too small for kernel {self.kernel}")
        return sizes

    @property
    def flat_size(self) -> int:
        return self.channels[1] * self.feature_sizes()[-1] ** 2

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k, (c1, c2), (h1, h2) = self.kernel, self.channels, self.hidden
        return {
            "conv1.weight": (c1, 1, k, k),
            "conv1.bias": (c1,),
            "conv2.weight": (c2, c1, k, k),
            "conv2.bias": (c2,),
            "dense1.weight": (h1, self.flat_size),
            "dense1.bias": (h1,),
            "dense2.weight": (h2, h1),
            "dense2.bias": (h2,),
            "dense3.weight": (1, h2),
            "dense3.bias": (1,),
        }

    def describe(self) -> str:
        k, (c1, c2), (h1, h2) = self.kernel, self.channels, self.hidden
        return (
            f"input({self.input_size}x{self.input_size});conv({k}x{k},1=>{c1},relu);maxpool(2);"
            f"conv({k}x{k},{c1}=>{c2},relu);maxpool(2);flatten({self.flat_size});"
            f"dense({self.flat_size},{h1},relu);dense({h1},{h2},relu);dense({h2},1);softplus-scale"
        )


@dataclass
class NetworkParams:
    arch: Architecture
    weights: dict[str, np.ndarray]
    # log10-permeability standardization and rate scaling
    input_mean: float = 0.0
    input_std: float = 1.0
    output_scale: float = 1.0

    def __post_init__(self):
        shapes = self.arch.shapes()
        if list(self.weights) != list(PARAM_NAMES):
            self.weights = {name: self.weights[name] for name in PARAM_NAMES}
        for name, shape in shapes.items():
            arr = self.weights[name]
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if not self.input_std > 0:
            raise ValueError("input_std must be positive")

    def copy(self) -> "NetworkParams":
        return replace(self, weights={k: v.copy() for k, v in self.weights.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())

    def normalize(self, perm: np.ndarray) -> np.ndarray:
        """Standardized log10-permeability image(s)."""
        return (np.log10(perm) - self.input_mean) / self.input_std


def init_params(
    arch: Architecture = Architecture(),
    seed: int = 0,
    input_mean: float = 0.0,
    input_std: float = 1.0,
    output_scale: float = 1.0,
) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in arch.shapes().items():
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_out, fan_in = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkParams(arch, weights, input_mean, input_std, output_scale)


# --- layers -------------------------------------------------------------------


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid cross-correlation: x (B, C, H, W), w (O, C, k, k) -> (B, O, H-k+1, W-k+1)."""
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, H', W', k, k
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B, H', W', O
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, k, k
    db = dy.sum(axis=(0, 2, 3))
    pad = np.pad(dy, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    pwin = sliding_window_view(pad, (k, k), axis=(2, 3))  # B, O, H, W, k, k
    dx = np.tensordot(pwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))  # B, H, W, C
    return dx.transpose(0, 3, 1, 2), dw, db


def maxpool2(x: np.ndarray):
    """2x2 max pooling with stride 2 (odd trailing rows/columns dropped).

    Returns the pooled array and the flat within-window argmax, which picks
    the first maximal element on ties.
    """
    bsz, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(bsz, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(bsz, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def maxpool2_backward(dy: np.ndarray, arg: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    bsz, c, h, w = in_shape
    h2, w2 = dy.shape[2], dy.shape[3]
    blocks = np.zeros((bsz, c, h2, w2, 4))
    np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(bsz, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, 2 * h2, 2 * w2)
    dx = np.zeros(in_shape)
    dx[:, :, : 2 * h2, : 2 * w2] = blocks
    return dx


def relu(x):
    return np.maximum(x, 0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- network ------------------------------------------------------------------


def _as_batch(x: np.ndarray, size: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-2:] != (size, size):
        raise ValueError(f"input must be {size}x{size}, got {x.shape[-2:]}")
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError("input must be (H, W) or (B, H, W)")
    return x[:, None]


def forward_raw(params: NetworkParams, x: np.ndarray):
    """Raw network output for normalized input(s); returns ``(raw, cache)``."""
    wt = params.weights
    a0 = _as_batch(x, params.arch.input_size)
    z1 = conv2d(a0, wt["conv1.weight"], wt["conv1.bias"])
    a1 = relu(z1)
    p1, arg1 = maxpool2(a1)
    z2 = conv2d(p1, wt["conv2.weight"], wt["conv2.bias"])
    a2 = relu(z2)
    p2, arg2 = maxpool2(a2)
    flat = p2.reshape(p2.shape[0], -1)
    if flat.shape[1] != params.arch.flat_size:
        raise AssertionError(f"flattened {flat.shape[1]} features, expected {params.arch.flat_size}")
    z3 = flat @ wt["dense1.weight"].T + wt["dense1.bias"]
    a3 = relu(z3)
    z4 = a3 @ wt["dense2.weight"].T + wt["dense2.bias"]
    a4 = relu(z4)
    raw = (a4 @ wt["dense3.weight"].T + wt["dense3.bias"])[:, 0]
    cache = dict(a0=a0, z1=z1, a1=a1, arg1=arg1, p1=p1, z2=z2, a2=a2, arg2=arg2, p2=p2, flat=flat, z3=z3, a3=a3, z4=z4, a4=a4)
    return raw, cache


def backward_raw(params: NetworkParams, cache: dict, raw_grad: np.ndarray):
    """Reverse pass from ``d loss / d raw`` (one entry per batch member).

    Returns ``(grads, input_grad)``; parameter gradients are summed over the batch.
    """
    wt = params.weights
    g = np.asarray(raw_grad, dtype=float).reshape(-1, 1)
    grads = {}
    grads["dense3.weight"] = g.T @ cache["a4"]
    grads["dense3.bias"] = g.sum(axis=0)
    d4 = (g @ wt["dense3.weight"]) * (cache["z4"] > 0)
    grads["dense2.weight"] = d4.T @ cache["a3"]
    grads["dense2.bias"] = d4.sum(axis=0)
    d3 = (d4 @ wt["dense2.weight"]) * (cache["z3"] > 0)
    grads["dense1.weight"] = d3.T @ cache["flat"]
    grads["dense1.bias"] = d3.sum(axis=0)
    dflat = d3 @ wt["dense1.weight"]
    dp2 = dflat.reshape(cache["p2"].shape)
    da2 = maxpool2_backward(dp2, cache["arg2"], cache["a2"].shape)
    dz2 = da2 * (cache["z2"] > 0)
    dp1, grads["conv2.weight"], grads["conv2.bias"] = conv2d_backward(cache["p1"], wt["conv2.weight"], dz2)
    da1 = maxpool2_backward(dp1, cache["arg1"], cache["a1"].shape)
    dz1 = da1 * (cache["z1"] > 0)
    dx, grads["conv1.weight"], grads["conv1.bias"] = conv2d_backward(cache["a0"], wt["conv1.weight"], dz1)
    return {name: grads[name] for name in PARAM_NAMES}, dx[:, 0]


def forward(params: NetworkParams, perm_input: np.ndarray):
    """Extraction rate(s) (m^3/s) for normalized input image(s)."""
    raw, _ = forward_raw(params, perm_input)
    rate = softplus(raw) * params.output_scale
    return rate if np.ndim(perm_input) == 3 else float(rate[0])


def backward(params: NetworkParams, perm_input: np.ndarray, upstream_gradient):
    """Gradients of ``upstream_gradient * rate`` w.r.t. parameters and input."""
    raw, cache = forward_raw(params, perm_input)
    up = np.broadcast_to(np.asarray(upstream_gradient, dtype=float), raw.shape)
    grads, dx = backward_raw(params, cache, up * sigmoid(raw) * params.output_scale)
    return grads, (dx if np.ndim(perm_input) == 3 else dx[0])


def predict_rates(params: NetworkParams, perms: np.ndarray) -> np.ndarray:
    """Rates for raw permeability fields of shape (B, H, W)."""
    return np.atleast_1d(forward(params, params.normalize(np.asarray(perms))))


# --- ADAM ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.weights.items()},
            {k: np.zeros_like(a) for k, a in params.weights.items()},
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: NetworkParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float = 1e-4):
    """One bias-corrected ADAM update; returns new ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    step = state.step + 1
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    new_w, new_m, new_v = {}, {}, {}
    for name in PARAM_NAMES:
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_w[name] = params.weights[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return replace(params, weights=new_w), OptimizerState(new_m, new_v, step)


# --- checkpoints --------------------------------------------------------------
#
# ASCII header, one "key value" per line, then the parameter arrays as
# little-endian float64 in PARAM_NAMES order (C order within each array):
#
#     pressman-checkpoint 1
#     arch <Architecture.describe()>
#     input_size 24
#     kernel 5
#     channels 6,16
#     hidden 120,84
#     input_mean <repr float>
#     input_std <repr float>
#     output_scale <repr float>
#     param conv1.weight 6,1,5,5
#     ...                                  (one line per parameter)
#     end

CHECKPOINT_MAGIC = "pressman-checkpoint 1"


def checkpoint_bytes(params: NetworkParams) -> bytes:
    a = params.arch
    lines = [
        CHECKPOINT_MAGIC,
        f"arch {a.describe()}",
        f"input_size {a.input_size}",
        f"kernel {a.kernel}",
        f"channels {a.channels[0]},{a.channels[1]}",
        f"hidden {a.hidden[0]},{a.hidden[1]}",
        f"input_mean {params.input_mean!r}",
        f"input_std {params.input_std!r}",
        f"output_scale {params.output_scale!r}",
    ]
    for name in PARAM_NAMES:
        lines.append(f"param {name} {','.join(str(d) for d in params.weights[name].shape)}")
    lines.append("end")
    body = b"".join(np.ascontiguousarray(params.weights[n], dtype="<f8").tobytes() for n in PARAM_NAMES)
    return ("\n".join(lines) + "\n").encode("ascii") + body


def save_checkpoint(path: Union[str, Path], params: NetworkParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: Union[str, Path]) -> NetworkParams:
    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\nend\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint header terminator")
    lines = head.decode("ascii").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a pressman checkpoint (got {lines[0]!r})")
    meta, shapes = {}, {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        if key == "param":
            name, dims = value.split(" ")
            shapes[name] = tuple(int(d) for d in dims.split(","))
        else:
            meta[key] = value
    arch = Architecture(
        int(meta["input_size"]),
        int(meta["kernel"]),
        tuple(int(v) for v in meta["channels"].split(",")),
        tuple(int(v) for v in meta["hidden"].split(",")),
    )
    if meta["arch"] != arch.describe() or shapes != arch.shapes():
        raise ValueError(f"{path}: architecture header is inconsistent")
    weights, offset = {}, 0
    for name in PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        chunk = body[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated parameter data at {name}")
        weights[name] = np.frombuffer(chunk, dtype="<f8").reshape(shapes[name]).astype(float)
        offset += 8 * count
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return NetworkParams(arch, weights, float(meta["input_mean"]), float(meta["input_std"]), float(meta["output_scale"]))
