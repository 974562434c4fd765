"""Minimal multilayer perceptron with hand-written reverse and forward mode.

Parameters live in one flat float64 vector. Each layer stores its weight
matrix (``out x in``, row-major) followed by its bias. Hidden layers use the
spec's activation; the output layer is linear.

Every function accepts a single input vector or a batch (``N x input_dim``).
For batches, :func:`gradient` sums over rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class DimensionError(ValueError):
    """Raised when an array does not match the network's declared dimensions."""

    def __init__(self, what: str, expected: int, got: int):
        super().__init__(f"{what}: expected length {expected}, got {got}")
        self.what = what
        self.expected = expected
        self.got = got


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.hidden_dims:
            raise ValueError("at least one hidden layer is required")
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_dims)

    def header(self) -> str:
        hidden = " ".join(str(h) for h in self.hidden_dims)
        return f"netspec {self.input_dim} {hidden} {self.output_dim} {self.activation}"


def _unpack(spec: NetSpec, params: np.ndarray):
    """Views ``[(W, b), ...]`` into the flat vector (no copies)."""
    layers = []
    k = 0
    for o, i in spec.layer_dims:
        w = params[k:k + o * i].reshape(o, i)
        k += o * i
        b = params[k:k + o]
        k += o
        layers.append((w, b))
    return layers


def _check_params(spec: NetSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.n_params:
        raise DimensionError("params", spec.n_params, params.size)
    return params


def _as_batch(x, dim: int, what: str):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise DimensionError(what, dim, x2.shape[-1] if x2.ndim else 0)
    return x2, single


def _act(spec, z):
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(spec, z, h):
    if spec.activation == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


def init_params(spec: NetSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.n_params)
    for w, _ in _unpack(spec, params):
        fan_out, fan_in = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return params


def _forward_cache(spec, params, x):
    pre, post = [], [x]
    h = x
    layers = _unpack(spec, params)
    for idx, (w, b) in enumerate(layers):
        z = h @ w.T + b
        if idx < len(layers) - 1:
            h = _act(spec, z)
        else:
            h = z
        pre.append(z)
        post.append(h)
    return layers, pre, post


def forward(spec: NetSpec, params, x) -> np.ndarray:
    params = _check_params(spec, params)
    xb, single = _as_batch(x, spec.input_dim, "input")
    h = xb
    layers = _unpack(spec, params)
    for w, b in layers[:-1]:
        h = _act(spec, h @ w.T + b)
    w, b = layers[-1]
    out = h @ w.T + b
    return out[0] if single else out


def vjp(spec: NetSpec, params, x, output_cotangent):
    """Return ``(d<c, f>/d params, d<c, f>/d input)``; parameter part summed over a batch."""
    params = _check_params(spec, params)
    xb, single = _as_batch(x, spec.input_dim, "input")
    cb, _ = _as_batch(output_cotangent, spec.output_dim, "cotangent")
    if cb.shape[0] != xb.shape[0]:
        raise DimensionError("cotangent rows", xb.shape[0], cb.shape[0])
    layers, pre, post = _forward_cache(spec, params, xb)
    grad = np.empty_like(params)
    grads = _unpack(spec, grad)
    delta = cb
    n_layers = len(layers)
    for idx in range(n_layers - 1, -1, -1):
        w, _ = layers[idx]
        gw, gb = grads[idx]
        gw[...] = delta.T @ post[idx]
        gb[...] = delta.sum(axis=0)
        delta = delta @ w
        if idx > 0:
            delta = delta * _act_deriv(spec, pre[idx - 1], post[idx])
    return grad, (delta[0] if single else delta)


def gradient(spec: NetSpec, params, x, output_cotangent) -> np.ndarray:
    """``d(cotangent . output) / d params``."""
    return vjp(spec, params, x, output_cotangent)[0]


def jvp(spec: NetSpec, params, x, param_tangent) -> np.ndarray:
    """Directional derivative of the output along ``param_tangent``."""
    params = _check_params(spec, params)
    tangent = np.asarray(param_tangent, dtype=np.float64)
    if tangent.shape != params.shape:
        raise DimensionError("param tangent", params.size, tangent.size)
    xb, single = _as_batch(x, spec.input_dim, "input")
    layers = _unpack(spec, params)
    dlayers = _unpack(spec, tangent)
    h = xb
    dh = np.zeros_like(xb)
    n_layers = len(layers)
    for idx in range(n_layers):
        w, b = layers[idx]
        dw, db = dlayers[idx]
        z = h @ w.T + b
        dz = dh @ w.T + h @ dw.T + db
        if idx < n_layers - 1:
            h = _act(spec, z)
            dh = dz * _act_deriv(spec, z, h)
        else:
            h, dh = z, dz
    return dh[0] if single else dh


# -- checkpoints ------------------------------------------------------------

def _parse_header(line: str) -> NetSpec:
    parts = line.split()
    if len(parts) < 5 or parts[0] != "netspec":
        raise ValueError(f"bad checkpoint header: {line!r}")
    nums = [int(p) for p in parts[1:-1]]
    return NetSpec(nums[0], tuple(nums[1:-1]), nums[-1], parts[-1])


def dumps(blocks: Iterable[tuple[NetSpec, np.ndarray]]) -> str:
    lines = []
    for spec, params in blocks:
        params = _check_params(spec, params)
        if not np.all(np.isfinite(params)):
            raise ValueError("refusing to checkpoint non-finite parameters")
        lines.append(spec.header())
        # repr gives the shortest string that round-trips exactly
        lines.extend(repr(float(v)) for v in params)
    return "\n".join(lines) + "\n"


def loads(text: str) -> list[tuple[NetSpec, np.ndarray]]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    blocks = []
    k = 0
    while k < len(lines):
        spec = _parse_header(lines[k])
        k += 1
        n = spec.n_params
        if k + n > len(lines):
            raise ValueError("truncated checkpoint")
        params = np.array([float(v) for v in lines[k:k + n]])
        k += n
        blocks.append((spec, params))
    return blocks


def save_checkpoint(path, blocks: Sequence[tuple[NetSpec, np.ndarray]]) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(blocks))


def load_checkpoint(path) -> list[tuple[NetSpec, np.ndarray]]:
    with open(path) as fh:
        return loads(fh.read())
