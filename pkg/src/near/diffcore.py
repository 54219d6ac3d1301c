"""Minimal reverse-mode differentiation engine for dense networks.

Supports plain MLPs (affine layers + pointwise activations) with exact
gradients with respect to inputs and parameters, including parameter
gradients of losses that contain input gradients (double backprop).
Everything is float64 numpy; networks are plain values.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np


class DiffcoreError(Exception):
    """Structured error for shape/validity violations."""


# ---------------------------------------------------------------------------
# Activations: value, first and second derivative (elementwise).
# ELU uses alpha=1.

def _elu(z):
    return np.where(z > 0, z, np.expm1(z))


def _elu_d1(z):
    return np.where(z > 0, 1.0, np.exp(z))


def _elu_d2(z):
    return np.where(z > 0, 0.0, np.exp(z))


def _tanh_d1(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_d1(z):
    s = _sigmoid(z)
    return s * (1.0 - s)


def _sigmoid_d2(z):
    s = _sigmoid(z)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z), lambda z: np.zeros_like(z)),
    "relu": (
        lambda z: np.maximum(z, 0.0),
        lambda z: (z > 0).astype(np.float64),
        lambda z: np.zeros_like(z),
    ),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
    "sigmoid": (_sigmoid, _sigmoid_d1, _sigmoid_d2),
    "elu": (_elu, _elu_d1, _elu_d2),
}


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DiffcoreError("layer weight must be a matrix")
        if self.bias.shape != (self.weight.shape[0],):
            raise DiffcoreError(
                f"bias shape {self.bias.shape} does not match weight rows "
                f"{self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise DiffcoreError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise DiffcoreError("non-finite layer parameters")


@dataclass
class DenseNetwork:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DiffcoreError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise DiffcoreError(
                    f"layer dims do not chain: {prev.weight.shape[0]} -> "
                    f"{nxt.weight.shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...] referencing the live arrays."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise DiffcoreError("parameter list length mismatch")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise DiffcoreError("parameter shape mismatch")
            layer.weight = np.asarray(w, dtype=np.float64)
            layer.bias = np.asarray(b, dtype=np.float64)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def xavier_uniform_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on [-b, b], b = sqrt(6 / (fan_in + fan_out)); shape (fan_out, fan_in)."""
    if fan_in < 1 or fan_out < 1:
        raise DiffcoreError("fans must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def make_mlp(
    dims: list[int],
    activation: str,
    rng: np.random.Generator,
    output_activation: str = "identity",
) -> DenseNetwork:
    """Xavier-initialized MLP with the given layer widths (dims[0] is the input)."""
    layers = []
    for i in range(len(dims) - 1):
        act = activation if i < len(dims) - 2 else output_activation
        layers.append(
            Layer(xavier_uniform_init(dims[i], dims[i + 1], rng), np.zeros(dims[i + 1]), act)
        )
    return DenseNetwork(layers)


# ---------------------------------------------------------------------------
# Forward / reverse passes. All batched entry points take X of shape (B, D).


def _forward_trace(net: DenseNetwork, X: np.ndarray):
    """Returns (activations a_0..a_N, pre-activations z_1..z_N)."""
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise DiffcoreError(
            f"input dim {X.shape} does not match network input {net.in_dim}"
        )
    a = [X]
    zs = []
    for layer in net.layers:
        z = a[-1] @ layer.weight.T + layer.bias
        zs.append(z)
        a.append(ACTIVATIONS[layer.activation][0](z))
    return a, zs


def forward_batch(net: DenseNetwork, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    a, _ = _forward_trace(net, X)
    return a[-1]


def forward(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DiffcoreError("forward expects a 1-D input; use forward_batch")
    return forward_batch(net, x[None, :])[0]


def _require_scalar_output(net: DenseNetwork):
    if net.out_dim != 1:
        raise DiffcoreError("operation requires a scalar-output network")


def input_gradient_batch(net: DenseNetwork, X: np.ndarray) -> np.ndarray:
    """d output / d input for a scalar-output net, per row of X."""
    _require_scalar_output(net)
    X = np.asarray(X, dtype=np.float64)
    a, zs = _forward_trace(net, X)
    g = np.ones((X.shape[0], 1))
    for layer, z in zip(reversed(net.layers), reversed(zs)):
        g = (g * ACTIVATIONS[layer.activation][1](z)) @ layer.weight
    return g


def input_gradient(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return input_gradient_batch(net, x[None, :])[0]


def backward_batch(net: DenseNetwork, X: np.ndarray, dY: np.ndarray):
    """Reverse mode through the plain forward pass.

    dY is d loss / d output, shape (B, K). Returns (outputs, param_grads, dX)
    where param_grads matches net.params() layout and grads are summed over
    the batch.
    """
    X = np.asarray(X, dtype=np.float64)
    dY = np.asarray(dY, dtype=np.float64)
    a, zs = _forward_trace(net, X)
    if dY.shape != a[-1].shape:
        raise DiffcoreError("dY shape does not match network output")
    grads = [None] * (2 * len(net.layers))
    g = dY
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        gz = g * ACTIVATIONS[layer.activation][1](zs[i])
        grads[2 * i] = gz.T @ a[i]
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.weight
    return a[-1], grads, g


def input_grad_functional_param_grads(
    net: DenseNetwork, X: np.ndarray, V: np.ndarray
):
    """Exact d/d theta of sum_b V[b] . grad_x e(X[b]) for a scalar-output net.

    This is the double-backprop primitive: the inner input gradient is
    re-expressed as a forward-mode directional derivative in direction V
    (since V . grad_x e = JVP), then reverse mode runs over that extended
    computation. Returns (functional_value, param_grads).
    """
    _require_scalar_output(net)
    X = np.asarray(X, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if V.shape != X.shape:
        raise DiffcoreError("V must match X shape")
    n_layers = len(net.layers)

    # Forward with tangents: adot_0 = V.
    a = [X]
    adot = [V]
    zs, zdots, d1s = [], [], []
    for layer in net.layers:
        z = a[-1] @ layer.weight.T + layer.bias
        zdot = adot[-1] @ layer.weight.T
        d1 = ACTIVATIONS[layer.activation][1](z)
        zs.append(z)
        zdots.append(zdot)
        d1s.append(d1)
        a.append(ACTIVATIONS[layer.activation][0](z))
        adot.append(d1 * zdot)
    value = float(adot[-1].sum())

    # Reverse over (a, adot, z, zdot). Seed: adjoint of adot_N is 1.
    grads = [None] * (2 * n_layers)
    ga = np.zeros_like(a[-1])
    gadot = np.ones_like(adot[-1])
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        d2 = ACTIVATIONS[layer.activation][2](zs[i])
        # adot_i = d1 * zdot ; a_i = f(z)
        gzdot = d1s[i] * gadot
        gz = d2 * zdots[i] * gadot + d1s[i] * ga
        # z = W a_prev + b ; zdot = W adot_prev
        grads[2 * i] = gz.T @ a[i] + gzdot.T @ adot[i]
        grads[2 * i + 1] = gz.sum(axis=0)
        ga = gz @ layer.weight
        gadot = gzdot @ layer.weight
    return value, grads


# ---------------------------------------------------------------------------
# Optimizer and EMA.


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def init(cls, params: list[np.ndarray], lr: float, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Bias-corrected Adam. Returns (new_params, new_state); no in-place mutation."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise DiffcoreError("params/grads shape mismatch")
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise DiffcoreError("NaN or inf in gradients")
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        new_p.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps, state.lr)


@dataclass
class EmaState:
    shadow: list[np.ndarray]
    decay: float

    @classmethod
    def init(cls, params: list[np.ndarray], decay: float) -> "EmaState":
        if not 0.0 < decay < 1.0:
            raise DiffcoreError("EMA decay must be in (0, 1)")
        return cls([p.copy() for p in params], decay)


def ema_update(ema: EmaState, params: list[np.ndarray]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * live, elementwise."""
    if len(ema.shadow) != len(params) or any(
        s.shape != p.shape for s, p in zip(ema.shadow, params)
    ):
        raise DiffcoreError("EMA shadow/live shape mismatch")
    new = [ema.decay * s + (1.0 - ema.decay) * p for s, p in zip(ema.shadow, params)]
    return EmaState(new, ema.decay)


# ---------------------------------------------------------------------------
# Checkpoint container.
#
# Byte layout (little-endian):
#   magic   8 bytes   b"NEARCKP1"
#   hlen    u64       length of the JSON header in bytes
#   header  hlen      UTF-8 JSON: {"meta": {...}, "arrays": [{"name", "shape"}]}
#   payload           raw float64 data of each array in listed order, C order
#
# Round trips are bit exact: arrays are written and read as raw float64.

_MAGIC = b"NEARCKP1"


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    header = {
        "meta": meta,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Returns (meta, arrays)."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(8) != _MAGIC:
        raise DiffcoreError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", buf.read(8))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw = buf.read(8 * n)
        if len(raw) != 8 * n:
            raise DiffcoreError(f"{path}: truncated checkpoint payload")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
    return header["meta"], arrays


def network_to_arrays(net: DenseNetwork, prefix: str = "net") -> tuple[dict, dict]:
    """(meta, arrays) fragments for embedding a network in a checkpoint."""
    meta = {f"{prefix}_activations": [l.activation for l in net.layers]}
    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"{prefix}_w{i}"] = layer.weight
        arrays[f"{prefix}_b{i}"] = layer.bias
    return meta, arrays


def network_from_arrays(meta: dict, arrays: dict, prefix: str = "net") -> DenseNetwork:
    acts = meta[f"{prefix}_activations"]
    layers = [
        Layer(arrays[f"{prefix}_w{i}"], arrays[f"{prefix}_b{i}"], act)
        for i, act in enumerate(acts)
    ]
    return DenseNetwork(layers)
