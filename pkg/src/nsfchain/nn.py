"""Dense-layer networks with hand-written backprop, split into sub-models.

All arithmetic goes through a fixed sequence of numpy operations so that a
chain of sub-models reproduces the unsplit model bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

RELU = "relu"
IDENTITY = "identity"
_ACT_CODES = {RELU: 1, IDENTITY: 0}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

CHECKPOINT_MAGIC = b"NSFM"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Sub-model driven out of order (e.g. backward before forward)."""


@dataclass
class Layer:
    weights: np.ndarray  # [in_dim, out_dim]
    bias: np.ndarray  # [out_dim]
    activation: str = RELU

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "Layer":
        return Layer(self.weights.copy(), self.bias.copy(), self.activation)


def init_layer(rng: np.random.Generator, in_dim: int, out_dim: int, activation: str,
               dtype=np.float32) -> Layer:
    # He-uniform ahead of a ReLU keeps deep stacks trainable; Glorot otherwise
    if activation == RELU:
        limit = math.sqrt(6.0 / in_dim)
    else:
        limit = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(in_dim, out_dim)).astype(dtype)
    return Layer(w, np.zeros(out_dim, dtype=dtype), activation)


@dataclass
class GlobalModel:
    layers: list[Layer]

    def __post_init__(self) -> None:
        if len(self.layers) < 2:
            raise ModelError("a global model needs at least 2 layers")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ModelError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    @classmethod
    def build(cls, dims: Sequence[int], seed: int, dtype=np.float32,
              final_activation: str = IDENTITY) -> "GlobalModel":
        """MLP with ReLU hidden layers; ``dims`` lists every layer boundary."""
        rng = np.random.default_rng(seed)
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act = final_activation if i == len(dims) - 2 else RELU
            layers.append(init_layer(rng, a, b, act, dtype))
        return cls(layers)

    def copy(self) -> "GlobalModel":
        return GlobalModel([l.copy() for l in self.layers])


@dataclass
class TrainConfig:
    eta: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: tuple = ((60, 5.0), (120, 5.0), (160, 5.0))
    batch_size: int = 128

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ModelError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ModelError("momentum must be in [0, 1)")
        if self.batch_size <= 0:
            raise ModelError("batch size must be positive")
        self.schedule = tuple((int(e), float(d)) for e, d in self.schedule)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise-constant rate: divided after each boundary epoch is passed."""
    if epoch < 1:
        raise ModelError("epochs count from 1")
    eta = cfg.eta
    for boundary, divisor in cfg.schedule:
        if epoch > boundary:
            eta = eta / divisor
    return eta


@dataclass
class OptimizerState:
    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]

    @classmethod
    def zeros_like(cls, layers: Sequence[Layer]) -> "OptimizerState":
        return cls([np.zeros_like(l.weights) for l in layers],
                   [np.zeros_like(l.bias) for l in layers])


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    bias: list[np.ndarray]


@dataclass
class SubModel:
    k: int
    layers: list[Layer]
    first_layer: int = 1  # global index of layers[0]
    _inputs: Optional[list[np.ndarray]] = field(default=None, repr=False)
    _preacts: Optional[list[np.ndarray]] = field(default=None, repr=False)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def macs(self, batch: int) -> int:
        return batch * sum(l.in_dim * l.out_dim for l in self.layers)


def split_model(model: GlobalModel, cuts: Sequence[int]) -> list[SubModel]:
    """Cut after each layer index in ``cuts`` (1-based, strictly increasing).

    The sub-models share the global model's layer objects.
    """
    L = model.L
    cuts = list(cuts)
    if not 1 <= len(cuts) <= L - 1:
        raise ModelError(f"need between 1 and {L - 1} cuts for L={L}, got {len(cuts)}")
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise ModelError(f"cuts must be strictly increasing: {cuts}")
    if cuts[0] < 1 or cuts[-1] > L - 1:
        raise ModelError(f"cuts must lie in 1..{L - 1}: {cuts}")
    bounds = [0, *cuts, L]
    return [
        SubModel(k + 1, model.layers[lo:hi], lo + 1)
        for k, (lo, hi) in enumerate(zip(bounds, bounds[1:]))
    ]


def layers_per_submodel(subs: Sequence[SubModel]) -> list[int]:
    return [len(s.layers) for s in subs]


def forward(sub: SubModel, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != sub.in_dim:
        raise ModelError(f"sub-model F{sub.k} expects [b, {sub.in_dim}], got {list(x.shape)}")
    inputs, preacts = [], []
    for layer in sub.layers:
        inputs.append(x)
        z = x @ layer.weights + layer.bias
        preacts.append(z)
        x = np.maximum(z, 0) if layer.activation == RELU else z
    sub._inputs, sub._preacts = inputs, preacts
    return x


def backward(sub: SubModel, upstream: np.ndarray) -> tuple[np.ndarray, ParamGrads]:
    """Reverse-mode pass through the slice; returns (input grad, param grads)."""
    if sub._inputs is None:
        raise ProtocolError(f"backward on F{sub.k} before forward")
    if upstream.shape != sub._preacts[-1].shape:
        raise ModelError(
            f"upstream grad {list(upstream.shape)} does not match output "
            f"{list(sub._preacts[-1].shape)}"
        )
    g = upstream
    gw: list[np.ndarray] = [None] * len(sub.layers)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(sub.layers)  # type: ignore[list-item]
    for i in range(len(sub.layers) - 1, -1, -1):
        layer = sub.layers[i]
        if layer.activation == RELU:
            g = g * (sub._preacts[i] > 0)
        gw[i] = sub._inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ layer.weights.T
    sub._inputs = sub._preacts = None
    return g, ParamGrads(gw, gb)


def sgd_step(sub: SubModel, grads: ParamGrads, state: OptimizerState, cfg: TrainConfig,
             epoch: int) -> None:
    eta = sub.dtype.type(lr_schedule(cfg, epoch))
    mom = sub.dtype.type(cfg.momentum)
    wd = sub.dtype.type(cfg.weight_decay)
    for i, layer in enumerate(sub.layers):
        g = grads.weights[i] + wd * layer.weights
        state.velocity_w[i] = mom * state.velocity_w[i] + g
        layer.weights -= eta * state.velocity_w[i]
        g = grads.bias[i] + wd * layer.bias
        state.velocity_b[i] = mom * state.velocity_b[i] + g
        layer.bias -= eta * state.velocity_b[i]


def loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ModelError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ModelError(f"labels must lie in 0..{c - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    rows = np.arange(b)
    loss = float(np.mean(np.log(denom[:, 0]) - shifted[rows, labels]))
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= logits.dtype.type(b)
    return loss, grad


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def forward_flops(sub: SubModel, batch: int) -> int:
    return 2 * sub.macs(batch)


def backward_flops(sub: SubModel, batch: int) -> int:
    return 4 * sub.macs(batch)


# -- checkpoints -------------------------------------------------------------

_CKPT_HEAD = struct.Struct("<4sHH")
_CKPT_LAYER = struct.Struct("<IIB")


def save_checkpoint(layers: Sequence[Layer]) -> bytes:
    """Flat binary: header, per-layer dims, then little-endian f64 parameters."""
    out = [_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(layers))]
    out += [_CKPT_LAYER.pack(l.in_dim, l.out_dim, _ACT_CODES[l.activation]) for l in layers]
    for l in layers:
        out.append(np.ascontiguousarray(l.weights, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    return b"".join(out)


def load_checkpoint(data: bytes, dtype=np.float32) -> list[Layer]:
    magic, version, n = _CKPT_HEAD.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ModelError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    off = _CKPT_HEAD.size
    specs = []
    for _ in range(n):
        specs.append(_CKPT_LAYER.unpack_from(data, off))
        off += _CKPT_LAYER.size
    layers = []
    for in_dim, out_dim, act in specs:
        w = np.frombuffer(data, "<f8", in_dim * out_dim, off).reshape(in_dim, out_dim)
        off += 8 * in_dim * out_dim
        b = np.frombuffer(data, "<f8", out_dim, off)
        off += 8 * out_dim
        layers.append(Layer(w.astype(dtype), b.astype(dtype), _ACT_NAMES[act]))
    if off != len(data):
        raise ModelError("trailing bytes in checkpoint")
    return layers


# -- data ----------------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def batches(self, batch_size: int, epoch: int, seed: int):
        """Shuffled mini-batches; the order depends only on (seed, epoch)."""
        order = np.random.default_rng((seed, epoch)).permutation(len(self.y))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            yield self.x[idx], self.y[idx]


def gaussian_blobs(n: int, dim: int, classes: int, seed: int, spread: float = 1.0,
                   separation: float = 3.0, dtype=np.float32) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation / math.sqrt(dim), size=(classes, dim))
    y = rng.integers(0, classes, size=n)
    x = centers[y] + rng.normal(0.0, spread / math.sqrt(dim), size=(n, dim))
    return Dataset(x.astype(dtype), y.astype(np.int64))


def load_flat_dataset(data: bytes, dim: int, dtype=np.float32) -> Dataset:
    """External loader hook: records of ``dim`` little-endian f32 features + u32 label."""
    rec = np.dtype([("x", "<f4", (dim,)), ("y", "<u4")])
    arr = np.frombuffer(data, rec)
    return Dataset(arr["x"].astype(dtype), arr["y"].astype(np.int64))
