"""The embedding network, frozen snapshots of it, and Adam."""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import DiffNode, Tape, relu

MAGIC = b"CMML"
FORMAT_VERSION = 1
DEFAULT_HIDDEN = (64, 64)
DEFAULT_EMB_DIM = 16


class FrozenParamsError(RuntimeError):
    pass


@dataclass
class ModelParams:
    """Layer weights ``(d_out, d_in)`` and biases ``(d_out,)``; ReLU between layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i}: input width {w.shape[1]} != previous output "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def emb_dim(self) -> int:
        return self.weights[-1].shape[0]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"layers[{i}].weight", w))
            out.append((f"layers[{i}].bias", b))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, a in self.named_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def snapshot(self) -> "ModelParams":
        return snapshot(self)


def init_params(widths, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return ModelParams(weights, biases)


def make_model(in_dim: int, emb_dim: int = DEFAULT_EMB_DIM, hidden=DEFAULT_HIDDEN, seed: int = 0):
    return init_params([in_dim, *hidden, emb_dim], seed)


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"embed: batch shape {x.shape} does not match input width {params.in_dim}")
    return x


def embed(params: ModelParams, batch) -> np.ndarray:
    h = _check_batch(params, batch)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def param_nodes(tape: Tape, params: ModelParams) -> list[tuple[DiffNode, DiffNode]]:
    """Put parameters on the tape: variables if trainable, constants if frozen."""
    make = tape.constant if params.frozen else tape.variable
    # biases as (1, d_out) rows so they broadcast over the batch
    return [(make(w), make(b[None, :])) for w, b in zip(params.weights, params.biases)]


def embed_on_tape(tape: Tape, layers, batch) -> DiffNode:
    x = _as_node(tape, batch)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        x = x @ w.T + b
        if i < last:
            x = relu(x)
    return x


def _as_node(tape, batch):
    return batch if isinstance(batch, DiffNode) else tape.constant(batch)


def snapshot(params: ModelParams) -> ModelParams:
    return ModelParams(
        [w.copy() for w in params.weights], [b.copy() for b in params.biases], frozen=True
    )


def thaw(params: ModelParams) -> ModelParams:
    out = copy.deepcopy(params)
    out.frozen = False
    return out


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def reset(self) -> None:
        self.step = 0
        self.m, self.v = [], []


def adam_update(arrays, grads, state: AdamState, names=None) -> None:
    """One in-place Adam step over parallel lists of arrays and gradients.

    Weight decay is coupled: ``g + weight_decay * theta`` enters both moments.
    A NaN gradient aborts the step before anything is modified.
    """
    names = names or [f"param[{i}]" for i in range(len(arrays))]
    if len(grads) != len(arrays):
        raise ValueError(f"adam_step: {len(grads)} gradients for {len(arrays)} parameters")
    for name, a, g in zip(names, arrays, grads):
        if g.shape != a.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, expected {a.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient in {name}")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * a
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        a -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def adam_step(params: ModelParams, grads, state: AdamState) -> ModelParams:
    """Update ``params`` in place from per-layer ``(dW, db)`` pairs and return it."""
    if params.frozen:
        raise FrozenParamsError("adam_step: refusing to update a frozen snapshot")
    named = params.named_arrays()
    flat = []
    for gw, gb in grads:
        flat.append(np.asarray(gw, dtype=np.float64))
        flat.append(np.asarray(gb, dtype=np.float64).reshape(-1))
    adam_update([a for _, a in named], flat, state, [n for n, _ in named])
    return params


# --------------------------------------------------------------------------
# serialization


def save_params(params: ModelParams, path) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        d_out, d_in = w.shape
        chunks.append(struct.pack("<II", d_out, d_in))
        chunks.append(w.astype("<f8").tobytes(order="C"))
        chunks.append(b.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic bytes)")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 12
    weights, biases = [], []
    for _ in range(n_layers):
        d_out, d_in = struct.unpack_from("<II", data, off)
        off += 8
        w = np.frombuffer(data, "<f8", d_out * d_in, off).reshape(d_out, d_in)
        off += 8 * d_out * d_in
        b = np.frombuffer(data, "<f8", d_out, off)
        off += 8 * d_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return ModelParams(weights, biases)
