"""Mapping modules and classifier heads: tiny fully connected networks with
hand-written forward/backward passes and plain SGD.

Weights are stored ``(d_in, d_out)`` so a batch forward is ``x @ W + b``.
ReLU sits between layers and the final layer is linear. Models are frozen
dataclasses; every update builds a new value, which keeps concurrent client
training trivially safe. Encoders are frozen stand-ins for large pretrained
backbones: either the identity or a fixed seeded random projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _serde
from .numerics import Rng, require_finite, seeded_rng

MODULE_FORMAT = "mapping-module/v1"


@dataclass(frozen=True)
class MappingModule:
    """Fully connected net projecting encoder features into the shared space."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i} has inconsistent shapes")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input dim does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(w.shape[1] for w in self.weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class ClassifierHead:
    """Single linear layer producing class logits."""

    weights: np.ndarray  # (d_in, num_classes)
    bias: np.ndarray  # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class GradientTape:
    """Per-parameter gradient buffers mirroring a model's layer layout."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model) -> "GradientTape":
        if isinstance(model, ClassifierHead):
            return cls([np.zeros_like(model.weights)], [np.zeros_like(model.bias)])
        return cls(
            [np.zeros_like(w) for w in model.weights],
            [np.zeros_like(b) for b in model.biases],
        )

    def add_(self, other: "GradientTape", scale: float = 1.0) -> "GradientTape":
        for mine, theirs in zip(self.d_weights, other.d_weights):
            mine += scale * theirs
        for mine, theirs in zip(self.d_biases, other.d_biases):
            mine += scale * theirs
        return self


@dataclass
class ForwardTrace:
    """Activations recorded during a forward pass, consumed by backward()."""

    layer_inputs: list[np.ndarray]
    preacts: list[np.ndarray]


def init_mapping_module(dims, rng: Rng) -> MappingModule:
    """He-initialised weights, zero biases. ``dims`` chains input to output."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"bad layer dims {dims}")
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in))
        biases.append(np.zeros(d_out))
    return MappingModule(tuple(weights), tuple(biases))


def init_classifier_head(in_dim: int, num_classes: int, rng: Rng) -> ClassifierHead:
    weights = rng.standard_normal((in_dim, num_classes)) / np.sqrt(in_dim)
    return ClassifierHead(weights, np.zeros(num_classes))


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def forward_map(module: MappingModule, x) -> np.ndarray:
    """Map features to embeddings; accepts a vector or an (N, d) batch."""
    batch, squeeze = _as_batch(x)
    if batch.shape[1] != module.in_dim:
        raise ValueError(f"input dim {batch.shape[1]} != module in_dim {module.in_dim}")
    h = batch
    last = module.num_layers - 1
    for i, (w, b) in enumerate(zip(module.weights, module.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def forward_map_trace(module: MappingModule, x) -> tuple[np.ndarray, ForwardTrace]:
    """Forward pass that records what backward() needs."""
    batch, _ = _as_batch(x)
    if batch.shape[1] != module.in_dim:
        raise ValueError(f"input dim {batch.shape[1]} != module in_dim {module.in_dim}")
    inputs, preacts = [], []
    h = batch
    last = module.num_layers - 1
    for i, (w, b) in enumerate(zip(module.weights, module.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    return h, ForwardTrace(inputs, preacts)


def backward(
    module: MappingModule, trace: ForwardTrace, upstream
) -> tuple[GradientTape, np.ndarray]:
    """Exact reverse-mode gradients for a recorded forward pass.

    ``upstream`` is dL/d(output), shaped like the traced output. Returns the
    parameter tape and dL/d(input).
    """
    g, _ = _as_batch(upstream)
    if len(trace.layer_inputs) != module.num_layers:
        raise ValueError("trace does not match module architecture")
    d_weights = [None] * module.num_layers
    d_biases = [None] * module.num_layers
    last = module.num_layers - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * (trace.preacts[i] > 0)
        d_weights[i] = trace.layer_inputs[i].T @ g
        d_biases[i] = g.sum(axis=0)
        g = g @ module.weights[i].T
    return GradientTape(d_weights, d_biases), g


def forward_head(head: ClassifierHead, x) -> np.ndarray:
    batch, squeeze = _as_batch(x)
    if batch.shape[1] != head.in_dim:
        raise ValueError(f"input dim {batch.shape[1]} != head in_dim {head.in_dim}")
    logits = batch @ head.weights + head.bias
    return logits[0] if squeeze else logits


def backward_head(head: ClassifierHead, x, upstream) -> tuple[GradientTape, np.ndarray]:
    batch, _ = _as_batch(x)
    g, _ = _as_batch(upstream)
    tape = GradientTape([batch.T @ g], [g.sum(axis=0)])
    return tape, g @ head.weights.T


def _check_tape_finite(tape: GradientTape):
    for arr in (*tape.d_weights, *tape.d_biases):
        if not np.isfinite(arr).all():
            raise ValueError("non-finite gradient; aborting update")


def sgd_step(module: MappingModule, tape: GradientTape, lr: float) -> MappingModule:
    """theta' = theta - lr * grad, as a new immutable module."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    _check_tape_finite(tape)
    weights = tuple(w - lr * dw for w, dw in zip(module.weights, tape.d_weights))
    biases = tuple(b - lr * db for b, db in zip(module.biases, tape.d_biases))
    return MappingModule(weights, biases)


def sgd_step_head(head: ClassifierHead, tape: GradientTape, lr: float) -> ClassifierHead:
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    _check_tape_finite(tape)
    return ClassifierHead(
        head.weights - lr * tape.d_weights[0], head.bias - lr * tape.d_biases[0]
    )


def flatten_module(module: MappingModule) -> np.ndarray:
    """Canonical flat parameter vector: W then b, layer by layer."""
    parts = []
    for w, b in zip(module.weights, module.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_module(template: MappingModule, flat: np.ndarray) -> MappingModule:
    flat = np.asarray(flat, dtype=float)
    weights, biases = [], []
    pos = 0
    for w, b in zip(template.weights, template.biases):
        weights.append(flat[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(flat[pos : pos + b.size].copy())
        pos += b.size
    if pos != flat.size:
        raise ValueError(f"flat vector length {flat.size} != parameter count {pos}")
    return MappingModule(tuple(weights), tuple(biases))


def same_architecture(a: MappingModule, b: MappingModule) -> bool:
    return a.dims == b.dims


def module_distance_sq(a: MappingModule, b: MappingModule) -> float:
    """Sum of squared parameter differences over all layers."""
    if not same_architecture(a, b):
        raise ValueError(f"architecture mismatch: {a.dims} vs {b.dims}")
    total = 0.0
    for wa, wb in zip(a.weights, b.weights):
        total += float(((wa - wb) ** 2).sum())
    for ba, bb in zip(a.biases, b.biases):
        total += float(((ba - bb) ** 2).sum())
    return total


# frozen encoders ------------------------------------------------------------


@dataclass(frozen=True)
class Encoder:
    """Deterministic feature extractor, never trained.

    ``identity`` passes inputs through; ``projection`` applies a fixed seeded
    random matrix. The same input always maps to the same output.
    """

    kind: str
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "projection"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "projection" and self.matrix is None:
            raise ValueError("projection encoder needs a matrix")

    @property
    def out_dim(self) -> int | None:
        return None if self.kind == "identity" else self.matrix.shape[1]


def make_projection_encoder(seed: int, in_dim: int, out_dim: int) -> Encoder:
    rng = seeded_rng(seed, "encoder-projection", in_dim, out_dim)
    matrix = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
    return Encoder(kind="projection", matrix=matrix)


def encode(encoder: Encoder, x) -> np.ndarray:
    batch, squeeze = _as_batch(x)
    if encoder.kind == "identity":
        out = batch
    else:
        if batch.shape[1] != encoder.matrix.shape[0]:
            raise ValueError(
                f"input dim {batch.shape[1]} != encoder in_dim {encoder.matrix.shape[0]}"
            )
        out = batch @ encoder.matrix
    return out[0] if squeeze else out


# checkpointing --------------------------------------------------------------


def save_mapping_module(module: MappingModule, path) -> None:
    """Versioned checkpoint: architecture descriptor plus flat parameters."""
    payload = {
        "format": MODULE_FORMAT,
        "dims": list(module.dims),
        "params": _serde.encode_array(flatten_module(module)),
    }
    Path(path).write_text(json.dumps(payload))


def load_mapping_module(path) -> MappingModule:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != MODULE_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    dims = payload["dims"]
    template = init_mapping_module(dims, seeded_rng(0, "checkpoint-template"))
    flat = require_finite(_serde.decode_array(payload["params"]), "checkpoint params")
    return unflatten_module(template, flat)
