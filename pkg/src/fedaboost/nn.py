"""Dense neural-network core: forward/backward passes, optimizers, averaging.

Models are plain stacks of fully connected layers with ReLU between them
and raw logits at the output. Every function here is pure: arguments are
never mutated and identical inputs give bit-identical outputs, which is
what makes federated rounds reproducible regardless of scheduling.

Gradient convention: ``backward`` sums over the batch; loss functions fold
the 1/batch factor of mean reduction into ``grad_logits``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

Layer = tuple[np.ndarray, np.ndarray]  # (weights [fan_out, fan_in], bias [fan_out])


@dataclass(frozen=True)
class ModelParameters:
    """Ordered (weights, bias) pairs. Treat instances as immutable."""

    layers: tuple[Layer, ...]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[1],) + tuple(w.shape[0] for w, _ in self.layers)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # [batch, features]
    labels: np.ndarray  # [batch] integer class ids

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("batch inputs must be 2-d and labels 1-d")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"batch size mismatch: {self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and int(self.labels.min()) < 0:
            raise ValueError("labels must be non-negative")


@dataclass(frozen=True)
class ForwardCache:
    """Per-layer inputs recorded by forward (index l = input to layer l)."""

    activations: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class OptimizerState:
    kind: str  # "sgd" | "adamw"
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: tuple[Layer, ...] | None = None
    second_moment: tuple[Layer, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")


def adamw_state(
    model: ModelParameters,
    learning_rate: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """Fresh AdamW state with zero moment accumulators shaped like ``model``."""
    def zeros():
        return tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers)

    return OptimizerState(
        kind="adamw",
        learning_rate=learning_rate,
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        step=0,
        first_moment=zeros(),
        second_moment=zeros(),
    )


def same_architecture(a: ModelParameters, b: ModelParameters) -> bool:
    return a.layer_sizes == b.layer_sizes


def _require_same_architecture(a: ModelParameters, b: ModelParameters, what: str) -> None:
    if not same_architecture(a, b):
        raise ValueError(f"architecture mismatch between model and {what}: "
                         f"{a.layer_sizes} vs {b.layer_sizes}")


def _require_finite(arrays, what: str) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in {what}")


def init_mlp(layer_sizes: Sequence[int], seed: int) -> ModelParameters:
    """Seeded MLP initialization.

    Weights are drawn uniformly from +-sqrt(6 / (fan_in + fan_out)) using a
    PCG64 stream keyed by ``seed``; biases start at zero. Deterministic for
    a fixed seed.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ValueError(f"invalid architecture {sizes}: need >= 2 positive layer sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append((weights, np.zeros(fan_out)))
    return ModelParameters(layers=tuple(layers))


def forward(model: ModelParameters, batch: Batch) -> tuple[np.ndarray, ForwardCache]:
    """Logits for a batch plus the activation record needed by backward."""
    x = np.asarray(batch.inputs, dtype=np.float64)
    fan_in = model.layers[0][0].shape[1]
    if x.shape[1] != fan_in:
        raise ValueError(f"batch has {x.shape[1]} features, model expects {fan_in}")
    activations = [x]
    out = x
    last = len(model.layers) - 1
    for l, (weights, bias) in enumerate(model.layers):
        out = out @ weights.T + bias
        if l < last:
            out = np.maximum(out, 0.0)
            activations.append(out)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite logits")
    return out, ForwardCache(activations=tuple(activations))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits in softmax")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def backward(model: ModelParameters, cache: ForwardCache, grad_logits: np.ndarray) -> ModelParameters:
    """Gradients shaped like ``model`` (sum reduction over the batch)."""
    grad = np.asarray(grad_logits, dtype=np.float64)
    n_layers = len(model.layers)
    if len(cache.activations) != n_layers:
        raise ValueError("cache does not match model depth")
    batch = cache.activations[0].shape[0]
    if grad.shape != (batch, model.layers[-1][0].shape[0]):
        raise ValueError(f"grad_logits shape {grad.shape} does not match "
                         f"batch {batch} x fan_out {model.layers[-1][0].shape[0]}")
    grads: list[Layer] = []
    delta = grad
    for l in range(n_layers - 1, -1, -1):
        inputs = cache.activations[l]
        if inputs.shape != (batch, model.layers[l][0].shape[1]):
            raise ValueError(f"stale cache: layer {l} activations {inputs.shape} do not match model")
        grads.append((delta.T @ inputs, delta.sum(axis=0)))
        if l > 0:
            # inputs to layer l are post-ReLU outputs of layer l-1
            delta = (delta @ model.layers[l][0]) * (inputs > 0)
    grads.reverse()
    _require_finite((g for gw, gb in grads for g in (gw, gb)), "gradient")
    return ModelParameters(layers=tuple(grads))


def sgd_step(model: ModelParameters, grad: ModelParameters, lr: float,
             weight_decay: float = 0.0) -> ModelParameters:
    """theta' = theta - lr * (grad + weight_decay * theta), element-wise."""
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    _require_same_architecture(model, grad, "gradient")
    layers = tuple(
        (w - lr * (gw + weight_decay * w), b - lr * (gb + weight_decay * b))
        for (w, b), (gw, gb) in zip(model.layers, grad.layers)
    )
    _require_finite((a for pair in layers for a in pair), "sgd step")
    return ModelParameters(layers=layers)


def adamw_step(model: ModelParameters, grad: ModelParameters,
               state: OptimizerState) -> tuple[ModelParameters, OptimizerState]:
    """Bias-corrected Adam update with decoupled weight decay."""
    if state.kind != "adamw":
        raise ValueError(f"optimizer state kind is {state.kind!r}, expected 'adamw'")
    _require_same_architecture(model, grad, "gradient")
    moments = ModelParameters(layers=state.first_moment)
    _require_same_architecture(model, moments, "optimizer state")
    t = state.step + 1
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    lr, wd = state.learning_rate, state.weight_decay
    new_layers, new_m, new_v = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
        model.layers, grad.layers, state.first_moment, state.second_moment
    ):
        mw = state.beta1 * mw + (1.0 - state.beta1) * gw
        mb = state.beta1 * mb + (1.0 - state.beta1) * gb
        vw = state.beta2 * vw + (1.0 - state.beta2) * gw * gw
        vb = state.beta2 * vb + (1.0 - state.beta2) * gb * gb
        w2 = w - lr * ((mw / bias1) / (np.sqrt(vw / bias2) + state.eps)) - lr * wd * w
        b2 = b - lr * ((mb / bias1) / (np.sqrt(vb / bias2) + state.eps)) - lr * wd * b
        new_layers.append((w2, b2))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    _require_finite((a for pair in new_layers for a in pair), "adamw step")
    new_state = replace(state, step=t, first_moment=tuple(new_m), second_moment=tuple(new_v))
    return ModelParameters(layers=tuple(new_layers)), new_state


def combine(models: Sequence[ModelParameters], coefficients: Sequence[float]) -> ModelParameters:
    """Coefficient-weighted average: sum(c_i * theta_i) / sum(c_i).

    Coefficients are normalized first, so uniform rescaling of the whole
    coefficient vector cannot change the result. Accumulation runs in list
    order, keeping the output independent of caller scheduling.
    """
    models = list(models)
    coeffs = [float(c) for c in coefficients]
    if not models:
        raise ValueError("need at least one model to combine")
    if len(models) != len(coeffs):
        raise ValueError(f"{len(models)} models but {len(coeffs)} coefficients")
    for m in models[1:]:
        _require_same_architecture(models[0], m, "combined model")
    total = sum(coeffs)
    if not total > 0:
        raise ValueError(f"coefficient sum must be positive, got {total}")
    shares = [c / total for c in coeffs]
    acc = [
        (np.zeros_like(w), np.zeros_like(b))
        for w, b in models[0].layers
    ]
    for share, model in zip(shares, models):
        for (aw, ab), (w, b) in zip(acc, model.layers):
            aw += share * w
            ab += share * b
    layers = tuple((aw, ab) for aw, ab in acc)
    _require_finite((a for pair in layers for a in pair), "combined model")
    return ModelParameters(layers=layers)
