"""Shared test helpers: gradient oracles, tiny fixtures, IDX writing."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from fedaboost.data import ClientDataset, Dataset, dirichlet_partition, gen_synthetic, split_client, subset
from fedaboost.nn import Batch, ModelParameters, backward, forward, init_mlp, softmax


def loss_value(model: ModelParameters, batch: Batch, loss_fn) -> float:
    logits, _ = forward(model, batch)
    return loss_fn(softmax(logits), batch.labels)[0]


def analytic_grad(model: ModelParameters, batch: Batch, loss_fn) -> ModelParameters:
    logits, cache = forward(model, batch)
    _, grad_logits = loss_fn(softmax(logits), batch.labels)
    return backward(model, cache, grad_logits)


def perturbed(model: ModelParameters, layer: int, which: int, flat_index: int,
              delta: float) -> ModelParameters:
    """Copy of the model with one scalar parameter shifted by delta."""
    layers = []
    for li, (w, b) in enumerate(model.layers):
        w, b = w.copy(), b.copy()
        if li == layer:
            target = w if which == 0 else b
            target.ravel()[flat_index] += delta
        layers.append((w, b))
    return ModelParameters(layers=tuple(layers))


def numeric_grad(model: ModelParameters, batch: Batch, loss_fn,
                 step: float = 1e-5) -> ModelParameters:
    """Central finite differences over every scalar parameter."""
    layers = []
    for li, (w, b) in enumerate(model.layers):
        grads = []
        for which, arr in enumerate((w, b)):
            g = np.zeros_like(arr)
            for i in range(arr.size):
                up = loss_value(perturbed(model, li, which, i, +step), batch, loss_fn)
                down = loss_value(perturbed(model, li, which, i, -step), batch, loss_fn)
                g.ravel()[i] = (up - down) / (2.0 * step)
            grads.append(g)
        layers.append((grads[0], grads[1]))
    return ModelParameters(layers=tuple(layers))


def grad_agreement(analytic: ModelParameters, numeric: ModelParameters,
                   rel_tol: float = 1e-4, abs_floor: float = 1e-8) -> float:
    """Fraction of entries where analytic and numeric gradients agree."""
    ok = total = 0
    for (aw, ab), (nw, nb) in zip(analytic.layers, numeric.layers):
        for a, n in ((aw, nw), (ab, nb)):
            diff = np.abs(a - n)
            tol = np.maximum(abs_floor, rel_tol * np.abs(n))
            ok += int((diff <= tol).sum())
            total += a.size
    return ok / total


def flatten_model(model: ModelParameters) -> np.ndarray:
    return np.concatenate([a.ravel() for w, b in model.layers for a in (w, b)])


def models_equal(a: ModelParameters, b: ModelParameters) -> bool:
    """Bit-exact parameter equality."""
    return all(
        np.array_equal(aw, bw) and np.array_equal(ab, bb)
        for (aw, ab), (bw, bb) in zip(a.layers, b.layers)
    )


def random_batch(rng: np.random.Generator, n: int, features: int, classes: int) -> Batch:
    return Batch(
        inputs=rng.standard_normal((n, features)),
        labels=rng.integers(0, classes, size=n),
    )


def write_idx_pair(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write a big-endian IDX image/label file pair."""
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, n, rows, cols))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def make_clients(classes=3, dims=8, per_class=120, k=4, concentration=0.5,
                 separation=4.0, seed=11, min_per_client=20) -> dict[int, ClientDataset]:
    """Small synthetic federation used across federation/cli tests."""
    pool = gen_synthetic(classes=classes, dims=dims, per_class=per_class,
                         separation=separation, seed=seed)
    shards = dirichlet_partition(pool, k=k, concentration=concentration,
                                 seed=seed + 1, min_per_client=min_per_client)
    return {
        i: split_client(subset(pool, s), 0.2, 0.2, seed=seed + 10 + i, client_id=i)
        for i, s in enumerate(shards, start=1)
    }


@pytest.fixture
def tiny_model() -> ModelParameters:
    return init_mlp([5, 6, 4], seed=123)  # 5*6+6 + 6*4+4 = 64 params


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(2024)
