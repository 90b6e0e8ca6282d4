"""Round orchestration for boosted-aggregation federated training.

Strategies:

* ``fedavg``: dataset-size-weighted averaging, cross-entropy training.
* ``fedaboost``: clients are weighted by an error-derived alpha when
  aggregating, and underperforming clients are boosted by raising their
  focal-loss focusing parameter between rounds.
* ``fedaboost-noboost``: alpha-weighted aggregation only; boost state is
  frozen (the ablation arm).
* ``ditto``: fedavg-style global training plus one personal model per
  client, regularized toward the global model; metrics come from the
  personal models.

Client updates within a round are pure functions of the global-model
snapshot, the client state, and a dedicated per-(client, round) RNG
stream, so they can run on any number of workers without changing the
result; aggregation always accumulates in ascending client-id order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from . import seeds
from .data import ClientDataset, Dataset
from .losses import FocalLossParams, clamp_gamma, cross_entropy, focal_loss
from .metrics import (
    ConfusionMatrix,
    accuracy,
    average_loss,
    error_rate,
    macro_f1,
    performance_variance,
    present_label_f1,
)
from .nn import (
    Batch,
    ModelParameters,
    adamw_state,
    adamw_step,
    backward,
    combine,
    forward,
    init_mlp,
    same_architecture,
    sgd_step,
    softmax,
)


class Strategy(str, Enum):
    FEDAVG = "fedavg"
    FEDABOOST = "fedaboost"
    FEDABOOST_NOBOOST = "fedaboost-noboost"
    DITTO = "ditto"


ALPHA_STRATEGIES = (Strategy.FEDABOOST, Strategy.FEDABOOST_NOBOOST)


@dataclass(frozen=True)
class FederationConfig:
    total_clients: int
    total_rounds: int
    strategy: Strategy
    participation_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    hidden_layers: tuple[int, ...] = (128,)
    optimizer: str = "sgd"  # "sgd" | "adamw"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eta: float = 0.01
    error_threshold: float = 0.3
    epsilon: float = 1e-6
    beta: float = 1.0
    ditto_lambda: float = 0.1
    # Alternative reading of the gamma rule: increment for every
    # participant, not only those failing the error threshold.
    gamma_increment_all: bool = False
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.total_clients < 1:
            raise ValueError("total_clients must be >= 1")
        if self.total_rounds < 0:
            raise ValueError("total_rounds must be >= 0")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must be in (0, 1]")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer sizes must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if not 0.0 < self.error_threshold < 1.0:
            raise ValueError("error_threshold must be in (0, 1)")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must be in (0, 0.5)")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.ditto_lambda < 0:
            raise ValueError("ditto_lambda must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class ClientBoostState:
    weight: float
    gamma: float = 0.0
    last_alpha: float = 0.0
    participation_count: int = 0

    def __post_init__(self):
        if not math.isfinite(self.weight) or self.weight <= 0:
            raise ValueError(f"boost weight must be finite and > 0, got {self.weight}")
        if not 0.0 <= self.gamma <= 5.0:
            raise ValueError(f"gamma must be in [0, 5], got {self.gamma}")


@dataclass(frozen=True)
class ClientState:
    data: ClientDataset
    boost: ClientBoostState


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    model: ModelParameters
    alpha: float
    error_rate: float  # clipped to [epsilon, 1 - epsilon]
    local_val_f1: float
    local_val_loss: float


@dataclass(frozen=True)
class ClientRoundRow:
    client_id: int
    f1: float
    loss: float
    alpha: float
    weight: float
    gamma: float
    participated: bool


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    global_f1: float
    global_accuracy: float
    avg_loss: float
    var_f1: float
    participants: int
    clients: tuple[ClientRoundRow, ...]


@dataclass(frozen=True)
class FederationState:
    round_index: int  # 1-based index of the next round to run
    global_model: ModelParameters
    clients: dict[int, ClientState]
    personal_models: dict[int, ModelParameters] | None = None  # ditto only


def compute_alpha(error: float, class_count: int, epsilon: float = 1e-6) -> float:
    """Aggregation weight ln((1-E)/E) + ln(C-1) from a local error rate.

    The error is clipped into [epsilon, 1 - epsilon] first so the weight
    stays finite; the result is positive exactly when the clipped accuracy
    1 - E beats random guessing 1/C.
    """
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if math.isnan(error) or not 0.0 <= error <= 1.0:
        raise ValueError(f"error rate must be in [0, 1], got {error}")
    if not 0.0 < epsilon < 0.5:
        raise ValueError("epsilon must be in (0, 0.5)")
    e = min(max(error, epsilon), 1.0 - epsilon)
    return math.log((1.0 - e) / e) + math.log(class_count - 1)


def update_boost_weight(w_prev: float, alpha: float, meets_threshold: bool, eta: float) -> float:
    """Multiplicative boost-weight update w * exp(-eta * alpha * I).

    The indicator I is 0 once the client meets the error threshold, which
    freezes its weight; otherwise negative alpha (a weak client) grows the
    weight and positive alpha shrinks it.
    """
    if w_prev <= 0:
        raise ValueError("boost weight must be > 0")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    if meets_threshold:
        return w_prev
    return w_prev * math.exp(-eta * alpha)


def update_gamma(state: ClientBoostState) -> ClientBoostState:
    """Raise the focusing parameter by the current boost weight (clamped to [0, 5])."""
    return replace(state, gamma=clamp_gamma(state.gamma + state.weight))


def sample_clients(client_ids: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of max(1, round-half-up(fraction * k)) ids."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    ids = sorted(client_ids)
    m = sample_size(len(ids), fraction)
    chosen = rng.choice(len(ids), size=m, replace=False)
    return sorted(ids[i] for i in chosen)


def sample_size(total: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * total + 0.5)))


def _scores(model: ModelParameters, dataset: Dataset) -> tuple[float, float, np.ndarray]:
    """(present-label macro-F1, cross-entropy loss, predictions) on a dataset."""
    logits, _ = forward(model, Batch(inputs=dataset.features, labels=dataset.labels))
    probs = softmax(logits)
    loss, _ = cross_entropy(probs, dataset.labels)
    preds = np.argmax(probs, axis=1)
    return present_label_f1(dataset.labels, preds), loss, preds


def _train_local(model: ModelParameters, train: Dataset, config: FederationConfig,
                 rng: np.random.Generator,
                 loss_fn: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]) -> ModelParameters:
    """local_epochs of minibatch training; optimizer state is per-call."""
    opt_state = None
    if config.optimizer == "adamw":
        opt_state = adamw_state(model, config.learning_rate, config.weight_decay,
                                config.adam_beta1, config.adam_beta2, config.adam_eps)
    for _ in range(config.local_epochs):
        order = rng.permutation(train.n)
        for start in range(0, train.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Batch(inputs=train.features[idx], labels=train.labels[idx])
            logits, cache = forward(model, batch)
            probs = softmax(logits)
            _, grad_logits = loss_fn(probs, batch.labels)
            grad = backward(model, cache, grad_logits)
            if opt_state is None:
                model = sgd_step(model, grad, config.learning_rate, config.weight_decay)
            else:
                model, opt_state = adamw_step(model, grad, opt_state)
    return model


def client_update(client: ClientState, global_model: ModelParameters,
                  config: FederationConfig, rng: np.random.Generator) -> tuple[ClientReport, ClientBoostState]:
    """One client's round: boost bookkeeping, local training, report.

    The received global model is first scored on the local validation set;
    under the boosting strategy that pre-training error drives the weight
    update (and through it gamma) before training starts, so the boost
    applies to the round that observed the poor performance. The report
    carries the post-training alpha used for aggregation.
    """
    data = client.data
    boost = client.boost
    e_pre = error_rate(global_model, data.validation)

    if config.strategy is Strategy.FEDABOOST:
        alpha_pre = compute_alpha(e_pre, data.class_count_local, config.epsilon)
        meets = e_pre <= config.error_threshold
        boost = replace(
            boost,
            weight=update_boost_weight(boost.weight, alpha_pre, meets, config.eta),
        )
        if not meets or config.gamma_increment_all:
            boost = update_gamma(boost)

    if config.strategy is Strategy.FEDABOOST:
        params = FocalLossParams(gamma=boost.gamma, beta=config.beta)

        def loss_fn(probs, labels):
            return focal_loss(probs, labels, params)
    else:
        loss_fn = cross_entropy

    model = _train_local(global_model, data.train, config, rng, loss_fn)

    val_f1, val_loss, preds = _scores(model, data.validation)
    e_post = float(np.mean(preds != data.validation.labels))
    alpha_post = compute_alpha(e_post, data.class_count_local, config.epsilon)
    boost = replace(
        boost,
        last_alpha=alpha_post,
        participation_count=boost.participation_count + 1,
    )
    report = ClientReport(
        client_id=data.client_id,
        model=model,
        alpha=alpha_post,
        error_rate=min(max(e_post, config.epsilon), 1.0 - config.epsilon),
        local_val_f1=val_f1,
        local_val_loss=val_loss,
    )
    return report, boost


def aggregate_fedaboost(reports: Sequence[ClientReport],
                        previous: ModelParameters) -> ModelParameters:
    """Alpha-weighted model average; reports with alpha <= 0 are ignored.

    If every report is filtered out the previous global model is returned
    unchanged (the weighted average is undefined for a non-positive weight
    sum, so the round stalls conservatively).
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    kept = [r for r in reports if r.alpha > 0]
    if not kept:
        return previous
    return combine([r.model for r in kept], [r.alpha for r in kept])


def aggregate_fedavg(reports: Sequence[tuple[ModelParameters, int]]) -> ModelParameters:
    """Dataset-size-weighted model average."""
    if not reports:
        raise ValueError("no reports to aggregate")
    if any(size <= 0 for _, size in reports):
        raise ValueError("training sizes must be > 0")
    return combine([m for m, _ in reports], [float(size) for _, size in reports])


def proximal_step(model: ModelParameters, grad: ModelParameters,
                  anchor: ModelParameters, lam: float, lr: float) -> ModelParameters:
    """One SGD step on loss + (lam/2) * ||model - anchor||^2.

    theta' = theta - lr * (grad + lam * (theta - anchor)); with zero data
    gradient the distance to the anchor contracts by (1 - lr*lam) per step
    whenever lr * lam < 1.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    if not same_architecture(model, anchor):
        raise ValueError("model and anchor architectures differ")
    if not same_architecture(model, grad):
        raise ValueError("model and gradient architectures differ")
    layers = tuple(
        (w - lr * (gw + lam * (w - aw)), b - lr * (gb + lam * (b - ab)))
        for (w, b), (gw, gb), (aw, ab) in zip(model.layers, grad.layers, anchor.layers)
    )
    return ModelParameters(layers=layers)


def ditto_personal_update(personal: ModelParameters, global_model: ModelParameters,
                          client: ClientState, lam: float, config: FederationConfig,
                          rng: np.random.Generator) -> ModelParameters:
    """Train a client's personal model with a pull toward the global model.

    Cross-entropy data gradient plus lam * (personal - global), plain SGD.
    With lam = 0 this is independent local training of the personal model.
    """
    if not same_architecture(personal, global_model):
        raise ValueError("personal and global architectures differ")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    model = personal
    train = client.data.train
    for _ in range(config.local_epochs):
        order = rng.permutation(train.n)
        for start in range(0, train.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Batch(inputs=train.features[idx], labels=train.labels[idx])
            logits, cache = forward(model, batch)
            probs = softmax(logits)
            _, grad_logits = cross_entropy(probs, batch.labels)
            grad = backward(model, cache, grad_logits)
            model = proximal_step(model, grad, global_model, lam, config.learning_rate)
    return model


def _global_rows(state: FederationState, new_global: ModelParameters,
                 personal: Mapping[int, ModelParameters] | None,
                 sampled: set[int],
                 boosts: Mapping[int, ClientBoostState]) -> tuple[list[ClientRoundRow], float, float, float, float]:
    """Score every client's holdout; ditto clients are scored on their personal model."""
    rows: list[ClientRoundRow] = []
    f1s: list[float] = []
    losses: list[float] = []
    all_true: list[np.ndarray] = []
    all_pred: list[np.ndarray] = []
    class_count = None
    for j in sorted(state.clients):
        holdout = state.clients[j].data.holdout
        class_count = holdout.class_count
        eval_model = personal[j] if personal is not None else new_global
        f1, loss, preds = _scores(eval_model, holdout)
        f1s.append(f1)
        losses.append(loss)
        all_true.append(holdout.labels)
        all_pred.append(preds)
        b = boosts[j]
        rows.append(ClientRoundRow(
            client_id=j,
            f1=f1,
            loss=loss,
            alpha=b.last_alpha,
            weight=b.weight,
            gamma=b.gamma,
            participated=j in sampled,
        ))
    cm = ConfusionMatrix.from_predictions(
        np.concatenate(all_true), np.concatenate(all_pred), class_count
    )
    return rows, macro_f1(cm), accuracy(cm), average_loss(losses), performance_variance(f1s)


def run_round(state: FederationState, config: FederationConfig) -> tuple[FederationState, RoundLog]:
    """One global round: sample, update clients, aggregate, evaluate.

    Boost-state changes apply only to sampled clients. The new global
    model is scored on every client's holdout set, participants or not,
    since fairness variance is defined over the full federation.
    """
    e = state.round_index
    ids = sorted(state.clients)
    rng_sample = seeds.spawn_rng(config.seed, seeds.SAMPLING, e)
    sampled = sample_clients(ids, config.participation_fraction, rng_sample)
    snapshot = state.global_model

    def job(j: int) -> tuple[ClientReport, ClientBoostState]:
        rng = seeds.spawn_rng(config.seed, seeds.CLIENT, j, e)
        return client_update(state.clients[j], snapshot, config, rng)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = dict(zip(sampled, pool.map(job, sampled)))
    else:
        results = {j: job(j) for j in sampled}

    new_clients = dict(state.clients)
    for j in sampled:
        new_clients[j] = replace(state.clients[j], boost=results[j][1])

    ordered_reports = [results[j][0] for j in sorted(sampled)]
    if config.strategy in ALPHA_STRATEGIES:
        new_global = aggregate_fedaboost(ordered_reports, snapshot)
    else:
        new_global = aggregate_fedavg([
            (results[j][0].model, state.clients[j].data.train.n) for j in sorted(sampled)
        ])

    new_personal = state.personal_models
    if config.strategy is Strategy.DITTO:
        new_personal = dict(state.personal_models)
        for j in sorted(sampled):
            rng_p = seeds.spawn_rng(config.seed, seeds.PERSONAL, j, e)
            new_personal[j] = ditto_personal_update(
                new_personal[j], snapshot, state.clients[j], config.ditto_lambda, config, rng_p
            )

    boosts = {j: c.boost for j, c in new_clients.items()}
    rows, global_f1, global_acc, avg_loss, var_f1 = _global_rows(
        state, new_global, new_personal if config.strategy is Strategy.DITTO else None,
        set(sampled), boosts,
    )
    log = RoundLog(
        round_index=e,
        global_f1=global_f1,
        global_accuracy=global_acc,
        avg_loss=avg_loss,
        var_f1=var_f1,
        participants=len(sampled),
        clients=tuple(rows),
    )
    new_state = replace(
        state,
        round_index=e + 1,
        global_model=new_global,
        clients=new_clients,
        personal_models=new_personal,
    )
    return new_state, log


def initialize_state(config: FederationConfig,
                     clients: Mapping[int, ClientDataset] | Sequence[ClientDataset]) -> FederationState:
    """Initial federation state: seeded global model, uniform boost weights.

    Every client starts with weight 1/m0 (m0 = per-round sample size) and
    gamma 0; clients joining later inherit the same initial weight on
    first participation.
    """
    if isinstance(clients, Mapping):
        by_id = dict(clients)
    else:
        by_id = {cd.client_id: cd for cd in clients}
    expected = set(range(1, config.total_clients + 1))
    if set(by_id) != expected:
        raise ValueError(f"client ids must be exactly 1..{config.total_clients}")
    dims = {cd.train.feature_dim for cd in by_id.values()}
    class_counts = {cd.train.class_count for cd in by_id.values()}
    if len(dims) != 1 or len(class_counts) != 1:
        raise ValueError("clients disagree on feature dimension or class count")
    layer_sizes = (dims.pop(), *config.hidden_layers, class_counts.pop())
    model = init_mlp(layer_sizes, seeds.spawn_seed(config.seed, seeds.INIT))
    m0 = sample_size(config.total_clients, config.participation_fraction)
    boost = ClientBoostState(weight=1.0 / m0)
    client_states = {j: ClientState(data=cd, boost=boost) for j, cd in by_id.items()}
    personal = None
    if config.strategy is Strategy.DITTO:
        personal = {j: model for j in by_id}
    return FederationState(
        round_index=1,
        global_model=model,
        clients=client_states,
        personal_models=personal,
    )


def run_experiment(config: FederationConfig,
                   clients: Mapping[int, ClientDataset] | Sequence[ClientDataset]) -> list[RoundLog]:
    """Initialize and run total_rounds rounds, returning all round logs."""
    state = initialize_state(config, clients)
    logs: list[RoundLog] = []
    for _ in range(config.total_rounds):
        state, log = run_round(state, config)
        logs.append(log)
    return logs
