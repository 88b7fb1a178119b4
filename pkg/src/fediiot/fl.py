"""Synchronous FedAvg rounds: select, broadcast, train locally, upload, aggregate.

Server-side values (:class:`ClientUpdate`, :class:`RoundRecord`, the global
:class:`ParamSet`) carry parameters and scalars only. Dataset rows stay inside
:func:`local_train` and the client-side :class:`ClientNode` objects.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import LabeledDataset
from .nn import ModelSpec, OptimizerState, ParamSet, apply_update, backward, forward, softmax_cross_entropy
from .nn.model import check_params
from .rng import substream
from .simnet import Delivery, NetConfig, deliver, round_wall_time


class ConfigError(ValueError):
    pass


class ClientTrainingError(RuntimeError):
    def __init__(self, client_id: int, cause: BaseException):
        super().__init__(f"client {client_id}: {cause}")
        self.client_id = client_id


AGGREGATIONS = ("uniform", "sample_weighted")


@dataclass(frozen=True)
class ConvergenceCriterion:
    loss_delta_tol: float = 1e-4
    patience: int = 3
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.loss_delta_tol <= 0 or self.patience < 1:
            raise ConfigError("convergence needs loss_delta_tol > 0 and patience >= 1")


@dataclass
class FederationConfig:
    num_clients: int
    rounds_max: int = 10
    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    optimizer: OptimizerState = field(default_factory=OptimizerState.adam)
    aggregation: str = "sample_weighted"
    # None runs exactly rounds_max rounds
    convergence: ConvergenceCriterion | None = field(default_factory=ConvergenceCriterion)
    seed: int = 0
    workers: int = 1
    net: NetConfig | None = None

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError("client_fraction must lie in (0, 1]")
        if self.rounds_max < 0 or self.local_epochs < 0:
            raise ConfigError("rounds_max and local_epochs must be >= 0")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class ClientUpdate:
    client_id: int
    params: ParamSet
    n_samples: int
    local_loss: float = math.nan
    local_accuracy: float | None = None

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("an update must come from at least one sample")


@dataclass
class RoundRecord:
    round_index: int
    selected: list[int]
    delivered: list[int]
    global_loss: float
    fed_accuracy: float
    wall_ms: float
    deliveries: list[Delivery] = field(default_factory=list)
    gan: object | None = None  # fedgan.GanRoundMetrics for GAN rounds


def select_clients(pool_size: int, fraction: float, round_index: int, seed: int) -> list[int]:
    if pool_size < 1:
        raise ConfigError("client pool is empty")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("client_fraction must lie in (0, 1]")
    # the small slack keeps e.g. 0.3 * 10 from rounding up to 4
    k = max(1, math.ceil(fraction * pool_size - 1e-9))
    if k >= pool_size:
        return list(range(pool_size))
    rng = substream(seed, "select", round_index)
    return sorted(int(c) for c in rng.choice(pool_size, size=k, replace=False))


def evaluate(params: ParamSet, spec: ModelSpec, data: LabeledDataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of a classifier on ``data``."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.features[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        out, _ = forward(params, spec, x)
        loss, _ = softmax_cross_entropy(out, y)
        total_loss += loss * len(y)
        correct += int(np.sum(np.argmax(out, axis=1) == y))
    return total_loss / len(data), correct / len(data)


def local_train(
    global_params: ParamSet,
    spec: ModelSpec,
    partition: LabeledDataset,
    config: FederationConfig,
    *,
    client_id: int = 0,
    round_index: int = 0,
    opt_state: OptimizerState | None = None,
) -> tuple[ClientUpdate, OptimizerState]:
    """Minibatch training of a copy of ``global_params`` on one client's rows.

    Loss and accuracy are running averages over the last local epoch. With zero
    local epochs the model is only evaluated. The returned optimizer state stays
    with the client; it is never uploaded.
    """
    n = len(partition)
    if n == 0:
        raise ValueError(f"client {client_id} has no local data")
    check_params(global_params, spec)
    params = global_params.copy()
    state = opt_state if opt_state is not None else config.optimizer.fresh()
    if config.local_epochs == 0:
        loss, acc = evaluate(params, spec, partition)
        return ClientUpdate(client_id, params, n, loss, acc), state
    x_all, y_all = partition.features, partition.labels
    for epoch in range(config.local_epochs):
        order = substream(config.seed, "shuffle", client_id, round_index, epoch).permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, cache = forward(params, spec, x_all[idx])
            loss, grad_out = softmax_cross_entropy(out, y_all[idx])
            grads = backward(params, spec, cache, grad_out)
            params, state = apply_update(params, grads, state)
            total_loss += loss * idx.size
            correct += int(np.sum(np.argmax(out, axis=1) == y_all[idx]))
    return ClientUpdate(client_id, params, n, total_loss / n, correct / n), state


def aggregation_weights(updates: Sequence[ClientUpdate], mode: str) -> np.ndarray:
    if mode == "uniform":
        return np.full(len(updates), 1.0 / len(updates))
    if mode == "sample_weighted":
        n = np.array([u.n_samples for u in updates], dtype=np.float64)
        return n / n.sum()
    raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")


def aggregate(updates: Sequence[ClientUpdate], mode: str = "sample_weighted") -> ParamSet:
    """Weighted parameter average, reduced in ascending client-id order.

    Computed as ``p0 + sum_i w_i (p_i - p0)`` around the lowest-id update, which
    equals ``sum_i w_i p_i`` and reproduces identical inputs exactly.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    anchor = ordered[0].params
    for u in ordered[1:]:
        if u.params.spec_id != anchor.spec_id or u.params.values.shape != anchor.values.shape:
            raise ValueError(f"update from client {u.client_id} has a different model spec")
    weights = aggregation_weights(ordered, mode)
    acc = np.zeros_like(anchor.values)
    for w, u in zip(weights[1:], ordered[1:]):
        acc += w * (u.params.values - anchor.values)
    return ParamSet(anchor.values + acc, anchor.spec_id)


def federated_accuracy(per_client_accuracy: Sequence[float]) -> float:
    """Sum of client accuracies divided by the number of clients."""
    if len(per_client_accuracy) == 0:
        raise ValueError("no client accuracies to average")
    return math.fsum(per_client_accuracy) / len(per_client_accuracy)


def has_converged(history: Sequence[RoundRecord], criterion: ConvergenceCriterion | None) -> bool:
    """True once the last ``patience`` loss deltas are all below tolerance,
    or the latest federated accuracy reaches the target."""
    if criterion is None or not history:
        return False
    if criterion.target_accuracy is not None and history[-1].fed_accuracy >= criterion.target_accuracy:
        return True
    streak = 0
    for prev, cur in zip(reversed(history[:-1]), reversed(history)):
        if abs(cur.global_loss - prev.global_loss) < criterion.loss_delta_tol:
            streak += 1
            if streak >= criterion.patience:
                return True
        else:
            break
    return False


@dataclass
class ClientNode:
    """Client-side state: local rows and the optimizer state kept between rounds."""

    client_id: int
    data: LabeledDataset
    opt_state: OptimizerState | None = None


@dataclass
class FederationState:
    config: FederationConfig
    spec: ModelSpec
    global_params: ParamSet
    clients: list[ClientNode]
    history: list[RoundRecord] = field(default_factory=list)


def _map_clients(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def transmit(updates: list, net: NetConfig | None, round_index: int) -> tuple[list, list[Delivery], float]:
    """Pushes uploads through the simulated network; no net means instant, lossless delivery."""
    if net is None:
        ordered = sorted(updates, key=lambda u: u.client_id)
        return ordered, [Delivery(u.client_id, 0.0, 0.0) for u in ordered], 0.0
    delivered, log = deliver(updates, net, round_index)
    return delivered, log, round_wall_time(log)


def run_round(state: FederationState, round_index: int) -> tuple[ParamSet, RoundRecord]:
    cfg = state.config
    selected = select_clients(len(state.clients), cfg.client_fraction, round_index, cfg.seed)
    broadcast = state.global_params.copy()

    def train(cid: int) -> tuple[ClientUpdate, OptimizerState]:
        node = state.clients[cid]
        try:
            return local_train(broadcast, state.spec, node.data, cfg, client_id=cid,
                               round_index=round_index, opt_state=node.opt_state)
        except Exception as exc:
            raise ClientTrainingError(cid, exc) from exc

    results = _map_clients(train, selected, cfg.workers)
    for cid, (_, opt) in zip(selected, results):
        state.clients[cid].opt_state = opt
    updates = [u for u, _ in results]
    delivered, log, wall = transmit(updates, cfg.net, round_index)
    if delivered:
        new_global = aggregate(delivered, cfg.aggregation)
        w = aggregation_weights(delivered, "sample_weighted")
        loss = float(np.dot(w, [u.local_loss for u in delivered]))
        acc = federated_accuracy([u.local_accuracy for u in delivered])
    else:
        # nothing arrived: keep the model and carry the previous metrics forward
        new_global = state.global_params
        prev = state.history[-1] if state.history else None
        loss = prev.global_loss if prev else math.nan
        acc = prev.fed_accuracy if prev else 0.0
    record = RoundRecord(round_index, selected, [u.client_id for u in delivered], loss, acc, wall, log)
    return new_global, record


@dataclass
class ClassifierTask:
    spec: ModelSpec
    client_data: list[LabeledDataset]
    initial: ParamSet


@dataclass
class FederationResult:
    history: list[RoundRecord]
    final: ParamSet
    elapsed_s: float = 0.0


def run_federation(
    config: FederationConfig,
    task,
    on_round: Callable[[int, ParamSet, RoundRecord], None] | None = None,
):
    """Iterates rounds until convergence or ``rounds_max``.

    ``task`` is a :class:`ClassifierTask` or a ``fedgan.GanTask``; the latter is
    handed to :func:`fediiot.fedgan.run_fed_gan`.
    """
    config.validate()
    if not isinstance(task, ClassifierTask):
        from .fedgan import GanTask, run_fed_gan

        if isinstance(task, GanTask):
            return run_fed_gan(config, task, on_round=on_round)
        raise ConfigError(f"unsupported task type {type(task).__name__}")
    if len(task.client_data) != config.num_clients:
        raise ConfigError(f"{len(task.client_data)} client datasets for num_clients={config.num_clients}")
    check_params(task.initial, task.spec)
    started = time.perf_counter()
    state = FederationState(
        config, task.spec, task.initial.copy(),
        [ClientNode(i, d) for i, d in enumerate(task.client_data)],
    )
    for r in range(config.rounds_max):
        state.global_params, record = run_round(state, r)
        state.history.append(record)
        if on_round is not None:
            on_round(r, state.global_params, record)
        if has_converged(state.history, config.convergence):
            break
    return FederationResult(state.history, state.global_params.copy(), time.perf_counter() - started)


def train_centralized(
    initial: ParamSet,
    spec: ModelSpec,
    data: LabeledDataset,
    optimizer: OptimizerState,
    epochs: int,
    batch_size: int,
    seed: int,
    on_epoch: Callable[[int, ParamSet, float, float], None] | None = None,
) -> ParamSet:
    """Plain single-trainer loop over pooled data.

    Epoch ``t`` shuffles with the same stream a lone federated client uses in
    round ``t``, so a one-client federation retraces this loop exactly.
    """
    check_params(initial, spec)
    params = initial.copy()
    state = optimizer.fresh()
    n = len(data)
    for epoch in range(epochs):
        order = substream(seed, "shuffle", 0, epoch, 0).permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = forward(params, spec, data.features[idx])
            loss, grad_out = softmax_cross_entropy(out, data.labels[idx])
            params, state = apply_update(params, backward(params, spec, cache, grad_out), state)
            total_loss += loss * idx.size
            correct += int(np.sum(np.argmax(out, axis=1) == data.labels[idx]))
        if on_epoch is not None:
            on_epoch(epoch, params, total_loss / n, correct / n)
    return params
