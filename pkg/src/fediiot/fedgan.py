"""Per-institution GANs trained by alternating updates and federated by parameter averaging.

A :class:`GanPair` may be class-conditional: a one-hot label of width
``cond_dim`` is appended both to the generator's noise and to the
discriminator's input, so synthetic rows come out labelled.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import DataError, LabeledDataset
from .fl import (
    ClientTrainingError,
    ClientUpdate,
    ConfigError,
    FederationConfig,
    RoundRecord,
    aggregate,
    aggregation_weights,
    federated_accuracy,
    has_converged,
    select_clients,
    transmit,
    _map_clients,
)
from .nn import (
    ModelSpec,
    OptimizerState,
    ParamSet,
    ShapeError,
    apply_update,
    backward,
    backward_with_input,
    bce_loss,
    forward,
    init_model,
    mlp_spec,
)
from .nn.model import check_params
from .rng import substream


@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 16
    hidden: int = 128
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    train_generator: bool = True
    # decay of the server-side moving average of global generator weights; 0 disables
    gen_ema: float = 0.0

    def optimizer(self) -> OptimizerState:
        return OptimizerState.adam(self.lr, self.beta1, self.beta2)


@dataclass
class GanPair:
    gen_params: ParamSet
    disc_params: ParamSet
    gen_spec: ModelSpec
    disc_spec: ModelSpec
    noise_dim: int
    cond_dim: int = 0

    def __post_init__(self):
        if self.noise_dim < 1 or self.cond_dim < 0:
            raise ShapeError("noise_dim must be >= 1 and cond_dim >= 0")
        check_params(self.gen_params, self.gen_spec)
        check_params(self.disc_params, self.disc_spec)
        if self.gen_spec.input_shape != (self.noise_dim + self.cond_dim,):
            raise ShapeError("generator input must be noise_dim + cond_dim wide")
        if self.gen_spec.output_shape != (self.data_dim,):
            raise ShapeError("generator output must be flat")
        if self.disc_spec.input_shape != (self.data_dim + self.cond_dim,):
            raise ShapeError("discriminator input must match generator output plus condition")
        if self.disc_spec.output_shape != (1,):
            raise ShapeError("discriminator must output a single probability")

    @property
    def data_dim(self) -> int:
        return self.gen_spec.output_shape[0]

    def copy(self) -> "GanPair":
        return replace(self, gen_params=self.gen_params.copy(), disc_params=self.disc_params.copy())


def build_gan(data_dim: int, noise_dim: int, hidden: int = 128, cond_dim: int = 0,
              out_activation: str | None = "sigmoid", seed: int = 0) -> GanPair:
    """Two-hidden-layer MLP generator and discriminator."""
    gen_spec = mlp_spec([noise_dim + cond_dim, hidden, hidden, data_dim], head=out_activation)
    disc_spec = mlp_spec([data_dim + cond_dim, hidden, hidden, 1], head="sigmoid")
    return GanPair(
        init_model(gen_spec, substream(seed, "gan_init", 0).integers(2**62)),
        init_model(disc_spec, substream(seed, "gan_init", 1).integers(2**62)),
        gen_spec, disc_spec, noise_dim, cond_dim,
    )


@dataclass
class GanRoundMetrics:
    d_loss: float
    g_loss: float
    d_real_mean: float
    d_fake_mean: float
    d_accuracy: float = math.nan


def sample_noise(batch: int, noise_dim: int, rng: np.random.Generator) -> np.ndarray:
    if batch < 1 or noise_dim < 1:
        raise ValueError("batch and noise_dim must be >= 1")
    return rng.standard_normal((batch, noise_dim))


def _onehot(labels: np.ndarray | None, width: int, n: int) -> np.ndarray:
    if width == 0:
        return np.empty((n, 0))
    if labels is None or len(labels) != n:
        raise ShapeError("a conditional GAN needs one label per row")
    out = np.zeros((n, width))
    out[np.arange(n), labels] = 1.0
    return out


def generate(pair: GanPair, z: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
    cond = _onehot(labels, pair.cond_dim, z.shape[0])
    out, _ = forward(pair.gen_params, pair.gen_spec, np.hstack([z, cond]))
    return out


def discriminator_step(pair: GanPair, real_batch: np.ndarray, rng: np.random.Generator,
                       labels: np.ndarray | None = None) -> tuple[ParamSet, GanRoundMetrics]:
    """Discriminator gradient of ``BCE(D(real), 1) + BCE(D(fake), 0)`` with the generator frozen."""
    real = np.asarray(real_batch, dtype=np.float64)
    n = real.shape[0]
    if n == 0:
        raise ValueError("real batch is empty")
    if real.ndim != 2 or real.shape[1] != pair.data_dim:
        raise ShapeError(f"real batch must be (n, {pair.data_dim}), got {real.shape}")
    cond = _onehot(labels, pair.cond_dim, n)
    fake = generate(pair, sample_noise(n, pair.noise_dim, rng), labels)
    d_real, c_real = forward(pair.disc_params, pair.disc_spec, np.hstack([real, cond]))
    d_fake, c_fake = forward(pair.disc_params, pair.disc_spec, np.hstack([fake, cond]))
    l_real, g_real = bce_loss(d_real, 1.0)
    l_fake, g_fake = bce_loss(d_fake, 0.0)
    grads = backward(pair.disc_params, pair.disc_spec, c_real, g_real).values
    grads = grads + backward(pair.disc_params, pair.disc_spec, c_fake, g_fake).values
    metrics = GanRoundMetrics(
        d_loss=l_real + l_fake,
        g_loss=math.nan,
        d_real_mean=float(d_real.mean()),
        d_fake_mean=float(d_fake.mean()),
        d_accuracy=0.5 * (float(np.mean(d_real > 0.5)) + float(np.mean(d_fake < 0.5))),
    )
    return ParamSet(grads, pair.disc_spec.spec_id), metrics


def generator_step(pair: GanPair, batch: int, rng: np.random.Generator,
                   labels: np.ndarray | None = None) -> tuple[ParamSet, float]:
    """Generator gradient of the non-saturating loss ``BCE(D(G(z)), 1)``.

    The discriminator is only read; its gradient is discarded.
    """
    z = sample_noise(batch, pair.noise_dim, rng)
    cond = _onehot(labels, pair.cond_dim, batch)
    fake, g_cache = forward(pair.gen_params, pair.gen_spec, np.hstack([z, cond]))
    d_fake, d_cache = forward(pair.disc_params, pair.disc_spec, np.hstack([fake, cond]))
    loss, g_out = bce_loss(d_fake, 1.0)
    _, g_in = backward_with_input(pair.disc_params, pair.disc_spec, d_cache, g_out)
    grads = backward(pair.gen_params, pair.gen_spec, g_cache, g_in[:, :pair.data_dim])
    return grads, loss


@dataclass
class GanOptState:
    disc: OptimizerState
    gen: OptimizerState


def gan_local_epoch(pair: GanPair, local_data: LabeledDataset, config: GanConfig,
                    rng: np.random.Generator, opt: GanOptState | None = None,
                    ) -> tuple[GanPair, GanRoundMetrics, GanOptState]:
    """One pass over shuffled local minibatches: a discriminator update, then a generator update."""
    n = len(local_data)
    if n == 0:
        raise ValueError("local data is empty")
    if opt is None:
        opt = GanOptState(config.optimizer(), config.optimizer())
    pair = pair.copy()
    order = rng.permutation(n)
    rows = []
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        labels = local_data.labels[idx] if pair.cond_dim else None
        d_grads, m = discriminator_step(pair, local_data.features[idx], rng, labels)
        pair.disc_params, opt.disc = apply_update(pair.disc_params, d_grads, opt.disc)
        g_grads, m.g_loss = generator_step(pair, idx.size, rng, labels)
        if config.train_generator:
            pair.gen_params, opt.gen = apply_update(pair.gen_params, g_grads, opt.gen)
        rows.append(m)
    return pair, _mean_metrics(rows, [1.0] * len(rows)), opt


def _mean_metrics(rows: Sequence[GanRoundMetrics], weights: Sequence[float]) -> GanRoundMetrics:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()

    def avg(name: str) -> float:
        return float(np.dot(w, [getattr(r, name) for r in rows]))

    return GanRoundMetrics(avg("d_loss"), avg("g_loss"), avg("d_real_mean"), avg("d_fake_mean"), avg("d_accuracy"))


@dataclass
class GanUpdate:
    client_id: int
    pair: GanPair
    n_samples: int
    metrics: GanRoundMetrics


def fed_gan_round(updates: Sequence[GanUpdate], mode: str = "sample_weighted") -> GanPair:
    """Averages generators and discriminators independently; returns the new global pair."""
    if not updates:
        raise ValueError("no GAN updates to aggregate")
    first = updates[0].pair
    for u in updates:
        if u.pair.gen_spec != first.gen_spec or u.pair.disc_spec != first.disc_spec:
            raise ValueError(f"GAN from client {u.client_id} has a different architecture")
    gen = aggregate([ClientUpdate(u.client_id, u.pair.gen_params, u.n_samples) for u in updates], mode)
    disc = aggregate([ClientUpdate(u.client_id, u.pair.disc_params, u.n_samples) for u in updates], mode)
    return replace(first, gen_params=gen, disc_params=disc)


@dataclass
class GanTask:
    client_data: list[LabeledDataset]
    initial: GanPair
    gan: GanConfig = field(default_factory=GanConfig)


@dataclass
class FedGanResult:
    history: list[RoundRecord]
    final: GanPair
    elapsed_s: float = 0.0
    # ``final`` with the generator replaced by its moving average (``final`` itself when disabled)
    sampler: GanPair | None = None


def run_fed_gan(config: FederationConfig, task: GanTask,
                on_round: Callable[[int, GanPair, RoundRecord], None] | None = None) -> FedGanResult:
    """Federated GAN training; a single-client task is a standalone GAN."""
    config.validate()
    if len(task.client_data) != config.num_clients:
        raise ConfigError(f"{len(task.client_data)} client datasets for num_clients={config.num_clients}")
    started = time.perf_counter()
    global_pair = task.initial.copy()
    opts: dict[int, GanOptState] = {}
    history: list[RoundRecord] = []
    decay = task.gan.gen_ema
    if not 0.0 <= decay < 1.0:
        raise ConfigError("gen_ema must lie in [0, 1)")
    ema = global_pair.gen_params.values.copy()
    for r in range(config.rounds_max):
        selected = select_clients(config.num_clients, config.client_fraction, r, config.seed)
        broadcast = global_pair.copy()

        def train(cid: int) -> GanUpdate:
            try:
                rng = substream(config.seed, "gan", cid, r)
                pair, opt, rows = broadcast, opts.get(cid), []
                for _ in range(config.local_epochs):
                    pair, m, opt = gan_local_epoch(pair, task.client_data[cid], task.gan, rng, opt)
                    rows.append(m)
                if opt is not None:
                    opts[cid] = opt
                if not rows:
                    rows.append(GanRoundMetrics(math.nan, math.nan, math.nan, math.nan, math.nan))
                return GanUpdate(cid, pair.copy(), len(task.client_data[cid]),
                                 _mean_metrics(rows, [1.0] * len(rows)))
            except Exception as exc:
                raise ClientTrainingError(cid, exc) from exc

        updates = _map_clients(train, selected, config.workers)
        delivered, log, wall = transmit(updates, config.net, r)
        if delivered:
            global_pair = fed_gan_round(delivered, config.aggregation)
            w = aggregation_weights([ClientUpdate(u.client_id, u.pair.gen_params, u.n_samples)
                                     for u in delivered], "sample_weighted")
            metrics = _mean_metrics([u.metrics for u in delivered], w)
            acc = federated_accuracy([u.metrics.d_accuracy for u in delivered])
            record = RoundRecord(r, selected, [u.client_id for u in delivered], metrics.d_loss,
                                 acc, wall, log, metrics)
        else:
            prev = history[-1] if history else None
            record = RoundRecord(r, selected, [], prev.global_loss if prev else math.nan,
                                 prev.fed_accuracy if prev else 0.0, wall, log, None)
        history.append(record)
        if decay:
            ema = decay * ema + (1.0 - decay) * global_pair.gen_params.values
        if on_round is not None:
            on_round(r, global_pair, record)
        if has_converged(history, config.convergence):
            break
    final = global_pair.copy()
    sampler = replace(final, gen_params=ParamSet(ema, final.gen_spec.spec_id)) if decay and history else final
    return FedGanResult(history, final, time.perf_counter() - started, sampler)


def synthesize(pair: GanPair, n: int, rng: np.random.Generator, *,
               class_names: Sequence[str] = ("synthetic",), shape: tuple[int, ...] | None = None,
               labels: np.ndarray | None = None, clip: tuple[float, float] | None = (0.0, 1.0),
               batch_size: int = 512) -> LabeledDataset:
    """Draws ``n`` generator samples, flagged synthetic.

    A conditional pair labels rows round-robin over ``class_names`` unless
    ``labels`` is given; an unconditional pair labels every row 0.
    """
    shape = shape or (pair.data_dim,)
    if labels is None:
        labels = np.arange(n) % len(class_names) if pair.cond_dim else np.zeros(n, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != n:
        raise ShapeError("need one label per synthetic row")
    if pair.cond_dim and len(class_names) != pair.cond_dim:
        raise ShapeError("class_names must match the generator's condition width")
    rows = [np.empty((0, pair.data_dim))]
    for start in range(0, n, batch_size):
        lab = labels[start:start + batch_size]
        z = sample_noise(lab.size, pair.noise_dim, rng)
        rows.append(generate(pair, z, lab if pair.cond_dim else None))
    x = np.concatenate(rows)
    if clip is not None:
        x = np.clip(x, clip[0], clip[1])
    return LabeledDataset(x, labels, tuple(class_names), shape, np.ones(n, dtype=bool))


def augment(real: LabeledDataset, synthetic: LabeledDataset) -> LabeledDataset:
    """Real rows first, then synthetic rows, with provenance flags kept."""
    if real.shape != synthetic.shape:
        raise DataError(f"feature shapes differ: {real.shape} vs {synthetic.shape}")
    if real.class_names != synthetic.class_names:
        raise DataError("label spaces differ")
    return LabeledDataset(
        np.concatenate([real.features, synthetic.features]),
        np.concatenate([real.labels, synthetic.labels]),
        real.class_names,
        real.shape,
        np.concatenate([real.synthetic, synthetic.synthetic]),
    )


def mode_coverage(samples: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Fraction of samples whose nearest mode (Euclidean) is each of ``modes``."""
    d = ((samples[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
    return np.bincount(np.argmin(d, axis=1), minlength=len(modes)) / len(samples)
