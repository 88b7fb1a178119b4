"""Runs the five comparison schemes on a shared per-seed dataset and test split."""

from __future__ import annotations

import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..data import (
    CsvSchema,
    LabeledDataset,
    gen_gaussian_mixture,
    gen_synthetic_images,
    load_csv_dataset,
    partition_dirichlet,
    partition_iid,
    train_test_split,
)
from ..fedgan import GanConfig, GanTask, augment, build_gan, run_fed_gan, synthesize
from ..fl import (
    ClassifierTask,
    ConfigError,
    FederationConfig,
    RoundRecord,
    evaluate,
    run_federation,
    train_centralized,
)
from ..nn import ModelSpec, ParamSet, cnn_classifier_spec, init_model, mlp_spec
from ..rng import derive_seed, substream
from ..simnet import Delivery
from .config import ExperimentConfig, Scheme

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: LabeledDataset
    test: LabeledDataset
    partitions: list[LabeledDataset]
    spec: ModelSpec
    initial: ParamSet


@dataclass
class EpochRecord:
    round: int
    global_loss: float
    fed_accuracy: float
    test_accuracy: float
    delivered: int
    wall_ms: float


@dataclass
class SchemeResult:
    scheme: Scheme
    seed: int
    history: list[EpochRecord]
    gan_history: list[RoundRecord] = field(default_factory=list)
    deliveries: list[tuple[str, int, Delivery]] = field(default_factory=list)
    final_params: ParamSet | None = None

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].test_accuracy if self.history else math.nan


def make_dataset(config: ExperimentConfig, seed: int) -> LabeledDataset:
    ds = config.dataset
    if ds.kind == "synthetic_images":
        return gen_synthetic_images(ds.k_classes, ds.side, ds.n_total, seed, ds.noise, ds.contrast)
    if ds.kind == "gaussian_mixture":
        return gen_gaussian_mixture(ds.components, ds.n_per_component, seed)
    schema = CsvSchema(ds.n_features, ds.k_classes, shape=tuple(ds.shape) if ds.shape else None)
    return load_csv_dataset(ds.path, schema)


def classifier_spec(data: LabeledDataset) -> ModelSpec:
    if len(data.shape) == 3:
        return cnn_classifier_spec(data.shape[1], data.n_classes, data.shape[0])
    return mlp_spec([data.features.shape[1], 32, data.n_classes])


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    """Dataset, stratified test split and institution partitions for one seed.

    Every scheme run with this seed sees exactly these rows.
    """
    full = make_dataset(config, seed)
    train, test = train_test_split(full, config.test_fraction, seed)
    if config.partition.kind == "iid":
        part = partition_iid(train, config.institutions, seed)
    else:
        part = partition_dirichlet(train, config.institutions, config.partition.alpha, seed)
    spec = classifier_spec(train)
    return PreparedData(train, test, part.apply(train), spec, init_model(spec, derive_seed(seed, "init")))


def _concat(parts: list[LabeledDataset]) -> LabeledDataset:
    first = parts[0]
    return LabeledDataset(
        np.concatenate([p.features for p in parts]), np.concatenate([p.labels for p in parts]),
        first.class_names, first.shape, np.concatenate([p.synthetic for p in parts]),
    )


def synth_share(config: ExperimentConfig, institution: int) -> int:
    """Synthetic rows generated for one institution; shares sum to ``synth_n``."""
    base, extra = divmod(config.synth_n, config.institutions)
    return base + (1 if institution < extra else 0)


def _fed_config(config: ExperimentConfig, num_clients: int, seed: int, *, gan: bool = False) -> FederationConfig:
    fs = config.federation
    return FederationConfig(
        num_clients=num_clients,
        rounds_max=config.gan.rounds if gan else config.epochs,
        client_fraction=fs.client_fraction,
        local_epochs=config.gan.local_epochs if gan else fs.local_epochs,
        batch_size=config.gan.batch_size if gan else fs.batch_size,
        optimizer=fs.optimizer.build(),
        aggregation=fs.aggregation,
        convergence=None if gan else fs.convergence(),
        seed=seed,
        workers=fs.workers,
        net=config.net.build(seed),
    )


def _train_gan(config: ExperimentConfig, data: PreparedData, parts: list[LabeledDataset], seed: int,
               result: SchemeResult):
    g = config.gan
    gan_cfg = GanConfig(g.noise_dim, g.hidden, g.batch_size, g.lr, g.beta1, g.beta2, gen_ema=g.gen_ema)
    lo, hi = float(data.train.features.min()), float(data.train.features.max())
    # sigmoid output when the data already lives in [0, 1]
    head = "sigmoid" if lo >= 0.0 and hi <= 1.0 else None
    initial = build_gan(data.train.features.shape[1], g.noise_dim, g.hidden, data.train.n_classes, head, seed)
    fed = run_fed_gan(_fed_config(config, len(parts), seed, gan=True), GanTask(parts, initial, gan_cfg))
    result.gan_history = fed.history
    for rec in fed.history:
        result.deliveries.extend(("gan", rec.round_index, d) for d in rec.deliveries)
    return fed.sampler, (lo, hi)


def _augmented(config, data, parts, seed, result) -> list[LabeledDataset]:
    generator, clip = _train_gan(config, data, parts, seed, result)
    out = []
    for i, part in enumerate(parts):
        synth = synthesize(generator, synth_share(config, i), substream(seed, "synth", i),
                           class_names=data.train.class_names, shape=data.train.shape, clip=clip)
        out.append(augment(part, synth))
    return out


def run_scheme(scheme: Scheme | str, config: ExperimentConfig, seed: int,
               institutions: int | None = None) -> SchemeResult:
    """Trains one scheme for ``config.epochs`` classifier epochs (FL: one round = one epoch).

    ``institutions`` restricts the run to the first k partitions of the fixed
    ``config.institutions``-way split, which keeps the total data pool fixed.
    """
    scheme = Scheme(scheme)
    k = config.institutions if institutions is None else institutions
    if not 1 <= k <= config.institutions:
        raise ConfigError(f"institution count {k} outside [1, {config.institutions}]")
    data = prepare_data(config, seed)
    result = SchemeResult(scheme, seed, [])
    opt = config.federation.optimizer.build()
    bs = config.federation.batch_size

    def on_epoch(epoch: int, params: ParamSet, loss: float, acc: float) -> None:
        _, test_acc = evaluate(params, data.spec, data.test)
        result.history.append(EpochRecord(epoch, loss, acc, test_acc, 1, 0.0))

    def on_round(r: int, params: ParamSet, rec: RoundRecord) -> None:
        _, test_acc = evaluate(params, data.spec, data.test)
        result.history.append(EpochRecord(r, rec.global_loss, rec.fed_accuracy, test_acc,
                                          len(rec.delivered), rec.wall_ms))
        result.deliveries.extend(("classifier", r, d) for d in rec.deliveries)

    pooled_gan = scheme is Scheme.FL_GAN and config.augmented_training == "centralized"
    if scheme in (Scheme.STANDALONE, Scheme.STANDALONE_GAN, Scheme.CENTRALIZED) or pooled_gan:
        if scheme is Scheme.STANDALONE:
            train = data.partitions[0]
        elif scheme is Scheme.STANDALONE_GAN:
            train = _augmented(config, data, data.partitions[:1], seed, result)[0]
        elif pooled_gan:
            train = _concat(_augmented(config, data, data.partitions[:k], seed, result))
        else:
            train = _concat(data.partitions[:k])
        result.final_params = train_centralized(data.initial, data.spec, train, opt, config.epochs, bs, seed,
                                                on_epoch=on_epoch)
    else:
        parts = data.partitions[:k]
        if scheme is Scheme.FL_GAN:
            parts = _augmented(config, data, parts, seed, result)
        fed = run_federation(_fed_config(config, k, seed), ClassifierTask(data.spec, parts, data.initial),
                             on_round=on_round)
        result.final_params = fed.final
    log.info("%s seed=%d final accuracy %.4f", scheme.value, seed, result.final_accuracy)
    return result


@dataclass
class Cell:
    scheme: Scheme
    seed: int
    final_accuracy: float
    error: str | None = None


@dataclass
class Comparison:
    cells: list[Cell]
    results: list[SchemeResult] = field(default_factory=list)

    def medians(self) -> dict[Scheme, float]:
        out = {}
        for scheme in dict.fromkeys(c.scheme for c in self.cells):
            vals = [c.final_accuracy for c in self.cells if c.scheme is scheme and c.error is None]
            out[scheme] = statistics.median(vals) if vals else math.nan
        return out

    def ordering_holds(self, slack: float = 0.0) -> bool:
        """Median CENTRALIZED >= FL_GAN >= FL_NO_GAN >= STANDALONE_GAN >= STANDALONE, each within ``slack``."""
        m = self.medians()
        chain = [Scheme.CENTRALIZED, Scheme.FL_GAN, Scheme.FL_NO_GAN, Scheme.STANDALONE_GAN, Scheme.STANDALONE]
        if any(s not in m or math.isnan(m[s]) for s in chain):
            return False
        return all(m[a] >= m[b] - slack for a, b in zip(chain, chain[1:]))


def _run_cell(args) -> tuple[SchemeResult | None, str | None]:
    scheme, config, seed, institutions = args
    try:
        return run_scheme(scheme, config, seed, institutions), None
    except Exception as exc:  # reported per cell, the table stays usable
        return None, f"{type(exc).__name__}: {exc}"


def _run_cells(jobs: list, workers: int) -> list:
    if workers <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


def compare_schemes(config: ExperimentConfig, schemes=None, workers: int = 1) -> Comparison:
    """Every scheme on every seed; cells may run in separate processes."""
    schemes = [Scheme(s) for s in (schemes or config.schemes)]
    jobs = [(s, config, seed, None) for seed in config.seeds for s in schemes]
    cells, results = [], []
    for (scheme, _, seed, _), (res, err) in zip(jobs, _run_cells(jobs, workers)):
        if err is not None:
            log.error("%s seed=%d failed: %s", scheme.value, seed, err)
            cells.append(Cell(scheme, seed, math.nan, err))
        else:
            cells.append(Cell(scheme, seed, res.final_accuracy))
            results.append(res)
    return Comparison(cells, results)


@dataclass
class CurvePoint:
    count: int
    median_accuracy: float
    accuracies: list[float]


def accuracy_vs_institutions(config: ExperimentConfig, counts, scheme: Scheme | str = Scheme.FL_GAN,
                             workers: int = 1) -> list[CurvePoint]:
    """Median final accuracy over seeds for each number of participating institutions."""
    counts = [int(c) for c in counts]
    if not counts:
        raise ConfigError("need at least one institution count")
    for c in counts:
        if not 1 <= c <= config.institutions:
            raise ConfigError(f"institution count {c} outside [1, {config.institutions}]")
    scheme = Scheme(scheme)
    jobs = [(scheme, config, seed, c) for c in counts for seed in config.seeds]
    outcomes = _run_cells(jobs, workers)
    points = []
    for c in counts:
        accs = []
        for (_, _, _, jc), (res, err) in zip(jobs, outcomes):
            if jc != c:
                continue
            if err is not None:
                raise RuntimeError(f"{scheme.value} with {c} institutions failed: {err}")
            accs.append(res.final_accuracy)
        points.append(CurvePoint(c, statistics.median(accs), accs))
    return points
