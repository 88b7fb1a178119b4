"""Synthetic datasets, train/test splitting, institution partitioning and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import substream


class DataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Rows of flat float64 features with integer labels in ``[0, K)``.

    ``shape`` is the per-row feature shape (``(d,)`` for vectors, ``(C, H, W)``
    for image grids); ``features`` is always stored flat as ``(n, prod(shape))``.
    ``synthetic`` marks rows that came from a generator rather than real data.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    shape: tuple[int, ...]
    synthetic: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        width = int(np.prod(self.shape))
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, width)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.class_names = tuple(self.class_names)
        n = self.features.shape[0]
        if self.labels.shape[0] != n:
            raise DataError(f"{n} feature rows but {self.labels.shape[0]} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)
        else:
            self.synthetic = np.asarray(self.synthetic, dtype=bool).reshape(-1)
            if self.synthetic.shape[0] != n:
                raise DataError("provenance flags do not match row count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.class_names, self.shape, self.synthetic[idx]
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class Partition:
    """Disjoint index lists into a parent dataset, keyed by client id."""

    indices: dict[int, np.ndarray]

    def __post_init__(self):
        seen: set[int] = set()
        for cid, idx in self.indices.items():
            if len(idx) == 0:
                raise DataError(f"client {cid} received an empty partition")
            s = set(int(i) for i in idx)
            if len(s) != len(idx) or seen & s:
                raise DataError("partition index lists overlap")
            seen |= s

    def __len__(self) -> int:
        return len(self.indices)

    def sizes(self) -> list[int]:
        return [len(self.indices[c]) for c in sorted(self.indices)]

    def apply(self, dataset: LabeledDataset) -> list[LabeledDataset]:
        return [dataset.subset(self.indices[c]) for c in sorted(self.indices)]


def _check_spd(cov: np.ndarray) -> None:
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
        raise DataError("covariance must be a symmetric 2x2 matrix")
    if np.linalg.eigvalsh(cov).min() <= 1e-12:
        raise DataError("covariance must be positive definite")


def gen_gaussian_mixture(components: Sequence[dict], n_per_component: int, seed: int) -> LabeledDataset:
    """Samples ``n_per_component`` points from each 2-D Gaussian, labelled by component.

    Each component is ``{"mean": (x, y), "cov": [[a, b], [b, c]]}``.
    """
    if not components:
        raise DataError("need at least one mixture component")
    rng = substream(seed, "data", 0)
    xs, ys = [], []
    for k, comp in enumerate(components):
        mean = np.asarray(comp["mean"], dtype=np.float64)
        cov = np.asarray(comp.get("cov", np.eye(2)), dtype=np.float64)
        if mean.shape != (2,):
            raise DataError("component mean must be a 2-vector")
        _check_spd(cov)
        chol = np.linalg.cholesky(cov)
        xs.append(mean + rng.standard_normal((n_per_component, 2)) @ chol.T)
        ys.append(np.full(n_per_component, k))
    names = tuple(f"mode{k}" for k in range(len(components)))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), names, (2,))


IMAGE_CLASSES = ("covid19", "normal", "pneumonia")


def _blob(yy, xx, cy, cx, sy, sx):
    return np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2.0)


def _image(cls: int, side: int, rng: np.random.Generator, contrast: float) -> np.ndarray:
    # pixel centres on the unit square
    g = (np.arange(side) + 0.5) / side
    yy, xx = np.meshgrid(g, g, indexing="ij")
    # shared anatomy: two lung fields with jittered position and size
    dy, dx = rng.normal(0.0, 0.04, size=2)
    size = rng.uniform(0.9, 1.1)
    img = 0.15 + 0.45 * (
        _blob(yy, xx, 0.5 + dy, 0.3 + dx, 0.22 * size, 0.11 * size)
        + _blob(yy, xx, 0.5 + dy, 0.7 + dx, 0.22 * size, 0.11 * size)
    )
    if cls == 0:
        # bilateral patchy opacities in the lower outer zones
        for side_x in (0.22, 0.78):
            for _ in range(2):
                cy = 0.68 + dy + rng.normal(0.0, 0.06)
                cx = side_x + dx + rng.normal(0.0, 0.04)
                img += contrast * rng.uniform(0.6, 1.0) * _blob(yy, xx, cy, cx, 0.06, 0.05)
    elif cls == 2:
        # one dense lobar consolidation, left or right
        side_x = 0.3 if rng.random() < 0.5 else 0.7
        cy = 0.62 + dy + rng.normal(0.0, 0.05)
        img += contrast * rng.uniform(0.8, 1.2) * _blob(yy, xx, cy, side_x + dx, 0.1, 0.08)
    return img


def gen_synthetic_images(
    k_classes: int = 3,
    side: int = 16,
    n_total: int = 620,
    seed: int = 0,
    noise: float = 0.2,
    contrast: float = 1.0,
) -> LabeledDataset:
    """Single-channel ``side x side`` chest-film-like grids in ``k_classes`` classes.

    Labels are assigned round-robin, so class counts differ by at most one.
    Classes beyond the third reuse the three patterns at higher contrast.
    """
    if side < 8:
        raise DataError("image side must be >= 8")
    if k_classes < 1 or n_total < k_classes:
        raise DataError("need n_total >= k_classes >= 1")
    rng = substream(seed, "data", 1)
    labels = np.arange(n_total) % k_classes
    rng.shuffle(labels)
    imgs = np.empty((n_total, side * side))
    for i, c in enumerate(labels):
        base = _image(int(c) % 3, side, rng, contrast * (1 + int(c) // 3))
        imgs[i] = base.reshape(-1)
    imgs += rng.normal(0.0, noise, size=imgs.shape)
    np.clip(imgs, 0.0, 1.0, out=imgs)
    names = tuple(IMAGE_CLASSES[c] if c < 3 else f"class{c}" for c in range(k_classes))
    return LabeledDataset(imgs, labels, names, (1, side, side))


def train_test_split(dataset: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split; each class contributes ``round(test_fraction * n_class)`` test rows."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    rng = substream(seed, "split")
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return dataset.subset(train), dataset.subset(test)


def partition_iid(dataset: LabeledDataset, k_clients: int, seed: int) -> Partition:
    n = len(dataset)
    if k_clients < 1 or k_clients > n:
        raise DataError(f"cannot split {n} rows across {k_clients} clients")
    order = substream(seed, "partition", 0).permutation(n)
    parts = np.array_split(order, k_clients)
    return Partition({c: np.sort(p) for c, p in enumerate(parts)})


def partition_dirichlet(dataset: LabeledDataset, k_clients: int, alpha: float, seed: int,
                        max_tries: int = 1000) -> Partition:
    """Label-skewed split: each class is spread over clients by Dirichlet(alpha) shares.

    Draws are repeated until every client holds at least one row.
    """
    if alpha <= 0:
        raise DataError("Dirichlet alpha must be positive")
    if k_clients < 1 or k_clients > len(dataset):
        raise DataError(f"cannot split {len(dataset)} rows across {k_clients} clients")
    rng = substream(seed, "partition", 1)
    for _ in range(max_tries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(k_clients)]
        for c in range(dataset.n_classes):
            idx = np.flatnonzero(dataset.labels == c)
            idx = idx[rng.permutation(idx.size)]
            shares = rng.dirichlet(np.full(k_clients, alpha))
            cuts = np.round(np.cumsum(shares)[:-1] * idx.size).astype(int)
            for client, chunk in enumerate(np.split(idx, cuts)):
                buckets[client].append(chunk)
        parts = [np.sort(np.concatenate(b)) for b in buckets]
        if all(p.size for p in parts):
            return Partition(dict(enumerate(parts)))
    raise DataError(f"no Dirichlet draw left every client non-empty after {max_tries} tries")


@dataclass(frozen=True)
class CsvSchema:
    n_features: int
    n_classes: int
    label_column: str = "label"
    shape: tuple[int, ...] | None = None
    class_names: tuple[str, ...] | None = None


def load_csv_dataset(path: str | Path, schema: CsvSchema) -> LabeledDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    feats, labels = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or schema.label_column not in header:
            raise DataError(f"{path}: header row with a {schema.label_column!r} column is required")
        li = header.index(schema.label_column)
        fcols = [i for i in range(len(header)) if i != li]
        if len(fcols) != schema.n_features:
            raise DataError(f"{path}: header has {len(fcols)} feature columns, schema expects {schema.n_features}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                label = int(row[li])
                values = [float(row[i]) for i in fcols]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{lineno}: non-finite cell")
            if not 0 <= label < schema.n_classes:
                raise DataError(f"{path}:{lineno}: label {label} outside [0, {schema.n_classes})")
            feats.append(values)
            labels.append(label)
    if not feats:
        raise DataError(f"{path}: no data rows")
    names = schema.class_names or tuple(f"class{c}" for c in range(schema.n_classes))
    shape = schema.shape or (schema.n_features,)
    return LabeledDataset(np.array(feats), np.array(labels), names, shape)


def write_csv_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    """Writes ``label,f0,f1,...`` with shortest round-trip float formatting."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(dataset.features.shape[1])])
        for label, row in zip(dataset.labels, dataset.features):
            w.writerow([int(label)] + [repr(float(v)) for v in row])
