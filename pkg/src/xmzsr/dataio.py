"""Feature/embedding ingestion, synthetic data generation, and ZSL splits.

File formats (bit-exact round-trip contracts):
  feature table CSV : header ``id,label,domain,rows,cols,channels,f0,...``
  class embeddings  : header ``label,e0,...,e299``
Floats are written with shortest round-trip repr, '.' decimal point, UTF-8.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError

EMBED_DIM = 300
SKETCH = "sketch"
PHOTO = "photo"
ZS = "zs"
GZS = "gzs"


@dataclass(frozen=True)
class FeatureSample:
    """One data instance: an R x C x F feature grid with identity and domain."""

    id: str
    label: str
    domain: str
    features: np.ndarray  # shape (rows, cols, channels)

    def __post_init__(self):
        if self.domain not in (SKETCH, PHOTO):
            raise DataError(f"sample {self.id!r}: unknown domain {self.domain!r}")
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3:
            raise DataError(f"sample {self.id!r}: features must be R x C x F")
        if not np.all(np.isfinite(f)):
            raise DataError(f"sample {self.id!r}: non-finite feature value")
        object.__setattr__(self, "features", f)

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def cols(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    def grid(self) -> np.ndarray:
        """Features flattened to (rows*cols, channels)."""
        return self.features.reshape(-1, self.features.shape[2])


@dataclass(frozen=True)
class ClassEmbedding:
    """Per-class 300-d semantic vector."""

    label: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (EMBED_DIM,):
            raise SchemaError(
                f"class {self.label!r}: embedding must have {EMBED_DIM} entries, got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise DataError(f"class {self.label!r}: non-finite embedding value")
        if float(np.linalg.norm(v)) <= 1e-9:
            raise DataError(f"class {self.label!r}: zero-norm embedding")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class SplitSpec:
    seen_classes: frozenset
    unseen_classes: frozenset
    protocol: str = ZS

    def __post_init__(self):
        if self.protocol not in (ZS, GZS):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if not self.seen_classes or not self.unseen_classes:
            raise ConfigError("seen and unseen class sets must both be nonempty")
        if self.seen_classes & self.unseen_classes:
            raise ConfigError("seen and unseen class sets must be disjoint")


@dataclass
class Dataset:
    samples: list[FeatureSample]
    embeddings: dict[str, ClassEmbedding]
    split: SplitSpec | None = None

    def __post_init__(self):
        for s in self.samples:
            if s.label not in self.embeddings:
                raise DataError(f"sample {s.id!r}: label {s.label!r} has no embedding")

    @property
    def labels(self) -> list[str]:
        return sorted(self.embeddings)

    def by_domain(self, domain: str, labels=None) -> list[FeatureSample]:
        keep = None if labels is None else set(labels)
        out = [
            s
            for s in self.samples
            if s.domain == domain and (keep is None or s.label in keep)
        ]
        out.sort(key=lambda s: s.id)
        return out


# ---------------------------------------------------------------------------
# CSV I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def load_feature_table(path) -> list[FeatureSample]:
    samples: list[FeatureSample] = []
    dims = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:6] != ["id", "label", "domain", "rows", "cols", "channels"]:
            raise SchemaError(f"{path}: bad feature-table header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, label, domain = row[0], row[1], row[2]
                r, c, f = int(row[3]), int(row[4]), int(row[5])
                values = [float(v) for v in row[6:]]
            except (ValueError, IndexError) as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
            if len(values) != r * c * f:
                raise ParseError(
                    f"{path}: line {lineno}: expected {r * c * f} feature values, got {len(values)}"
                )
            if dims is None:
                dims = (r, c, f)
            elif (r, c, f) != dims:
                raise SchemaError(
                    f"{path}: line {lineno}: grid dims {(r, c, f)} differ from {dims}"
                )
            arr = np.array(values, dtype=np.float64).reshape(r, c, f)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{path}: line {lineno}: non-finite feature value")
            samples.append(FeatureSample(sid, label, domain, arr))
    return samples


def save_feature_table(path, samples) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        first = samples[0]
        n = first.rows * first.cols * first.channels
        writer.writerow(
            ["id", "label", "domain", "rows", "cols", "channels"]
            + [f"f{i}" for i in range(n)]
        )
        for s in samples:
            writer.writerow(
                [s.id, s.label, s.domain, s.rows, s.cols, s.channels]
                + [_fmt(v) for v in s.features.ravel()]
            )


def load_class_embeddings(path) -> dict[str, ClassEmbedding]:
    out: dict[str, ClassEmbedding] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "label" or len(header) != EMBED_DIM + 1:
            raise SchemaError(f"{path}: bad class-embedding header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            label = row[0]
            if len(row) != EMBED_DIM + 1:
                raise SchemaError(
                    f"{path}: line {lineno}: expected {EMBED_DIM} values, got {len(row) - 1}"
                )
            if label in out:
                raise DataError(f"{path}: line {lineno}: duplicate label {label!r}")
            try:
                vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
            out[label] = ClassEmbedding(label, vec)
    return out


def save_class_embeddings(path, embeddings: dict[str, ClassEmbedding]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"e{i}" for i in range(EMBED_DIM)])
        for label in sorted(embeddings):
            e = embeddings[label]
            writer.writerow([label] + [_fmt(v) for v in e.vector])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for precomputed visual features.

    Class semantic vectors are unit-random in R^300; class visual means are
    a fixed random linear map of them, so semantic topology predicts visual
    topology. Sketches additionally carry a shared per-class modality offset.
    """

    n_classes: int = 16
    samples_per_class_per_domain: int = 20
    channels: int = 16
    rows: int = 1
    cols: int = 1
    sigma_between: float = 1.0
    sigma_within: float = 0.1
    sigma_modality: float = 0.1

    def validate(self) -> None:
        if self.n_classes < 4:
            raise ConfigError("synthetic data needs at least 4 classes")
        if (
            self.samples_per_class_per_domain < 1
            or self.channels < 1
            or self.rows < 1
            or self.cols < 1
        ):
            raise ConfigError("synthetic counts and grid dims must be >= 1")


def generate_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    config.validate()
    rng = np.random.default_rng(seed)
    k = config.n_classes
    width = len(str(k - 1))
    labels = [f"class{i:0{width}d}" for i in range(k)]

    sem = rng.normal(size=(k, EMBED_DIM))
    sem /= np.linalg.norm(sem, axis=1, keepdims=True)
    # fixed random linear map: per-coordinate variance ~ sigma_between^2
    vis_map = rng.normal(size=(config.channels, EMBED_DIM))
    means = config.sigma_between * sem @ vis_map.T  # (k, channels)
    offsets = config.sigma_modality * rng.normal(size=(k, config.channels))

    cells = config.rows * config.cols
    samples: list[FeatureSample] = []
    for ci, label in enumerate(labels):
        for domain, shift in ((PHOTO, 0.0), (SKETCH, offsets[ci])):
            for j in range(config.samples_per_class_per_domain):
                noise = config.sigma_within * rng.normal(size=(cells, config.channels))
                grid = means[ci] + shift + noise
                samples.append(
                    FeatureSample(
                        id=f"{label}_{domain}_{j:03d}",
                        label=label,
                        domain=domain,
                        features=grid.reshape(config.rows, config.cols, config.channels),
                    )
                )
    embeddings = {lb: ClassEmbedding(lb, sem[i]) for i, lb in enumerate(labels)}
    return Dataset(samples=samples, embeddings=embeddings)


def build_split(dataset: Dataset, n_unseen: int, seed: int, protocol: str = ZS) -> SplitSpec:
    labels = dataset.labels
    k = len(labels)
    if not 1 <= n_unseen <= k - 2:
        raise ConfigError(f"n_unseen must be in [1, {k - 2}], got {n_unseen}")
    rng = np.random.default_rng(seed)
    unseen = set(rng.choice(labels, size=n_unseen, replace=False).tolist())
    seen = set(labels) - unseen
    return SplitSpec(frozenset(seen), frozenset(unseen), protocol)
