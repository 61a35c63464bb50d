"""Triplet mining, the optimization loop, and checkpointing.

Hard negatives refresh once per epoch from frozen embeddings: for each
seen class the negative is the wrong-class photo whose embedding lies
nearest to that class's photo-embedding centroid. Anchors are drawn
round-robin across classes so per-class anchor counts differ by at most
one per epoch.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from . import losses as ls
from . import numcore as nc
from . import semgraph as sg
from .dataio import PHOTO, SKETCH, Dataset, FeatureSample, SplitSpec
from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    SchemaError,
)
from .numcore import AdamState, Tensor

ABLATION_FLAGS = frozenset(
    {"comp", "wass", "dom", "cls", "sem", "attention", "gt", "gcn_only"}
)

CHECKPOINT_MAGIC = b"GTZ1"


@dataclass(frozen=True)
class Triplet:
    anchor: FeatureSample
    positive: FeatureSample
    negative: FeatureSample

    def __post_init__(self):
        if self.anchor.domain != SKETCH:
            raise DataError("triplet anchor must be a sketch")
        if self.positive.domain != PHOTO or self.negative.domain != PHOTO:
            raise DataError("triplet positive/negative must be photos")
        if self.anchor.label != self.positive.label:
            raise DataError("triplet positive must share the anchor label")
        if self.anchor.label == self.negative.label:
            raise DataError("triplet negative must differ from the anchor label")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epochs: int = 75
    learning_rate: float = 1e-4
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    seed: int = 0
    ablation_flags: frozenset = frozenset()
    embed_dim: int = 64
    hidden_dim: int = 256
    n_bands: int = 3
    gcn_hidden: tuple = (256,)
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 100
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    gradient_reversal: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, learning_rate > 0 required")
        if self.embed_dim < 1 or self.hidden_dim < 1 or self.n_bands < 1:
            raise ConfigError("model dimensions must be positive")
        unknown = set(self.ablation_flags) - ABLATION_FLAGS
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        self.weights.validate()

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "weights": {
                "lambda1": self.weights.lambda1,
                "lambda2": self.weights.lambda2,
                "lambda3": self.weights.lambda3,
                "lambda4": self.weights.lambda4,
                "t": self.weights.t,
            },
            "seed": self.seed,
            "ablation_flags": sorted(self.ablation_flags),
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "n_bands": self.n_bands,
            "gcn_hidden": list(self.gcn_hidden),
            "sinkhorn_epsilon": self.sinkhorn_epsilon,
            "sinkhorn_iters": self.sinkhorn_iters,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_epsilon": self.adam_epsilon,
            "gradient_reversal": self.gradient_reversal,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", {})
        cfg = TrainConfig(
            weights=ls.LossWeights(**w),
            ablation_flags=frozenset(d.pop("ablation_flags", [])),
            gcn_hidden=tuple(d.pop("gcn_hidden", (256,))),
            **d,
        )
        cfg.validate()
        return cfg


@dataclass
class ModelParams:
    sketch_encoder: enc.EncoderParams
    photo_encoder: enc.EncoderParams
    heads: enc.HeadParams
    gt_params: sg.GTLayerParams
    gcn_params: list[sg.GCNLayerParams]
    seen_labels: list[str]

    def tensors(self) -> list[Tensor]:
        out = self.sketch_encoder.tensors() + self.photo_encoder.tensors()
        out += self.heads.tensors() + self.gt_params.tensors()
        for layer in self.gcn_params:
            out += layer.tensors()
        return out

    def label_index(self) -> dict[str, int]:
        return {lb: i for i, lb in enumerate(self.seen_labels)}


@dataclass
class Checkpoint:
    model: ModelParams
    adam: AdamState
    epoch: int
    config: TrainConfig
    history: list[ls.LossReport]
    config_hash: bytes


def init_model(dataset: Dataset, config: TrainConfig) -> ModelParams:
    config.validate()
    if dataset.split is None:
        raise ConfigError("dataset has no split")
    seen = sorted(dataset.split.seen_classes)
    channels = dataset.samples[0].channels
    rng = np.random.default_rng([config.seed, 0])
    sketch = enc.init_encoder_params(rng, SKETCH, channels, config.embed_dim, config.hidden_dim)
    photo = enc.init_encoder_params(rng, PHOTO, channels, config.embed_dim, config.hidden_dim)
    heads = enc.init_head_params(rng, config.embed_dim, len(seen))
    gt = sg.init_gt_params(rng, config.n_bands + 1)
    gcn = sg.init_gcn_params(rng, [300, *config.gcn_hidden, 300])
    return ModelParams(sketch, photo, heads, gt, gcn, seen)


def build_training_graph(dataset: Dataset, config: TrainConfig) -> sg.SemanticGraph:
    seen = sorted(dataset.split.seen_classes)
    return sg.build_semantic_graph([dataset.embeddings[c] for c in seen], config.n_bands)


def mine_triplets(
    dataset: Dataset, model: ModelParams, config: TrainConfig, epoch_seed
) -> list[Triplet]:
    """Class-balanced anchors with centroid-nearest hard negatives."""
    seen = model.seen_labels
    if len(seen) < 2:
        raise DataError("mining needs at least 2 seen classes")
    use_attention = "attention" not in config.ablation_flags
    photos = dataset.by_domain(PHOTO, seen)  # sorted by id
    sketches_by_class = {c: [] for c in seen}
    for s in dataset.by_domain(SKETCH, seen):
        sketches_by_class[s.label].append(s)
    photos_by_class = {c: [] for c in seen}
    for p in photos:
        photos_by_class[p.label].append(p)
    for c in seen:
        if not photos_by_class[c]:
            raise DataError(f"class {c!r} has no photos")
        if not sketches_by_class[c]:
            raise DataError(f"class {c!r} has no sketches")

    emb = enc.encode_batch(photos, model.photo_encoder, use_attention).data
    labels = np.array([p.label for p in photos])
    negatives: dict[str, FeatureSample] = {}
    for c in seen:
        own = labels == c
        centroid = emb[own].mean(axis=0)
        d = np.linalg.norm(emb - centroid, axis=1)
        d[own] = np.inf
        j = int(np.argmin(d))  # photos sorted by id: ties pick smallest
        if not np.isfinite(d[j]):
            raise NumericError(f"mining: non-finite embedding distances for class {c!r}")
        negatives[c] = photos[j]

    rng = np.random.default_rng(epoch_seed)
    per_class = min(len(sketches_by_class[c]) for c in seen)
    anchor_order = {
        c: rng.permutation(len(sketches_by_class[c]))[:per_class] for c in seen
    }
    triplets = []
    for i in range(per_class):
        for c in seen:
            anchor = sketches_by_class[c][anchor_order[c][i]]
            positive = photos_by_class[c][int(rng.integers(len(photos_by_class[c])))]
            triplets.append(Triplet(anchor, positive, negatives[c]))
    return triplets


def _zero_constant() -> Tensor:
    return Tensor(0.0)


def _forward_losses(
    batch: list[Triplet],
    model: ModelParams,
    graph: sg.SemanticGraph,
    config: TrainConfig,
) -> tuple[Tensor, ls.LossReport]:
    flags = config.ablation_flags
    gcn_only = "gcn_only" in flags
    use_attention = "attention" not in flags
    want_wass = "wass" not in flags and not gcn_only
    want_comp = "comp" not in flags
    want_dom = "dom" not in flags and not gcn_only
    want_cls = "cls" not in flags and not gcn_only
    want_sem = "sem" not in flags

    idx = model.label_index()
    anchor_idx = np.array([idx[t.anchor.label] for t in batch])
    neg_idx = np.array([idx[t.negative.label] for t in batch])

    a_emb = enc.encode_batch([t.anchor for t in batch], model.sketch_encoder, use_attention)
    p_emb = enc.encode_batch([t.positive for t in batch], model.photo_encoder, use_attention)
    n_emb = enc.encode_batch([t.negative for t in batch], model.photo_encoder, use_attention)

    wass = (
        ls.wasserstein_sinkhorn(a_emb, p_emb, config.sinkhorn_epsilon, config.sinkhorn_iters)
        if want_wass
        else _zero_constant()
    )
    if want_comp:
        d_pos = ls.row_distances(a_emb, p_emb)
        d_neg = ls.row_distances(a_emb, n_emb)
        comp = ls.compatibility_loss(d_pos, d_neg)
    else:
        comp = _zero_constant()
    if want_dom:
        s_logits = enc.domain_logit(a_emb, model.heads, reverse=config.gradient_reversal)
        p_logits = nc.concat_vecs(
            [
                enc.domain_logit(p_emb, model.heads, reverse=config.gradient_reversal),
                enc.domain_logit(n_emb, model.heads, reverse=config.gradient_reversal),
            ]
        )
        dom = ls.domain_loss(s_logits, p_logits, config.weights.t)
    else:
        dom = _zero_constant()
    cls = (
        ls.classification_loss(
            enc.class_logits(a_emb, model.heads),
            enc.class_logits(p_emb, model.heads),
            enc.class_logits(n_emb, model.heads),
            anchor_idx,
            neg_idx,
        )
        if want_cls
        else _zero_constant()
    )
    if want_sem:
        if "gt" in flags:
            targets = Tensor(graph.node_features)  # raw word vectors
        else:
            protos = sg.refine_prototypes(
                graph, model.gt_params, model.gcn_params, use_gt=not gcn_only
            )
            targets = protos.vectors
        sem_terms = [
            ls.semantic_loss(enc.decode_semantic(e, model.heads), nc.gather_rows(targets, i))
            for e, i in ((a_emb, anchor_idx), (p_emb, anchor_idx), (n_emb, neg_idx))
        ]
        sem = nc.mul(
            nc.add(nc.add(sem_terms[0], sem_terms[1]), sem_terms[2]), Tensor(1.0 / 3.0)
        )
    else:
        sem = _zero_constant()
    return ls.total_loss(wass, comp, dom, cls, sem, config.weights)


def train_step(
    batch: list[Triplet],
    model: ModelParams,
    graph: sg.SemanticGraph,
    config: TrainConfig,
    adam: AdamState,
) -> ls.LossReport:
    """Forward, backward, and one Adam update; returns the pre-update report."""
    if not batch:
        raise ContractError("train_step: empty batch")
    try:
        total, report = _forward_losses(batch, model, graph, config)
    except NumericError as e:
        raise NumericError(f"train_step aborted: {e}") from e
    params = model.tensors()
    for p in params:
        p.zero_grad()
    nc.backward(total)
    nc.adam_step(params, adam)
    return report


def fit(dataset: Dataset, config: TrainConfig) -> Checkpoint:
    """Run the full training protocol; returns the final checkpoint."""
    config.validate()
    if dataset.split is None:
        raise ConfigError("fit: dataset has no split")
    model = init_model(dataset, config)
    graph = build_training_graph(dataset, config)
    adam = AdamState(
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.adam_epsilon,
        weight_decay=config.weight_decay,
    )
    history: list[ls.LossReport] = []
    for epoch in range(config.epochs):
        triplets = mine_triplets(dataset, model, config, [config.seed, 1 + epoch])
        reports = []
        for start in range(0, len(triplets), config.batch_size):
            batch = triplets[start:start + config.batch_size]
            reports.append(train_step(batch, model, graph, config, adam))
        history.append(
            ls.LossReport(
                **{
                    k: float(np.mean([r.as_dict()[k] for r in reports]))
                    for k in reports[0].as_dict()
                }
            )
        )
    return Checkpoint(
        model=model,
        adam=adam,
        epoch=config.epochs,
        config=config,
        history=history,
        config_hash=run_hash(dataset, config),
    )


# ---------------------------------------------------------------------------
# hashing and checkpoint serialization


def dataset_fingerprint(dataset: Dataset) -> bytes:
    h = hashlib.sha256()
    for s in sorted(dataset.samples, key=lambda s: s.id):
        h.update(s.id.encode())
        h.update(s.label.encode())
        h.update(s.domain.encode())
        h.update(np.ascontiguousarray(s.features).tobytes())
    for label in sorted(dataset.embeddings):
        h.update(label.encode())
        h.update(np.ascontiguousarray(dataset.embeddings[label].vector).tobytes())
    if dataset.split is not None:
        h.update(json.dumps(
            [sorted(dataset.split.seen_classes), sorted(dataset.split.unseen_classes)]
        ).encode())
    return h.digest()


def run_hash(dataset: Dataset, config: TrainConfig) -> bytes:
    h = hashlib.sha256()
    h.update(dataset_fingerprint(dataset))
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode())
    return h.digest()


def _named_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = []
    params = ckpt.model.tensors()
    for i, p in enumerate(params):
        out.append((f"param:{i}", p.data))
    for i, m in enumerate(ckpt.adam.first_moment):
        out.append((f"adam:m:{i}", m))
    for i, v in enumerate(ckpt.adam.second_moment):
        out.append((f"adam:v:{i}", v))
    out.append(
        (
            "adam:meta",
            np.array(
                [
                    float(ckpt.adam.step_count),
                    ckpt.adam.learning_rate,
                    ckpt.adam.beta1,
                    ckpt.adam.beta2,
                    ckpt.adam.epsilon,
                    ckpt.adam.weight_decay,
                ]
            ),
        )
    )
    out.append(("meta:epoch", np.array([float(ckpt.epoch)])))
    for key in ("wasserstein", "compatibility", "domain", "classification", "semantic", "total"):
        out.append((f"history:{key}", np.array([r.as_dict()[key] for r in ckpt.history])))
    out.append(("hash", np.frombuffer(ckpt.config_hash, dtype="<f8")))
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    sections = _named_arrays(ckpt)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def _read_sections(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise SchemaError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (blen,) = struct.unpack("<I", fh.read(4))
            out[name] = np.frombuffer(fh.read(blen), dtype="<f8").copy()
    return out


def load_checkpoint(path, dataset: Dataset, config: TrainConfig) -> Checkpoint:
    """Rebuild a checkpoint; the stored hash must match (dataset, config)."""
    sections = _read_sections(path)
    expected = run_hash(dataset, config)
    stored = sections["hash"].tobytes()
    if stored != expected:
        raise CompatibilityError(f"{path}: checkpoint does not match dataset/config")
    model = init_model(dataset, config)
    params = model.tensors()
    adam = AdamState()
    meta = sections["adam:meta"]
    adam.step_count = int(meta[0])
    adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon, adam.weight_decay = meta[1:6]
    for i, p in enumerate(params):
        p.data = sections[f"param:{i}"].reshape(p.data.shape)
        adam.first_moment.append(sections[f"adam:m:{i}"].reshape(p.data.shape))
        adam.second_moment.append(sections[f"adam:v:{i}"].reshape(p.data.shape))
    epoch = int(sections["meta:epoch"][0])
    keys = ("wasserstein", "compatibility", "domain", "classification", "semantic", "total")
    n_epochs = sections["history:total"].shape[0]
    history = [
        ls.LossReport(**{k: float(sections[f"history:{k}"][e]) for k in keys})
        for e in range(n_epochs)
    ]
    return Checkpoint(
        model=model,
        adam=adam,
        epoch=epoch,
        config=config,
        history=history,
        config_hash=stored,
    )


def ablation_config(base: TrainConfig, flags) -> TrainConfig:
    cfg = replace(base, ablation_flags=frozenset(flags))
    cfg.validate()
    return cfg
