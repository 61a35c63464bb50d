"""Ranking and retrieval metrics under the ZS and GZS protocols.

ZS galleries hold unseen-class photos and queries are unseen-class
sketches. GZS galleries additionally hold all seen-class photos, and both
seen and unseen sketches act as queries (recorded in report metadata).
Relevance is exact label match; distances are Euclidean with ties broken
by ascending gallery id.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .dataio import GZS, PHOTO, SKETCH, ZS, Dataset, FeatureSample
from .errors import ConfigError, ProtocolError
from .trainer import ModelParams, TrainConfig


@dataclass
class Gallery:
    ids: list[str]
    labels: list[str]
    embeddings: np.ndarray  # (G, D)


@dataclass
class RankedList:
    query_id: str
    query_label: str
    entries: list[tuple[str, str, float]]  # (gallery id, label, distance), sorted


@dataclass
class RetrievalReport:
    protocol: str
    query_count: int
    gallery_size: int
    map: float
    p_at_100: float
    p_at_200: float
    map_at_200: float
    per_query_ap: list[float]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "protocol": self.protocol,
                "query_count": self.query_count,
                "gallery_size": self.gallery_size,
                "map": self.map,
                "p_at_100": self.p_at_100,
                "p_at_200": self.p_at_200,
                "map_at_200": self.map_at_200,
                "per_query_ap": self.per_query_ap,
                "metadata": self.metadata,
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "RetrievalReport":
        d = json.loads(text)
        return RetrievalReport(**d)

    def metric_rows(self) -> list[tuple[str, str, float]]:
        return [
            (self.protocol, "map", self.map),
            (self.protocol, "p_at_100", self.p_at_100),
            (self.protocol, "p_at_200", self.p_at_200),
            (self.protocol, "map_at_200", self.map_at_200),
        ]


def embed_photos(
    samples: list[FeatureSample], model: ModelParams, use_attention: bool = True
) -> np.ndarray:
    return enc.encode_batch(samples, model.photo_encoder, use_attention).data


def embed_sketches(
    samples: list[FeatureSample], model: ModelParams, use_attention: bool = True
) -> np.ndarray:
    return enc.encode_batch(samples, model.sketch_encoder, use_attention).data


def build_gallery(
    dataset: Dataset, model: ModelParams, protocol: str, use_attention: bool = True
) -> Gallery:
    split = dataset.split
    if split is None:
        raise ProtocolError("build_gallery: dataset has no split")
    if protocol == ZS:
        photos = dataset.by_domain(PHOTO, split.unseen_classes)
    elif protocol == GZS:
        photos = dataset.by_domain(PHOTO, split.unseen_classes | split.seen_classes)
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    if not photos:
        raise ProtocolError(f"{protocol}: empty gallery")
    return Gallery(
        ids=[p.id for p in photos],
        labels=[p.label for p in photos],
        embeddings=embed_photos(photos, model, use_attention),
    )


def rank(query_id: str, query_label: str, query_emb: np.ndarray, gallery: Gallery) -> RankedList:
    if not gallery.ids:
        raise ProtocolError("rank: empty gallery")
    dist = np.linalg.norm(gallery.embeddings - query_emb, axis=1)
    order = sorted(range(len(gallery.ids)), key=lambda i: (dist[i], gallery.ids[i]))
    return RankedList(
        query_id=query_id,
        query_label=query_label,
        entries=[(gallery.ids[i], gallery.labels[i], float(dist[i])) for i in order],
    )


def average_precision(ranked: RankedList, k: int | None = None) -> float:
    """AP truncated at rank k, normalized by min(total relevant, k)."""
    if k is not None and k < 1:
        raise ConfigError(f"average_precision: k must be >= 1, got {k}")
    relevant = [lbl == ranked.query_label for _, lbl, _ in ranked.entries]
    total_rel = sum(relevant)
    if total_rel == 0:
        return 0.0
    cutoff = len(relevant) if k is None else min(k, len(relevant))
    hits = 0
    score = 0.0
    for i in range(cutoff):
        if relevant[i]:
            hits += 1
            score += hits / (i + 1)
    return score / min(total_rel, cutoff)


def precision_at_k(ranked: RankedList, k: int) -> float:
    """Relevant count among the top min(k, gallery) ranks, divided by k."""
    if k < 1:
        raise ConfigError(f"precision_at_k: k must be >= 1, got {k}")
    top = ranked.entries[:k]
    hits = sum(1 for _, lbl, _ in top if lbl == ranked.query_label)
    return hits / k


def evaluate(
    dataset: Dataset, model: ModelParams, protocol: str, use_attention: bool = True
) -> RetrievalReport:
    split = dataset.split
    if split is None:
        raise ProtocolError("evaluate: dataset has no split")
    gallery = build_gallery(dataset, model, protocol, use_attention)
    if protocol == ZS:
        queries = dataset.by_domain(SKETCH, split.unseen_classes)
    else:
        queries = dataset.by_domain(SKETCH, split.unseen_classes | split.seen_classes)
    if not queries:
        raise ProtocolError(f"{protocol}: no test sketches")
    q_emb = embed_sketches(queries, model, use_attention)
    aps, aps200, p100, p200 = [], [], [], []
    for q, e in zip(queries, q_emb):
        ranked = rank(q.id, q.label, e, gallery)
        aps.append(average_precision(ranked))
        aps200.append(average_precision(ranked, k=200))
        p100.append(precision_at_k(ranked, 100))
        p200.append(precision_at_k(ranked, 200))
    return RetrievalReport(
        protocol=protocol,
        query_count=len(queries),
        gallery_size=len(gallery.ids),
        map=float(np.mean(aps)),
        p_at_100=float(np.mean(p100)),
        p_at_200=float(np.mean(p200)),
        map_at_200=float(np.mean(aps200)),
        per_query_ap=[float(a) for a in aps],
        metadata={
            "gzs_queries_include_seen_sketches": protocol == GZS,
            "seen_test_photos_are_training_photos": protocol == GZS,
        },
    )


def evaluate_checkpoint(dataset: Dataset, model: ModelParams, config: TrainConfig, protocol: str) -> RetrievalReport:
    return evaluate(
        dataset, model, protocol, use_attention="attention" not in config.ablation_flags
    )


def write_metric_csv(path, reports: list[RetrievalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["protocol", "metric", "value"])
        for r in reports:
            for protocol, metric, value in r.metric_rows():
                writer.writerow([protocol, metric, repr(value)])
