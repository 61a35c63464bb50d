"""Class-level semantic graph: cosine similarity, banded edge types,
graph-transformer meta-path layer, and GCN refinement of class prototypes.

The similarity graph has a single weighted edge relation; banding its
off-diagonal weights into intervals (plus an identity relation) supplies
the multiple candidate adjacencies the meta-path layer composes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .dataio import EMBED_DIM, ClassEmbedding
from .errors import ConfigError, ContractError, DataError, DimensionError
from .numcore import Tensor


@dataclass
class SemanticGraph:
    labels: list[str]
    node_features: np.ndarray  # (K, 300)
    similarity: np.ndarray  # (K, K), symmetric, diag 1, entries in [0, 1]
    edge_types: list[np.ndarray]  # T adjacencies, identity last


@dataclass
class GTLayerParams:
    """Two softmax-attention channels over edge types."""

    channel_logits: tuple[Tensor, Tensor]

    def tensors(self):
        return list(self.channel_logits)


@dataclass
class GCNLayerParams:
    weight: Tensor  # (d_in, d_out)
    bias: Tensor  # (d_out,)

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class ClassPrototypes:
    labels: list[str]
    vectors: Tensor  # (K, 300)


def build_similarity(embeddings: list[ClassEmbedding]) -> np.ndarray:
    """Clamped cosine similarity between class vectors; diagonal forced to 1."""
    if len(embeddings) < 2:
        raise DataError("similarity graph needs at least 2 classes")
    vecs = np.stack([e.vector for e in embeddings])
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms <= 1e-9):
        raise DataError("zero-norm class embedding")
    unit = vecs / norms[:, None]
    s = np.clip(unit @ unit.T, 0.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


def band_edge_types(similarity: np.ndarray, n_bands: int) -> list[np.ndarray]:
    """Partition off-diagonal similarities into equal-width bands over [0, 1].

    Band b keeps entries with value in [b/n, (b+1)/n) (last band closed at 1);
    the identity matrix is appended as the final edge type.
    """
    if n_bands < 1:
        raise ConfigError(f"n_bands must be >= 1, got {n_bands}")
    k = similarity.shape[0]
    off = similarity.copy()
    np.fill_diagonal(off, 0.0)
    band_idx = np.clip(np.floor(similarity * n_bands).astype(int), 0, n_bands - 1)
    out = []
    for b in range(n_bands):
        a = np.where(band_idx == b, off, 0.0)
        np.fill_diagonal(a, 0.0)
        out.append(a)
    out.append(np.eye(k))
    return out


def gt_layer(edge_types: list[np.ndarray], params: GTLayerParams) -> Tensor:
    """Soft two-channel edge-type selection composed into a 2-hop meta-path.

    With one-hot attention on types (t1, t2) the output is exactly
    row-normalize(A_t2 @ A_t1).
    """
    if not edge_types:
        raise DimensionError("gt_layer: no edge types")
    k = edge_types[0].shape[0]
    for a in edge_types:
        if a.shape != (k, k):
            raise DimensionError(f"gt_layer: edge type shape {a.shape} != {(k, k)}")
    t = len(edge_types)
    stacked = np.stack([a.ravel() for a in edge_types])  # (T, K*K), constant
    logits1, logits2 = params.channel_logits
    if logits1.shape != (t,) or logits2.shape != (t,):
        raise DimensionError("gt_layer: channel logits do not match edge-type count")
    stacked_t = Tensor(stacked)

    def select(logits: Tensor) -> Tensor:
        alpha = nc.softmax(logits)
        flat = nc.matmul(nc.reshape(alpha, (1, t)), stacked_t)
        return nc.reshape(flat, (k, k))

    q1 = select(logits1)
    q2 = select(logits2)
    return nc.row_normalize(nc.matmul(q2, q1))


def gcn_layer(
    adjacency: Tensor | np.ndarray,
    h: Tensor | np.ndarray,
    params: GCNLayerParams,
    activation: str = "relu",
) -> Tensor:
    """Symmetric-normalized graph convolution with self-loops.

    output = act(D^{-1/2} (A + I) D^{-1/2} H W + bias)
    """
    a = adjacency if isinstance(adjacency, Tensor) else Tensor(adjacency)
    h = h if isinstance(h, Tensor) else Tensor(h)
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(f"gcn_layer: adjacency must be square, got {a.data.shape}")
    if np.any(a.data < 0):
        raise ContractError("gcn_layer: adjacency entries must be nonnegative")
    k = a.data.shape[0]
    a_tilde = nc.add(a, Tensor(np.eye(k)))
    deg = nc.tsum(a_tilde, axis=1)  # >= 1 with self-loops
    inv_sqrt = nc.div(Tensor(1.0), nc.sqrt(deg))
    # D^{-1/2} A~ D^{-1/2}: scale rows, then columns via a transpose round-trip
    norm = nc.transpose(nc.scale_rows(nc.transpose(nc.scale_rows(a_tilde, inv_sqrt)), inv_sqrt))
    out = nc.add(nc.matmul(nc.matmul(norm, h), params.weight), params.bias)
    if activation == "relu":
        return nc.relu(out)
    if activation == "linear":
        return out
    raise ConfigError(f"gcn_layer: unknown activation {activation!r}")


def init_gt_params(rng: np.random.Generator, n_edge_types: int) -> GTLayerParams:
    logits = tuple(
        Tensor(0.01 * rng.normal(size=n_edge_types), requires_grad=True) for _ in range(2)
    )
    return GTLayerParams(channel_logits=logits)


def init_gcn_params(rng: np.random.Generator, dims: list[int]) -> list[GCNLayerParams]:
    """One GCNLayerParams per consecutive dim pair; final layer must end at 300."""
    if len(dims) < 2:
        raise ConfigError("need at least one GCN layer")
    if dims[-1] != EMBED_DIM:
        raise ConfigError(f"final GCN width must be {EMBED_DIM}, got {dims[-1]}")
    out = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = Tensor(nc.xavier_uniform(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True)
        out.append(GCNLayerParams(weight=w, bias=b))
    return out


def refine_prototypes(
    graph: SemanticGraph,
    gt_params: GTLayerParams,
    gcn_params: list[GCNLayerParams],
    use_gt: bool = True,
) -> ClassPrototypes:
    """GT-learned (or raw-similarity) adjacency followed by stacked GCN layers.

    Hidden layers use ReLU; the final layer is linear with output width 300.
    """
    if not gcn_params:
        raise ConfigError("refine_prototypes: need at least one GCN layer")
    if use_gt:
        adjacency = gt_layer(graph.edge_types, gt_params)
    else:
        adjacency = Tensor(graph.similarity)
    h: Tensor = Tensor(graph.node_features)
    for layer in gcn_params[:-1]:
        h = gcn_layer(adjacency, h, layer, activation="relu")
    h = gcn_layer(adjacency, h, gcn_params[-1], activation="linear")
    return ClassPrototypes(labels=list(graph.labels), vectors=h)


def build_semantic_graph(
    embeddings: list[ClassEmbedding], n_bands: int = 3
) -> SemanticGraph:
    s = build_similarity(embeddings)
    return SemanticGraph(
        labels=[e.label for e in embeddings],
        node_features=np.stack([e.vector for e in embeddings]),
        similarity=s,
        edge_types=band_edge_types(s, n_bands),
    )
