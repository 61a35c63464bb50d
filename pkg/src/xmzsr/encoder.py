"""Modality-specific encoders with soft-attention pooling, plus the three
heads hanging off the shared embedding space: binary domain classifier
(behind gradient reversal), seen-class label classifier, and the linear
semantic decoder.

Sketch and photo encoders never share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .dataio import EMBED_DIM, FeatureSample
from .errors import ContractError
from .numcore import Tensor


@dataclass
class EncoderParams:
    """Attention gate (a 1x1 convolution over grid cells) plus a 3-layer MLP."""

    modality: str  # "sketch" or "photo"
    attn_weight: Tensor  # (F,)
    attn_bias: Tensor  # ()
    layers: list[tuple[Tensor, Tensor]]  # [(W, b), ...], hidden ReLU, final linear

    def tensors(self) -> list[Tensor]:
        out = [self.attn_weight, self.attn_bias]
        for w, b in self.layers:
            out += [w, b]
        return out


@dataclass
class HeadParams:
    domain_w: Tensor  # (D, 1)
    domain_b: Tensor  # (1,)
    label_w: Tensor  # (D, |seen|)
    label_b: Tensor  # (|seen|,)
    decoder_w: Tensor  # (D, 300)
    decoder_b: Tensor  # (300,)

    def tensors(self) -> list[Tensor]:
        return [
            self.domain_w,
            self.domain_b,
            self.label_w,
            self.label_b,
            self.decoder_w,
            self.decoder_b,
        ]


def init_encoder_params(
    rng: np.random.Generator,
    modality: str,
    channels: int,
    embed_dim: int,
    hidden_dim: int = 256,
) -> EncoderParams:
    dims = [channels, hidden_dim, hidden_dim, embed_dim]
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = Tensor(nc.xavier_uniform(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True)
        layers.append((w, b))
    return EncoderParams(
        modality=modality,
        attn_weight=Tensor(
            nc.xavier_uniform(rng, channels, 1, (channels,)), requires_grad=True
        ),
        attn_bias=Tensor(0.0, requires_grad=True),
        layers=layers,
    )


def init_head_params(
    rng: np.random.Generator, embed_dim: int, n_seen_classes: int
) -> HeadParams:
    def lin(d_in, d_out):
        w = Tensor(nc.xavier_uniform(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True)
        return w, b

    dw, db = lin(embed_dim, 1)
    lw, lb = lin(embed_dim, n_seen_classes)
    cw, cb = lin(embed_dim, EMBED_DIM)
    return HeadParams(dw, db, lw, lb, cw, cb)


def attend_pool(
    sample: FeatureSample, params: EncoderParams, use_attention: bool = True
) -> Tensor:
    """Sigmoid-gated normalized pooling over grid cells; returns (1, F).

    A single-cell grid pools to that cell regardless of the mask, so the
    attention parameters are skipped there (their gradient is identically
    zero). With attention disabled, cells are averaged uniformly.
    """
    grid = sample.grid()  # (RC, F) ndarray
    g = Tensor(grid)
    n_cells = grid.shape[0]
    if n_cells == 1:
        return g
    if not use_attention:
        return nc.matmul(Tensor(np.full((1, n_cells), 1.0 / n_cells)), g)
    f = grid.shape[1]
    logits = nc.add(nc.matmul(g, nc.reshape(params.attn_weight, (f, 1))), params.attn_bias)
    mask = nc.sigmoid(logits)  # (RC, 1), strictly positive
    num = nc.matmul(nc.transpose(mask), g)  # (1, F)
    return nc.div(num, nc.tsum(mask))


def _mlp(x: Tensor, layers) -> Tensor:
    for w, b in layers[:-1]:
        x = nc.relu(nc.add(nc.matmul(x, w), b))
    w, b = layers[-1]
    return nc.add(nc.matmul(x, w), b)


def encode(sample: FeatureSample, params: EncoderParams, use_attention: bool = True) -> Tensor:
    """Embed one sample; returns a (D,) tensor."""
    if sample.domain != params.modality:
        raise ContractError(
            f"sample {sample.id!r} is {sample.domain}, encoder is {params.modality}"
        )
    pooled = attend_pool(sample, params, use_attention)
    out = _mlp(pooled, params.layers)
    return nc.reshape(out, (out.data.shape[1],))


def encode_batch(
    samples: list[FeatureSample], params: EncoderParams, use_attention: bool = True
) -> Tensor:
    """Embed a batch; returns (B, D). Pools per sample, runs the MLP batched."""
    if not samples:
        raise ContractError("encode_batch: empty batch")
    for s in samples:
        if s.domain != params.modality:
            raise ContractError(
                f"sample {s.id!r} is {s.domain}, encoder is {params.modality}"
            )
    if all(s.features.shape[0] * s.features.shape[1] == 1 for s in samples):
        pooled = Tensor(np.stack([s.grid()[0] for s in samples]))
    else:
        rows = [
            nc.reshape(attend_pool(s, params, use_attention), (s.channels,))
            for s in samples
        ]
        pooled = nc.stack_rows(rows)
    return _mlp(pooled, params.layers)


def domain_logit(embedding: Tensor, heads: HeadParams, reverse: bool = True) -> Tensor:
    """Pre-sigmoid domain logits, (B,). Gradient into the embedding is
    negated (gradient reversal) unless `reverse` is off."""
    e = nc.grad_reverse(embedding) if reverse else embedding
    out = nc.add(nc.matmul(e, heads.domain_w), heads.domain_b)
    return nc.reshape(out, (out.data.shape[0],))


def class_logits(embedding: Tensor, heads: HeadParams) -> Tensor:
    return nc.add(nc.matmul(embedding, heads.label_w), heads.label_b)


def decode_semantic(embedding: Tensor, heads: HeadParams) -> Tensor:
    return nc.add(nc.matmul(embedding, heads.decoder_w), heads.decoder_b)
