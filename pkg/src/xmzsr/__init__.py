"""Cross-modal zero-shot sketch-to-photo retrieval at desk scale.

Dual-modality encoders with soft attention, a graph-transformer branch
over a class-similarity graph, five alignment/discrimination objectives,
hard-negative triplet training, and a ZS/GZS retrieval evaluator, all on
precomputed or synthetic feature vectors.
"""

from . import cli, dataio, encoder, errors, losses, numcore, retrieval, semgraph, trainer

__all__ = [
    "cli",
    "dataio",
    "encoder",
    "errors",
    "losses",
    "numcore",
    "retrieval",
    "semgraph",
    "trainer",
]

__version__ = "0.1.0"
