"""Weakly supervised image-based table recognition.

A desk-scale, end-to-end pipeline: a restricted HTML table grammar with a
canonical tree form, structure/cell tokenizers, the TEDS similarity metric,
a small tensor library with reverse-mode differentiation, the
encoder/dual-decoder recognition network, its training loop, greedy
inference, a synthetic table-image generator, and a batch CLI.
"""

from .network import NetConfig
from .synth import GenConfig, Sample
from .table import Node, classify, parse_html, to_html
from .teds import TedsScore, score_batch, tree_edit_distance
from .tokens import (
    cell_vocab,
    detokenize_cell,
    detokenize_structure,
    struct_vocab,
    tokenize_cell,
    tokenize_structure,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint

# The similarity functions live in the teds submodule; re-exporting them here
# would shadow it (wstabnet.teds must stay a module).

__all__ = [
    "GenConfig",
    "NetConfig",
    "Node",
    "Sample",
    "TedsScore",
    "TrainConfig",
    "cell_vocab",
    "classify",
    "detokenize_cell",
    "detokenize_structure",
    "load_checkpoint",
    "parse_html",
    "save_checkpoint",
    "score_batch",
    "struct_vocab",
    "to_html",
    "tokenize_cell",
    "tokenize_structure",
    "tree_edit_distance",
]

__version__ = "0.1.0"
