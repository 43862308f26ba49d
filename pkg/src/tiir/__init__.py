"""Desk-scale text-image interleaved retrieval engine."""

from .core import (
    ContentItem,
    Corpus,
    Embedding,
    FeatureGrid,
    InterleavedSequence,
    RetrievalExample,
    image_item,
    load_corpus,
    save_corpus,
    text_item,
    validate_sequence,
)
from .encoder import EncoderConfig, EncoderParams, encode, init_params, tokenize_text
from .retrieval import DenseIndex, MetricsReport, build_index, evaluate, search
from .training import TrainConfig, info_nce, train
from .vision import VALID_GRID_WIDTHS, featurize_image, flatten_tokens, pool_grid

__all__ = [
    "ContentItem",
    "Corpus",
    "DenseIndex",
    "Embedding",
    "EncoderConfig",
    "EncoderParams",
    "FeatureGrid",
    "InterleavedSequence",
    "MetricsReport",
    "RetrievalExample",
    "TrainConfig",
    "VALID_GRID_WIDTHS",
    "build_index",
    "encode",
    "evaluate",
    "featurize_image",
    "flatten_tokens",
    "image_item",
    "info_nce",
    "init_params",
    "load_corpus",
    "pool_grid",
    "save_corpus",
    "search",
    "text_item",
    "tokenize_text",
    "train",
    "validate_sequence",
]

__version__ = "0.1.0"
