"""Baselines that force interleaved sequences through non-interleaved models.

Three adaptations: vector fusion of separately encoded text and images,
caption substitution (images replaced by caption text), and merged-image
preparation (all images tiled into one grid). Image and text encoders for
the fusion baseline reuse the engine's encoder on single-item sequences.

Caption clients speak a line-delimited JSON protocol: one request object
per line, one response per line. The bundled mock is deterministic; real
backends plug in over stdio (subprocess) or HTTP (POST /caption with body
``{"image_ref": ...}`` returning ``{"caption": ...}``).

The visual-document adaptation (screenshot rendering) is not implemented;
the harness records it as adapter kind "visual-doc: unimplemented".
"""
from __future__ import annotations

import json
import subprocess
import urllib.request
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .core import (
    Embedding,
    FeatureGrid,
    InterleavedSequence,
    image_item,
    text_item,
)
from .encoder import EncoderConfig, EncoderParams, encode, fnv1a64
from .vision import featurize_image, tile_images

COMBINE_SUM = "sum"
COMBINE_CONCAT = "concatenate"
COMBINE_DOT = "dot_product"
IMAGE_AGG_MEAN = "mean"
IMAGE_AGG_CONCAT = "concat"


class DegenerateFusionError(ValueError):
    """Fusion produced the zero vector (e.g. dot product of disjoint supports)."""


@dataclass(frozen=True)
class FusionConfig:
    combine: str = COMBINE_SUM
    image_agg: str = IMAGE_AGG_MEAN

    def __post_init__(self) -> None:
        if self.combine not in (COMBINE_SUM, COMBINE_CONCAT, COMBINE_DOT):
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.image_agg not in (IMAGE_AGG_MEAN, IMAGE_AGG_CONCAT):
            raise ValueError(f"unknown image aggregation {self.image_agg!r}")


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateFusionError("degenerate fusion: zero-norm result")
    return v / norm


def vector_fuse(
    t: Embedding, images: Sequence[Embedding], cfg: FusionConfig
) -> Embedding:
    """Combine a text embedding with image embeddings into one unit vector.

    Image aggregation: mean (normalized arithmetic mean) or concat. Combine:
    sum, concatenate, or element-wise dot product of the aggregated image
    vector with the text vector.
    """
    if not images:
        raise ValueError("vector_fuse needs at least one image embedding")
    img_mat = np.stack([e.values for e in images])
    if cfg.image_agg == IMAGE_AGG_MEAN:
        img_vec = _normalize(img_mat.mean(axis=0))
    else:
        img_vec = _normalize(img_mat.reshape(-1))
    tv = t.values
    if cfg.combine == COMBINE_SUM:
        if img_vec.shape != tv.shape:
            raise ValueError("dimension mismatch for sum fusion")
        fused = img_vec + tv
    elif cfg.combine == COMBINE_CONCAT:
        fused = np.concatenate([img_vec, tv])
    else:
        if img_vec.shape != tv.shape:
            raise ValueError("dimension mismatch for dot-product fusion")
        fused = img_vec * tv
    return Embedding(
        values=_normalize(fused),
        grid_width=images[0].grid_width,
        normalized=True,
    )


def fusion_inputs(
    seq: InterleavedSequence,
    params: EncoderParams,
    cfg: EncoderConfig,
    n: int,
) -> tuple[Embedding, list[Embedding]]:
    """Encode the concatenated text and each image separately for fusion."""
    text = " ".join(seq.text_chunks)
    t_emb = encode(
        InterleavedSequence(items=(text_item(text),), seq_id=f"{seq.seq_id}#text"),
        n, params, cfg,
    )
    image_embs = [
        encode(
            InterleavedSequence(items=(image_item(ref),), seq_id=f"{seq.seq_id}#img{i}"),
            n, params, cfg,
        )
        for i, ref in enumerate(seq.image_refs)
    ]
    return t_emb, image_embs


# --- Caption clients ----------------------------------------------------------


class CaptionClient(Protocol):
    def caption(self, image_ref: str) -> str: ...


class CaptionClientError(RuntimeError):
    pass


_NOUNS = (
    "ladder", "kettle", "bicycle", "garden", "engine", "notebook", "lantern",
    "sweater", "toolbox", "teapot", "compass", "cabinet", "saddle", "whisk",
    "easel", "trellis",
)
_MODIFIERS = (
    "wooden", "copper", "folded", "painted", "vintage", "braided", "polished",
    "woven", "rusted", "striped", "glazed", "carved", "patched", "tilted",
    "stacked", "bright",
)


def mock_caption_phrase(image_ref: str) -> str:
    """Deterministic noun phrase keyed on the image_ref hash."""
    h = fnv1a64(image_ref)
    return f"{_MODIFIERS[h % len(_MODIFIERS)]} {_NOUNS[(h >> 8) % len(_NOUNS)]}"


class MockCaptionClient:
    """Offline captioner: 'an image of <hash-derived noun phrase>'."""

    def caption(self, image_ref: str) -> str:
        return f"an image of a {mock_caption_phrase(image_ref)}"


class HttpCaptionClient:
    """POST {base_url}/caption with {"image_ref": ...} -> {"caption": ...}."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def caption(self, image_ref: str) -> str:
        body = json.dumps({"image_ref": image_ref}).encode("utf-8")
        req = urllib.request.Request(
            f"{self.base_url}/caption",
            data=body,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (OSError, ValueError) as exc:
            raise CaptionClientError(f"caption request failed: {exc}") from exc
        if "caption" not in payload:
            raise CaptionClientError("caption response missing 'caption'")
        return str(payload["caption"])


class StdioCaptionClient:
    """Line-delimited JSON over a subprocess: one request line, one response."""

    def __init__(self, argv: Sequence[str]) -> None:
        self._proc = subprocess.Popen(
            list(argv),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def caption(self, image_ref: str) -> str:
        assert self._proc.stdin is not None and self._proc.stdout is not None
        self._proc.stdin.write(json.dumps({"image_ref": image_ref}) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise CaptionClientError("caption subprocess closed its stdout")
        payload = json.loads(line)
        if "caption" not in payload:
            raise CaptionClientError("caption response missing 'caption'")
        return str(payload["caption"])

    def close(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)


def captionize(seq: InterleavedSequence, client: CaptionClient) -> InterleavedSequence:
    """Replace every image item in place by a text item with its caption."""
    items = []
    for i, it in enumerate(seq.items):
        if it.kind == "image":
            try:
                caption = client.caption(it.image_ref)
            except Exception as exc:
                raise CaptionClientError(f"caption failed for item {i}: {exc}") from exc
            items.append(text_item(caption))
        else:
            items.append(it)
    return InterleavedSequence(
        items=tuple(items), seq_id=seq.seq_id, article_id=seq.article_id
    )


def prepare_merged(
    seq: InterleavedSequence, channels: int
) -> tuple[FeatureGrid, str]:
    """Tile all image grids in order; join all text chunks with single spaces."""
    refs = seq.image_refs
    if not refs:
        raise ValueError("prepare_merged needs at least one image")
    grids = [featurize_image(ref, channels) for ref in refs]
    return tile_images(grids), " ".join(seq.text_chunks)
