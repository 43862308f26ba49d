"""Domain types and file formats for text-image interleaved retrieval.

An interleaved sequence is an ordered mix of text chunks and image
references whose order carries meaning; nothing in the engine reorders
items except the explicit shuffle operations in the harness.

This module also owns the on-disk formats:

* corpora and query sets: JSON-lines, one sequence per line;
* feature grids: ``TIIRGRID`` binary (little-endian u32 header + f32 data);
* bulk embeddings: ``TIIREMB1`` binary plus a JSON-lines id manifest.

All multi-byte values are little-endian. Every type here is immutable
after construction and safe to share across threads.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

TEXT = "text"
IMAGE = "image"

ROLE_QUERY = "query"
ROLE_DOCUMENT = "document"

# Image-count bounds enforced by validate_sequence.
DOC_MIN_IMAGES = 2
DOC_MAX_IMAGES = 64
QUERY_MIN_IMAGES = 2
QUERY_MAX_IMAGES = 4

GRID_MAGIC = b"TIIRGRID"
EMB_MAGIC = b"TIIREMB1"


class CorpusFormatError(ValueError):
    """Malformed corpus/query/example file; message carries the line number."""


@dataclass(frozen=True)
class ContentItem:
    """One element of an interleaved sequence: a text chunk or an image ref.

    ``kind`` selects the payload; the other payload field must stay empty.
    Empty payloads are structurally allowed and flagged by
    :func:`validate_sequence`.
    """

    kind: str
    text: str = ""
    image_ref: str = ""

    def __post_init__(self) -> None:
        if self.kind not in (TEXT, IMAGE):
            raise ValueError(f"unknown item kind {self.kind!r}")
        if self.kind == TEXT and self.image_ref:
            raise ValueError("text item must not carry an image_ref")
        if self.kind == IMAGE and self.text:
            raise ValueError("image item must not carry text")


def text_item(text: str) -> ContentItem:
    return ContentItem(kind=TEXT, text=text)


def image_item(image_ref: str) -> ContentItem:
    return ContentItem(kind=IMAGE, image_ref=image_ref)


@dataclass(frozen=True)
class InterleavedSequence:
    """Ordered text/image sequence; documents carry a non-empty article_id."""

    items: tuple[ContentItem, ...]
    seq_id: str
    article_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def image_refs(self) -> tuple[str, ...]:
        return tuple(it.image_ref for it in self.items if it.kind == IMAGE)

    @property
    def image_count(self) -> int:
        return sum(1 for it in self.items if it.kind == IMAGE)

    @property
    def text_chunks(self) -> tuple[str, ...]:
        return tuple(it.text for it in self.items if it.kind == TEXT)


@dataclass(frozen=True)
class ValidationReport:
    seq_id: str
    violations: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return not self.violations


def validate_sequence(seq: InterleavedSequence, role: str) -> ValidationReport:
    """Check sequence invariants for its role; returns violations, never raises.

    Documents must have 2..64 images and a non-empty article_id; queries
    2..4 images and an empty article_id.
    """
    if role not in (ROLE_QUERY, ROLE_DOCUMENT):
        raise ValueError(f"unknown role {role!r}")
    violations: list[str] = []
    if not seq.items:
        violations.append("empty sequence")
    for i, it in enumerate(seq.items):
        if it.kind == TEXT and not it.text:
            violations.append(f"item {i}: empty text item")
        if it.kind == IMAGE and not it.image_ref:
            violations.append(f"item {i}: empty image ref")
    lo, hi = (
        (QUERY_MIN_IMAGES, QUERY_MAX_IMAGES)
        if role == ROLE_QUERY
        else (DOC_MIN_IMAGES, DOC_MAX_IMAGES)
    )
    n_img = seq.image_count
    if n_img < lo:
        violations.append(f"image count below minimum {lo}")
    elif n_img > hi:
        violations.append(f"image count above maximum {hi}")
    if role == ROLE_DOCUMENT and not seq.article_id:
        violations.append("document missing article_id")
    if role == ROLE_QUERY and seq.article_id:
        violations.append("query must not carry an article_id")
    return ValidationReport(seq_id=seq.seq_id, violations=tuple(violations))


@dataclass(frozen=True)
class Corpus:
    """Immutable id-addressed document collection with an article index."""

    documents: Mapping[str, InterleavedSequence]
    article_index: Mapping[str, tuple[str, ...]]

    @classmethod
    def from_documents(cls, docs: Iterable[InterleavedSequence]) -> "Corpus":
        documents: dict[str, InterleavedSequence] = {}
        index: dict[str, list[str]] = {}
        for doc in docs:
            if doc.seq_id in documents:
                raise CorpusFormatError(f"duplicate doc_id {doc.seq_id!r}")
            documents[doc.seq_id] = doc
            if doc.article_id:
                index.setdefault(doc.article_id, []).append(doc.seq_id)
        return cls(
            documents=documents,
            article_index={a: tuple(ids) for a, ids in index.items()},
        )

    def __len__(self) -> int:
        return len(self.documents)

    def __getitem__(self, doc_id: str) -> InterleavedSequence:
        return self.documents[doc_id]

    def siblings(self, doc_id: str) -> tuple[str, ...]:
        """Same-article doc ids, excluding doc_id itself."""
        doc = self.documents[doc_id]
        if not doc.article_id:
            return ()
        return tuple(d for d in self.article_index[doc.article_id] if d != doc_id)


@dataclass(frozen=True)
class RetrievalExample:
    """A query paired with its positive document and hard-negative candidates."""

    query: InterleavedSequence
    positive_doc_id: str
    hard_negative_doc_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "hard_negative_doc_ids", tuple(self.hard_negative_doc_ids)
        )
        if self.positive_doc_id in self.hard_negative_doc_ids:
            raise ValueError("positive doc listed among hard negatives")


# --- JSON-lines serialization ---------------------------------------------


def _item_to_obj(it: ContentItem) -> dict:
    if it.kind == TEXT:
        return {"kind": TEXT, "text": it.text}
    return {"kind": IMAGE, "image_ref": it.image_ref}


def _item_from_obj(obj: dict) -> ContentItem:
    kind = obj.get("kind")
    if kind == TEXT:
        return text_item(obj.get("text", ""))
    if kind == IMAGE:
        return image_item(obj.get("image_ref", ""))
    raise ValueError(f"unknown item kind {kind!r}")


def sequence_to_obj(seq: InterleavedSequence) -> dict:
    return {
        "seq_id": seq.seq_id,
        "article_id": seq.article_id,
        "items": [_item_to_obj(it) for it in seq.items],
    }


def sequence_from_obj(obj: dict) -> InterleavedSequence:
    return InterleavedSequence(
        items=tuple(_item_from_obj(o) for o in obj["items"]),
        seq_id=obj["seq_id"],
        article_id=obj.get("article_id", ""),
    )


def save_sequences(seqs: Iterable[InterleavedSequence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in seqs:
            f.write(json.dumps(sequence_to_obj(seq), sort_keys=True) + "\n")


def load_sequences(path: str | Path) -> list[InterleavedSequence]:
    out: list[InterleavedSequence] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(sequence_from_obj(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    save_sequences(corpus.documents.values(), path)


def load_corpus(path: str | Path) -> Corpus:
    docs = load_sequences(path)
    seen: set[str] = set()
    for lineno, doc in enumerate(docs, start=1):
        if doc.seq_id in seen:
            raise CorpusFormatError(
                f"{path}:{lineno}: duplicate doc_id {doc.seq_id!r}"
            )
        seen.add(doc.seq_id)
    return Corpus.from_documents(docs)


def save_examples(examples: Iterable[RetrievalExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            obj = {
                "query": sequence_to_obj(ex.query),
                "positive_doc_id": ex.positive_doc_id,
                "hard_negative_doc_ids": list(ex.hard_negative_doc_ids),
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def load_examples(path: str | Path) -> list[RetrievalExample]:
    out: list[RetrievalExample] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(
                    RetrievalExample(
                        query=sequence_from_obj(obj["query"]),
                        positive_doc_id=obj["positive_doc_id"],
                        hard_negative_doc_ids=tuple(
                            obj.get("hard_negative_doc_ids", ())
                        ),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


# --- Feature grids ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """A rows x cols x channels feature map (row-major, channel last)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"grid data must be 3-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def save_grid(grid: FeatureGrid, path: str | Path) -> None:
    """Write TIIRGRID: magic, u32 channels/rows/cols, f32 row-major data.

    Values are stored as float32; callers that need exact round-trips must
    keep grid values float32-representable (the synthetic featurizer does).
    """
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<III", grid.channels, grid.rows, grid.cols))
        f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def load_grid(path: str | Path) -> FeatureGrid:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        channels, rows, cols = struct.unpack("<III", f.read(12))
        raw = f.read(rows * cols * channels * 4)
        if len(raw) != rows * cols * channels * 4:
            raise ValueError(f"{path}: truncated grid data")
        data = np.frombuffer(raw, dtype="<f4").reshape(rows, cols, channels)
    return FeatureGrid(data=data.astype(np.float64))


# --- Embeddings -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-dimension vector with the grid width used during encoding."""

    values: np.ndarray
    grid_width: int
    normalized: bool = True

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("embedding values must be a 1-d vector")
        if self.normalized and abs(np.linalg.norm(arr) - 1.0) > 1e-6:
            raise ValueError("embedding flagged normalized but norm is not 1")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def normalize_vector(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return np.asarray(v, dtype=np.float64) / norm


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".manifest.jsonl")


def save_embeddings(
    items: Sequence[tuple[str, Embedding]], path: str | Path
) -> None:
    """Write TIIREMB1 plus the sidecar id manifest (ids in storage order)."""
    if not items:
        raise ValueError("no embeddings to save")
    dim = items[0][1].dim
    width = items[0][1].grid_width
    for item_id, emb in items:
        if emb.dim != dim:
            raise ValueError(f"{item_id}: dimension mismatch ({emb.dim} != {dim})")
        if emb.grid_width != width:
            raise ValueError(f"{item_id}: grid_width mismatch")
        if not emb.normalized:
            raise ValueError(f"{item_id}: embedding files store unit-norm vectors")
    mat = np.stack([emb.values for _, emb in items])
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<III", len(items), dim, width))
        f.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        for item_id, _ in items:
            f.write(json.dumps({"id": item_id}) + "\n")


def load_embeddings(path: str | Path) -> list[tuple[str, Embedding]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != EMB_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        count, dim, width = struct.unpack("<III", f.read(12))
        raw = f.read(count * dim * 4)
        if len(raw) != count * dim * 4:
            raise ValueError(f"{path}: truncated embedding data")
        mat = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float64)
    ids: list[str] = []
    with open(manifest_path(path), "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                ids.append(json.loads(line)["id"])
    if len(ids) != count:
        raise ValueError(f"{path}: manifest lists {len(ids)} ids, file has {count}")
    out: list[tuple[str, Embedding]] = []
    for i, item_id in enumerate(ids):
        vec = normalize_vector(mat[i])
        out.append((item_id, Embedding(values=vec, grid_width=width)))
    return out
