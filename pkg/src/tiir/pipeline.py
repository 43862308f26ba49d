"""Benchmark construction: corpus building, BM25 selection, query generation.

Articles arrive as `<goal, methods, [(headline, image), ...]>` records; each
method becomes one interleaved document. Query generation runs three stages
over pluggable clients: (a) caption images and write a query text, (b) pick
the most informative sentences with BM25 and rewrite, (c) generate an image
per selected sentence and interleave it at its source position.

The bundled mock clients are deterministic and fully offline, so the whole
pipeline is reproducible byte for byte from a seed. Real model backends
speak JSON over HTTP: POST /caption, /write_query, /select_rewrite,
/gen_image with the request/response bodies used by ``HttpGenClients``.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .adapters import MockCaptionClient
from .core import (
    Corpus,
    CorpusFormatError,
    InterleavedSequence,
    RetrievalExample,
    image_item,
    text_item,
)
from .encoder import EncoderConfig, fnv1a64, tokenize_text

_WORD_RE = re.compile(r"[a-z0-9_]+")
_SENTENCE_SPLIT_RE = re.compile(r"[.!?]")

VALID_QUERY_K = (2, 3, 4)

BM25_K1 = 1.2
BM25_B = 0.75


class PipelineStageError(RuntimeError):
    """A generation client failed; the message names the stage."""


# --- Article records ----------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    headline: str
    image_ref: str


@dataclass(frozen=True)
class MethodRecord:
    method_name: str
    steps: tuple[StepRecord, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError(f"method {self.method_name!r} has no steps")


@dataclass(frozen=True)
class ArticleRecord:
    article_id: str
    goal: str
    methods: tuple[MethodRecord, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.methods:
            raise ValueError(f"article {self.article_id!r} has no methods")


def save_articles(articles: Iterable[ArticleRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for a in articles:
            obj = {
                "article_id": a.article_id,
                "goal": a.goal,
                "methods": [
                    {
                        "method_name": m.method_name,
                        "steps": [
                            {"headline": s.headline, "image_ref": s.image_ref}
                            for s in m.steps
                        ],
                    }
                    for m in a.methods
                ],
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def load_articles(path: str | Path) -> list[ArticleRecord]:
    out: list[ArticleRecord] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(
                    ArticleRecord(
                        article_id=obj["article_id"],
                        goal=obj["goal"],
                        methods=tuple(
                            MethodRecord(
                                method_name=m["method_name"],
                                steps=tuple(
                                    StepRecord(
                                        headline=s["headline"],
                                        image_ref=s["image_ref"],
                                    )
                                    for s in m["steps"]
                                ),
                            )
                            for m in obj["methods"]
                        ),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def build_corpus(articles: Sequence[ArticleRecord]) -> Corpus:
    """One document per method: goal+name text, then headline/image per step."""
    docs = []
    for article in articles:
        for j, method in enumerate(article.methods):
            items = [text_item(f"{article.goal} {method.method_name}".strip())]
            for step in method.steps:
                items.append(text_item(step.headline))
                items.append(image_item(step.image_ref))
            docs.append(
                InterleavedSequence(
                    items=tuple(items),
                    seq_id=f"{article.article_id}-m{j}",
                    article_id=article.article_id,
                )
            )
    return Corpus.from_documents(docs)


# --- BM25 sentence selection ---------------------------------------------------


def _bm25_tokens(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def bm25_rank(sentences: Sequence[str], reference_doc_text: str, k: int) -> list[int]:
    """Top-k sentence indices by BM25 score against the reference document.

    Each sentence is scored as a query against the document treated as the
    sole corpus entry (k1=1.2, b=0.75, idf = ln((N-df+0.5)/(df+0.5)+1));
    ranked descending with ties broken by lower sentence index.
    """
    if not sentences:
        raise ValueError("no sentences to rank")
    if not 1 <= k <= len(sentences):
        raise ValueError(f"k must be in 1..{len(sentences)}, got {k}")
    doc_tokens = _bm25_tokens(reference_doc_text)
    doc_len = len(doc_tokens)
    tf: dict[str, int] = {}
    for t in doc_tokens:
        tf[t] = tf.get(t, 0) + 1
    # single-entry corpus: every present term has df=1, avgdl = doc_len
    idf_present = math.log((1 - 1 + 0.5) / (1 + 0.5) + 1.0)
    scores = []
    for sent in sentences:
        score = 0.0
        if doc_len > 0:
            norm = BM25_K1 * (1.0 - BM25_B + BM25_B * doc_len / doc_len)
            for tok in _bm25_tokens(sent):
                f = tf.get(tok, 0)
                if f == 0:
                    continue
                score += idf_present * (f * (BM25_K1 + 1.0)) / (f + norm)
        scores.append(score)
    order = sorted(range(len(sentences)), key=lambda i: (-scores[i], i))
    return order[:k]


# --- Generation clients ---------------------------------------------------------


@dataclass(frozen=True)
class SelectRewriteResult:
    captions: tuple[str, ...]
    rewritten: str


class GenClients(Protocol):
    def caption(self, image_ref: str) -> str: ...

    def write_query(self, document_text: str) -> str: ...

    def select_and_rewrite(
        self, query_text: str, top_sentences: Sequence[str]
    ) -> SelectRewriteResult: ...

    def gen_image(self, caption: str) -> str: ...


def _sentence_normalize(text: str) -> str:
    """Strip sentence punctuation and collapse whitespace (mock template rule)."""
    return " ".join(_SENTENCE_SPLIT_RE.sub(" ", text).split())


def split_sentences(text: str) -> list[str]:
    """Split on ., ! and ?; drop empty fragments; strip surrounding space."""
    return [s.strip() for s in _SENTENCE_SPLIT_RE.split(text) if s.strip()]


def caption_image_ref(caption: str) -> str:
    """Deterministic synthetic image ref for a caption (the mock generator)."""
    return f"synth:{fnv1a64(caption)}"


def headline_image_ref(headline: str) -> str:
    """Image ref a generated query will reproduce when this headline is
    selected verbatim as a caption; used to key synthetic article images."""
    return caption_image_ref(_sentence_normalize(headline))


class MockGenClients:
    """Deterministic offline clients exercising every pipeline stage.

    write_query extracts each line of the document representation as one
    sentence; select_and_rewrite drops the selected sentences verbatim and
    emits them as captions; gen_image keys a synthetic ref on the caption.
    """

    def __init__(self) -> None:
        self._captioner = MockCaptionClient()

    def caption(self, image_ref: str) -> str:
        return self._captioner.caption(image_ref)

    def write_query(self, document_text: str) -> str:
        sentences = [
            _sentence_normalize(line)
            for line in document_text.splitlines()
            if line.strip()
        ]
        return ". ".join(s for s in sentences if s) + "."

    def select_and_rewrite(
        self, query_text: str, top_sentences: Sequence[str]
    ) -> SelectRewriteResult:
        selected = set(top_sentences)
        kept = [s for s in split_sentences(query_text) if s not in selected]
        rewritten = ". ".join(kept) + ("." if kept else "")
        return SelectRewriteResult(captions=tuple(top_sentences), rewritten=rewritten)

    def gen_image(self, caption: str) -> str:
        return caption_image_ref(caption)


class HttpGenClients:
    """JSON-over-HTTP client bundle (POST /caption, /write_query,
    /select_rewrite, /gen_image)."""

    def __init__(self, base_url: str, timeout: float = 30.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _post(self, endpoint: str, payload: dict) -> dict:
        req = urllib.request.Request(
            f"{self.base_url}/{endpoint}",
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (OSError, ValueError) as exc:
            raise PipelineStageError(f"{endpoint} request failed: {exc}") from exc

    def caption(self, image_ref: str) -> str:
        return str(self._post("caption", {"image_ref": image_ref})["caption"])

    def write_query(self, document_text: str) -> str:
        return str(self._post("write_query", {"document_text": document_text})["query_text"])

    def select_and_rewrite(
        self, query_text: str, top_sentences: Sequence[str]
    ) -> SelectRewriteResult:
        obj = self._post(
            "select_rewrite",
            {"query_text": query_text, "top_sentences": list(top_sentences)},
        )
        return SelectRewriteResult(
            captions=tuple(str(c) for c in obj["captions"]),
            rewritten=str(obj["rewritten"]),
        )

    def gen_image(self, caption: str) -> str:
        return str(self._post("gen_image", {"caption": caption})["image_ref"])


# --- Query generation ------------------------------------------------------------


@dataclass(frozen=True)
class QueryProvenance:
    source_doc_id: str
    selected_sentence_indices: tuple[int, ...]
    k: int
    transcript_hashes: dict[str, str]

    def to_json_obj(self) -> dict:
        return {
            "source_doc_id": self.source_doc_id,
            "selected_sentence_indices": list(self.selected_sentence_indices),
            "k": self.k,
            "transcript_hashes": dict(sorted(self.transcript_hashes.items())),
        }


def _transcript_hash(stage: str, payload_in, payload_out) -> str:
    blob = json.dumps([stage, payload_in, payload_out], sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def generate_query(
    doc: InterleavedSequence,
    clients: GenClients,
    k: int,
    rng: np.random.Generator | None = None,
    query_id: str | None = None,
) -> tuple[InterleavedSequence, QueryProvenance]:
    """Generate an interleaved query for a document via the client bundle.

    Stage (a) captions images and writes a query text from text+captions;
    stage (b) ranks sentences with BM25 against the document text and asks
    for captions plus a rewritten text; stage (c) generates one image per
    caption and interleaves each at its source sentence's position. The
    rng parameter is reserved for sampling backends; the bundled mocks are
    deterministic and ignore it.
    """
    del rng
    if k not in VALID_QUERY_K:
        raise ValueError(f"k must be one of {VALID_QUERY_K}, got {k}")
    hashes: dict[str, str] = {}
    try:
        captions_in = [clients.caption(ref) for ref in doc.image_refs]
        lines: list[str] = []
        cap_iter = iter(captions_in)
        for item in doc.items:
            lines.append(item.text if item.kind == "text" else next(cap_iter))
        document_text = "\n".join(lines)
        query_text = clients.write_query(document_text)
        hashes["a"] = _transcript_hash("a", document_text, query_text)
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(f"stage (a) query text generation failed: {exc}") from exc

    try:
        sentences = split_sentences(query_text)
        doc_text = " ".join(doc.text_chunks)
        selected = bm25_rank(sentences, doc_text, k)
        top_sentences = [sentences[i] for i in selected]
        result = clients.select_and_rewrite(query_text, top_sentences)
        hashes["b"] = _transcript_hash(
            "b", [query_text, top_sentences], [list(result.captions), result.rewritten]
        )
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(f"stage (b) information reorganization failed: {exc}") from exc

    try:
        image_refs = [clients.gen_image(c) for c in result.captions]
        hashes["c"] = _transcript_hash("c", list(result.captions), image_refs)
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(f"stage (c) image generation failed: {exc}") from exc

    # Place each generated image at its source sentence's slot within the
    # rewritten text's sentence order: slot = number of unselected sentences
    # before the source index. Images sharing a slot keep source order.
    rewritten_sentences = split_sentences(result.rewritten)
    selected_set = set(selected)
    slot_of_index: dict[int, int] = {}
    unselected_seen = 0
    for i in range(len(sentences)):
        if i in selected_set:
            slot_of_index[i] = min(unselected_seen, len(rewritten_sentences))
        else:
            unselected_seen += 1
    placements = sorted(
        (slot_of_index[i], i, ref)
        for i, ref in zip(selected, image_refs)
    )
    items = []
    cursor = 0
    buffer: list[str] = []

    def _flush() -> None:
        if buffer:
            items.append(text_item(". ".join(buffer) + "."))
            buffer.clear()

    for slot, _, ref in placements:
        while cursor < slot:
            buffer.append(rewritten_sentences[cursor])
            cursor += 1
        _flush()
        items.append(image_item(ref))
    while cursor < len(rewritten_sentences):
        buffer.append(rewritten_sentences[cursor])
        cursor += 1
    _flush()

    query = InterleavedSequence(
        items=tuple(items),
        seq_id=query_id or f"q-{doc.seq_id}-k{k}",
        article_id="",
    )
    provenance = QueryProvenance(
        source_doc_id=doc.seq_id,
        selected_sentence_indices=tuple(selected),
        k=k,
        transcript_hashes=hashes,
    )
    return query, provenance


def make_examples(
    corpus: Corpus,
    clients: GenClients,
    k_values: Sequence[int],
    *,
    id_suffix: str = "",
) -> tuple[list[RetrievalExample], list[QueryProvenance]]:
    """One query per (document, k): positives are the source documents and
    hard-negative candidates the same-article siblings."""
    examples: list[RetrievalExample] = []
    provenances: list[QueryProvenance] = []
    for doc_id in corpus.documents:
        doc = corpus[doc_id]
        for k in k_values:
            query, prov = generate_query(
                doc, clients, k, query_id=f"q-{doc_id}-k{k}{id_suffix}"
            )
            examples.append(
                RetrievalExample(
                    query=query,
                    positive_doc_id=doc_id,
                    hard_negative_doc_ids=corpus.siblings(doc_id),
                )
            )
            provenances.append(prov)
    return examples, provenances


# --- Dataset statistics -----------------------------------------------------------


@dataclass(frozen=True)
class SplitStats:
    count: int
    avg_images: float
    min_images: int
    max_images: int
    avg_text_tokens: float
    positives_per_query: float | None
    empty: bool

    def to_json_obj(self) -> dict:
        obj = {
            "count": self.count,
            "avg_images": self.avg_images,
            "min_images": self.min_images,
            "max_images": self.max_images,
            "avg_text_tokens": self.avg_text_tokens,
            "empty": self.empty,
        }
        if self.positives_per_query is not None:
            obj["positives_per_query"] = self.positives_per_query
        return obj


def _split_stats(
    seqs: Sequence[InterleavedSequence],
    cfg: EncoderConfig,
    positives: float | None,
) -> SplitStats:
    if not seqs:
        return SplitStats(0, 0.0, 0, 0, 0.0, positives, empty=True)
    image_counts = [s.image_count for s in seqs]
    token_counts = [
        sum(len(tokenize_text(t, cfg)) for t in s.text_chunks) for s in seqs
    ]
    return SplitStats(
        count=len(seqs),
        avg_images=sum(image_counts) / len(seqs),
        min_images=min(image_counts),
        max_images=max(image_counts),
        avg_text_tokens=sum(token_counts) / len(seqs),
        positives_per_query=positives,
        empty=False,
    )


def dataset_stats(
    corpus: Corpus,
    trainset: Sequence[RetrievalExample],
    testset: Sequence[RetrievalExample],
    cfg: EncoderConfig,
) -> dict[str, SplitStats]:
    return {
        "corpus": _split_stats(list(corpus.documents.values()), cfg, None),
        "train": _split_stats([ex.query for ex in trainset], cfg, 1.0 if trainset else None),
        "test": _split_stats([ex.query for ex in testset], cfg, 1.0 if testset else None),
    }


# --- Synthetic articles ------------------------------------------------------------

_SYLLABLES = (
    "ba", "re", "mo", "ki", "lu", "ta", "ven", "dor", "sil", "pra", "nel",
    "gos", "fim", "zur", "hap", "quo", "wex", "yal", "cru", "ost",
)


def _word(rng: np.random.Generator, syllables: int = 2) -> str:
    return "".join(
        _SYLLABLES[int(rng.integers(len(_SYLLABLES)))] for _ in range(syllables)
    )


def _distinct_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        w = _word(rng, 2 + int(rng.integers(2)))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def synthetic_articles(
    num_articles: int,
    *,
    methods_per_article: int = 3,
    steps_per_method: int = 4,
    shared_headline_pool: int = 12,
    shared_step_rate: float = 0.25,
    permuted_sibling_rate: float = 0.5,
    seed: int = 0,
) -> list[ArticleRecord]:
    """Deterministic toy articles exercising the whole pipeline.

    Step images are keyed on their headlines via headline_image_ref, so a
    generated query's images coincide with the positive document's step
    images. Two ingredients make relevance depend on interleaved structure:
    a pool of shared headlines reused across articles (their images appear
    in many documents), and permuted siblings (a method whose steps are a
    reordering of another method in the same article, same goal and name),
    distinguishable only by item order.
    """
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    shared_headlines = [
        " ".join(_distinct_words(rng, 3, taken)) for _ in range(shared_headline_pool)
    ]
    articles: list[ArticleRecord] = []
    for a in range(num_articles):
        goal_words = _distinct_words(rng, 3, taken)
        goal = "how to " + " ".join(goal_words)

        def _make_steps() -> list[StepRecord]:
            steps: list[StepRecord] = []
            used: set[str] = set()
            for _ in range(steps_per_method):
                if rng.random() < shared_step_rate:
                    candidates = [h for h in shared_headlines if h not in used]
                else:
                    candidates = []
                if candidates:
                    headline = candidates[int(rng.integers(len(candidates)))]
                else:
                    headline = " ".join(_distinct_words(rng, 4, taken))
                used.add(headline)
                steps.append(
                    StepRecord(headline=headline, image_ref=headline_image_ref(headline))
                )
            return steps

        methods: list[MethodRecord] = []
        base_steps = _make_steps()
        methods.append(MethodRecord(method_name="steps", steps=tuple(base_steps)))
        permute_next = rng.random() < permuted_sibling_rate
        for _ in range(1, methods_per_article):
            if permute_next and len(base_steps) >= 2:
                order = rng.permutation(len(base_steps))
                while all(int(o) == i for i, o in enumerate(order)):
                    order = rng.permutation(len(base_steps))
                steps = tuple(base_steps[int(o)] for o in order)
                permute_next = False
            else:
                steps = tuple(_make_steps())
            methods.append(MethodRecord(method_name="steps", steps=steps))
        articles.append(
            ArticleRecord(article_id=f"a{a:04d}", goal=goal, methods=tuple(methods))
        )
    return articles
