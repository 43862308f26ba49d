"""Experiment drivers: shuffle ablation, width sweep, dominance, efficiency.

Every experiment is a pure function of (trained params, data, seed) and
returns plot-ready report objects; reports carry their rankings so metrics
can always be recomputed and checked. The toy task built here is a fully
synthetic end-to-end retrieval problem whose relevance depends on the
interleaved structure (shared images across documents and step-permuted
sibling documents), generated by the mock pipeline from seeded articles.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    Corpus,
    Embedding,
    InterleavedSequence,
    RetrievalExample,
    text_item,
    image_item,
)
from .encoder import EncoderConfig, EncoderParams, encode, sequence_length
from .pipeline import (
    ArticleRecord,
    MethodRecord,
    MockGenClients,
    build_corpus,
    make_examples,
    synthetic_articles,
)
from .retrieval import (
    DenseIndex,
    MetricsReport,
    RankedList,
    build_index,
    dominance_score,
    evaluate,
    search,
)
from .vision import VALID_GRID_WIDTHS

SHUFFLE_NONE = "none"
SHUFFLE_ORDERING = "ordering"
SHUFFLE_POSITION = "position"
SHUFFLE_BOTH = "both"
SHUFFLE_MODES = (SHUFFLE_NONE, SHUFFLE_ORDERING, SHUFFLE_POSITION, SHUFFLE_BOTH)

DEFAULT_KS = (5, 10)

# Analytic activation accounting for the max-batch estimate: the attention
# matrix plus the residual/MLP buffers, in float64.
_ACTIVATION_FLOATS_PER_TOKEN_DIM = 18
_DEFAULT_MEM_BUDGET = 256 * 1024 * 1024
_MAX_BATCH_CAP = 4096


# --- Shuffle variants ---------------------------------------------------------


def shuffle_variant(
    seq: InterleavedSequence, mode: str, rng: np.random.Generator
) -> InterleavedSequence:
    """Shuffle image ordering and/or image slot positions; text order is fixed.

    ordering permutes which image occupies each existing image slot;
    position moves the image slots among the item positions while keeping
    the images' relative order; both applies ordering then position.
    Sequences with fewer than two images are returned unchanged.
    """
    if mode not in SHUFFLE_MODES:
        raise ValueError(f"unknown shuffle mode {mode!r}")
    images = [it for it in seq.items if it.kind == "image"]
    if mode == SHUFFLE_NONE or len(images) < 2:
        return seq
    texts = [it for it in seq.items if it.kind == "text"]
    if mode in (SHUFFLE_ORDERING, SHUFFLE_BOTH):
        perm = rng.permutation(len(images))
        images = [images[int(i)] for i in perm]
    if mode in (SHUFFLE_POSITION, SHUFFLE_BOTH):
        total = len(seq.items)
        slots = sorted(
            int(i) for i in rng.permutation(total)[: len(images)]
        )
        slot_set = set(slots)
        img_iter = iter(images)
        txt_iter = iter(texts)
        items = [
            next(img_iter) if i in slot_set else next(txt_iter)
            for i in range(total)
        ]
    else:
        img_iter = iter(images)
        items = [
            next(img_iter) if it.kind == "image" else it for it in seq.items
        ]
    return InterleavedSequence(
        items=tuple(items), seq_id=seq.seq_id, article_id=seq.article_id
    )


# --- Run reports ----------------------------------------------------------------


@dataclass
class RunReport:
    experiment: str
    config: dict
    rankings: list[RankedList]
    metrics: MetricsReport
    timings: dict[str, float]

    def recompute_metrics(self, qrels: Mapping[str, str], ks: Sequence[int]) -> MetricsReport:
        return evaluate(self.rankings, qrels, ks)

    def to_json_obj(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "metrics": self.metrics.to_json_obj(),
            "timings": self.timings,
            "rankings": [
                {"query_id": r.query_id, "entries": [[d, s] for d, s in r.entries]}
                for r in self.rankings
            ],
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_obj(), f, indent=2, sort_keys=True)
            f.write("\n")


def encode_sequences(
    seqs: Iterable[tuple[str, InterleavedSequence]],
    width: int,
    params: EncoderParams,
    cfg: EncoderConfig,
) -> list[tuple[str, Embedding]]:
    return [(sid, encode(seq, width, params, cfg)) for sid, seq in seqs]


def index_corpus(
    corpus: Corpus, width: int, params: EncoderParams, cfg: EncoderConfig
) -> DenseIndex:
    return build_index(
        encode_sequences(corpus.documents.items(), width, params, cfg)
    )


def _evaluate_queries(
    queries: Sequence[tuple[str, InterleavedSequence]],
    index: DenseIndex,
    width: int,
    params: EncoderParams,
    cfg: EncoderConfig,
    k: int,
) -> tuple[list[RankedList], float]:
    rankings = []
    start = time.perf_counter()
    for qid, seq in queries:
        emb = encode(seq, width, params, cfg)
        ranked = search(index, emb, k)
        rankings.append(RankedList(query_id=qid, entries=ranked.entries))
    return rankings, time.perf_counter() - start


def run_shuffle_experiment(
    params: EncoderParams,
    cfg: EncoderConfig,
    index: DenseIndex,
    testset: Sequence[RetrievalExample],
    modes: Sequence[str],
    seed: int,
    *,
    width: int | None = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> dict[str, RunReport]:
    """Encode shuffled queries against the unshuffled index, per mode."""
    width = index.grid_width if width is None else width
    qrels = {ex.query.seq_id: ex.positive_doc_id for ex in testset}
    k = max(ks)
    out: dict[str, RunReport] = {}
    for mode_idx, mode in enumerate(modes):
        rng = np.random.default_rng([seed, mode_idx])
        queries = [
            (ex.query.seq_id, shuffle_variant(ex.query, mode, rng))
            for ex in testset
        ]
        rankings, elapsed = _evaluate_queries(queries, index, width, params, cfg, k)
        metrics = evaluate(rankings, qrels, ks)
        out[mode] = RunReport(
            experiment="ablate-shuffle",
            config={"mode": mode, "seed": seed, "width": width, "ks": list(ks)},
            rankings=rankings,
            metrics=metrics,
            timings={"encode_and_search_s": elapsed},
        )
    return out


@dataclass(frozen=True)
class SweepRow:
    width: int
    metrics: MetricsReport
    avg_seq_len_q: float
    avg_seq_len_d: float


def sweep_granularity(
    params: EncoderParams,
    cfg: EncoderConfig,
    corpus: Corpus,
    testset: Sequence[RetrievalExample],
    widths: Sequence[int],
    *,
    ks: Sequence[int] = DEFAULT_KS,
) -> dict[int, SweepRow]:
    """Re-encode corpus and queries at each width with the same params."""
    qrels = {ex.query.seq_id: ex.positive_doc_id for ex in testset}
    k = max(ks)
    out: dict[int, SweepRow] = {}
    for width in widths:
        index = index_corpus(corpus, width, params, cfg)
        queries = [(ex.query.seq_id, ex.query) for ex in testset]
        rankings, _ = _evaluate_queries(queries, index, width, params, cfg, k)
        metrics = evaluate(rankings, qrels, ks)
        q_lens = [sequence_length(ex.query, width, cfg) for ex in testset]
        d_lens = [
            sequence_length(doc, width, cfg) for doc in corpus.documents.values()
        ]
        out[width] = SweepRow(
            width=width,
            metrics=metrics,
            avg_seq_len_q=sum(q_lens) / len(q_lens),
            avg_seq_len_d=sum(d_lens) / len(d_lens),
        )
    return out


def write_sweep_csv(rows: Mapping[int, SweepRow], path: str | Path) -> None:
    ks = sorted(next(iter(rows.values())).metrics.recall) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        header = ["width", "avg_seq_len_q", "avg_seq_len_d"]
        for k in ks:
            header += [f"recall@{k}", f"mrr@{k}", f"ndcg@{k}"]
        writer.writerow(header)
        for width in sorted(rows):
            row = rows[width]
            values = [width, row.avg_seq_len_q, row.avg_seq_len_d]
            for k in ks:
                values += [
                    row.metrics.recall[k], row.metrics.mrr[k], row.metrics.ndcg[k]
                ]
            writer.writerow(values)


# --- Dominance distribution -------------------------------------------------------


@dataclass(frozen=True)
class DominanceReport:
    width: int
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    scores: tuple[float, ...]
    undefined_count: int


def _text_only(seq: InterleavedSequence) -> InterleavedSequence:
    return InterleavedSequence(
        items=tuple(it for it in seq.items if it.kind == "text"),
        seq_id=f"{seq.seq_id}#text",
        article_id=seq.article_id,
    )


def dominance_distribution(
    params: EncoderParams,
    cfg: EncoderConfig,
    seqs: Sequence[InterleavedSequence],
    widths: Sequence[int],
    *,
    bins: int = 41,
) -> dict[int, DominanceReport]:
    """Histogram of (d_i - d_t)/(d_i + d_t) per width over the sequences.

    d_t is the distance of the width-n embedding to the text-only embedding
    of the same sequence and d_i its distance to the width-24 embedding.
    Sequences where both distances vanish are counted as undefined.
    """
    edges = np.linspace(-1.0, 1.0, bins + 1)
    text_embs = [encode(_text_only(s), 24, params, cfg).values for s in seqs]
    full_embs = [encode(s, 24, params, cfg).values for s in seqs]
    out: dict[int, DominanceReport] = {}
    for width in widths:
        scores: list[float] = []
        undefined = 0
        for seq, e_text, e_full in zip(seqs, text_embs, full_embs):
            e_n = (
                e_full
                if width == 24
                else encode(seq, width, params, cfg).values
            )
            d_t = float(np.linalg.norm(e_n - e_text))
            d_i = float(np.linalg.norm(e_n - e_full))
            if d_i + d_t == 0.0:
                undefined += 1
                continue
            scores.append(dominance_score(d_i, d_t))
        counts, _ = np.histogram(scores, bins=edges)
        out[width] = DominanceReport(
            width=width,
            bin_edges=tuple(float(e) for e in edges),
            counts=tuple(int(c) for c in counts),
            scores=tuple(scores),
            undefined_count=undefined,
        )
    return out


# --- Efficiency benchmark ------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    width: int
    avg_seq_len_q: float
    avg_seq_len_d: float
    encode_time_s: float
    max_batch: int


def _activation_bytes(seq_len: int, model_dim: int) -> int:
    floats = seq_len * seq_len + _ACTIVATION_FLOATS_PER_TOKEN_DIM * seq_len * model_dim
    return 8 * floats


def bench_efficiency(
    params: EncoderParams,
    cfg: EncoderConfig,
    testset: Sequence[tuple[InterleavedSequence, InterleavedSequence]],
    pairs: int,
    widths: Sequence[int],
    *,
    seed: int = 0,
    repetitions: int = 3,
    mem_budget_bytes: int = _DEFAULT_MEM_BUDGET,
) -> list[BenchRow]:
    """Sequence lengths, median batch-encode wall time, and the largest
    power-of-two batch whose analytic activation footprint fits the budget,
    over a seeded sample of query-document pairs."""
    if pairs > len(testset):
        raise ValueError(f"testset has {len(testset)} pairs, need {pairs}")
    if pairs == 0:
        return []
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(testset), size=pairs, replace=False)
    sample = [testset[int(i)] for i in picks]
    rows: list[BenchRow] = []
    for width in widths:
        q_lens = [sequence_length(q, width, cfg) for q, _ in sample]
        d_lens = [sequence_length(d, width, cfg) for _, d in sample]
        times = []
        for _ in range(repetitions):
            start = time.perf_counter()
            for q, d in sample:
                encode(q, width, params, cfg)
                encode(d, width, params, cfg)
            times.append(time.perf_counter() - start)
        max_len = min(max(q_lens + d_lens), cfg.max_len)
        per_seq = _activation_bytes(max_len, cfg.model_dim)
        batch = 1
        while batch * 2 * per_seq <= mem_budget_bytes and batch < _MAX_BATCH_CAP:
            batch *= 2
        rows.append(
            BenchRow(
                width=width,
                avg_seq_len_q=sum(q_lens) / len(q_lens),
                avg_seq_len_d=sum(d_lens) / len(d_lens),
                encode_time_s=float(np.median(times)),
                max_batch=batch,
            )
        )
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["width", "avg_seq_len_q", "avg_seq_len_d", "encode_time_s", "max_batch"]
        )
        for row in rows:
            writer.writerow(
                [row.width, row.avg_seq_len_q, row.avg_seq_len_d,
                 row.encode_time_s, row.max_batch]
            )


def make_bench_pairs(
    count: int, *, images_per_side: int = 2, text_words: int = 4, seed: int = 0
) -> list[tuple[InterleavedSequence, InterleavedSequence]]:
    """Small synthetic query-document pairs for the efficiency benchmark."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        def _seq(role: str) -> InterleavedSequence:
            words = " ".join(f"w{int(rng.integers(5000))}" for _ in range(text_words))
            items = [text_item(words)]
            for j in range(images_per_side):
                items.append(image_item(f"synth:{int(rng.integers(2**62))}"))
            return InterleavedSequence(
                items=tuple(items), seq_id=f"bench-{role}-{i}"
            )

        pairs.append((_seq("q"), _seq("d")))
    return pairs


# --- Toy task ---------------------------------------------------------------------


@dataclass
class ToyTask:
    corpus: Corpus
    trainset: list[RetrievalExample]
    testset: list[RetrievalExample]
    qrels: dict[str, str]


def make_toy_task(
    num_docs: int = 200,
    *,
    seed: int = 7,
    train_ks: Sequence[int] = (2, 4),
    test_ks: Sequence[int] = (3,),
    steps_per_method: int = 4,
    methods_per_article: int = 3,
    shared_step_rate: float = 0.25,
    permuted_sibling_rate: float = 0.5,
) -> ToyTask:
    """Seeded synthetic retrieval task driven by the mock pipeline.

    Exactly num_docs documents (trailing methods trimmed), each with
    steps_per_method images; one train query per (doc, k in train_ks) and
    one test query per (doc, k in test_ks). train_ks and test_ks must be
    disjoint so test queries never coincide with training queries.
    """
    if set(train_ks) & set(test_ks):
        raise ValueError("train_ks and test_ks must be disjoint")
    num_articles = math.ceil(num_docs / methods_per_article)
    articles = synthetic_articles(
        num_articles,
        methods_per_article=methods_per_article,
        steps_per_method=steps_per_method,
        shared_step_rate=shared_step_rate,
        permuted_sibling_rate=permuted_sibling_rate,
        seed=seed,
    )
    excess = num_articles * methods_per_article - num_docs
    if excess:
        last = articles[-1]
        if excess >= len(last.methods):
            raise ValueError("cannot trim below one method per article")
        articles[-1] = ArticleRecord(
            article_id=last.article_id,
            goal=last.goal,
            methods=last.methods[: len(last.methods) - excess],
        )
    corpus = build_corpus(articles)
    clients = MockGenClients()
    trainset, _ = make_examples(corpus, clients, list(train_ks))
    testset, _ = make_examples(corpus, clients, list(test_ks))
    qrels = {ex.query.seq_id: ex.positive_doc_id for ex in testset}
    return ToyTask(corpus=corpus, trainset=trainset, testset=testset, qrels=qrels)
