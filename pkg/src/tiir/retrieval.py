"""Dense index, exact top-k search, ranking metrics, dominance diagnostic.

Search is an exact full scan over unit-norm vectors (cosine = dot), with
ties broken by ascending doc_id so rankings and metrics are deterministic.
Metrics use binary relevance with a single positive per query: Recall@k,
MRR@k, and nDCG@k with gain 1/log2(rank+1) (ideal DCG is 1).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Embedding, normalize_vector


@dataclass(frozen=True)
class DenseIndex:
    doc_ids: tuple[str, ...]
    matrix: np.ndarray  # (count, D) unit-norm rows
    grid_width: int

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


def build_index(embeddings: Sequence[tuple[str, Embedding]]) -> DenseIndex:
    """Index exactly the given vectors; rows are defensively renormalized."""
    if not embeddings:
        raise ValueError("cannot build an index from no embeddings")
    dim = embeddings[0][1].dim
    width = embeddings[0][1].grid_width
    seen: set[str] = set()
    rows = []
    ids = []
    for doc_id, emb in embeddings:
        if doc_id in seen:
            raise ValueError(f"duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        if emb.dim != dim:
            raise ValueError(f"{doc_id}: dimension mismatch ({emb.dim} != {dim})")
        if emb.grid_width != width:
            raise ValueError(f"{doc_id}: grid_width mismatch")
        rows.append(normalize_vector(emb.values))
        ids.append(doc_id)
    return DenseIndex(doc_ids=tuple(ids), matrix=np.stack(rows), grid_width=width)


@dataclass(frozen=True)
class RankedList:
    query_id: str
    entries: tuple[tuple[str, float], ...]  # (doc_id, score), descending

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    def rank_of(self, doc_id: str) -> int | None:
        """1-based rank of doc_id, or None if absent."""
        for i, (d, _) in enumerate(self.entries):
            if d == doc_id:
                return i + 1
        return None


def search(index: DenseIndex, q: Embedding, k: int) -> RankedList:
    """Exact top-min(k, count) by cosine; ties broken by ascending doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if q.dim != index.dim:
        raise ValueError(f"query dimension {q.dim} != index dimension {index.dim}")
    scores = index.matrix @ normalize_vector(q.values)
    ids = np.asarray(index.doc_ids)
    order = np.lexsort((ids, -scores))
    top = order[: min(k, len(index))]
    return RankedList(
        query_id="",
        entries=tuple((index.doc_ids[i], float(scores[i])) for i in top),
    )


@dataclass(frozen=True)
class MetricsReport:
    recall: dict[int, float]
    mrr: dict[int, float]
    ndcg: dict[int, float]
    num_queries: int

    def to_json_obj(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "mrr": {str(k): v for k, v in sorted(self.mrr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
        }


def evaluate(
    runs: Sequence[RankedList],
    qrels: Mapping[str, str],
    ks: Sequence[int],
) -> MetricsReport:
    """Binary single-positive metrics at each cutoff in ks."""
    if not runs:
        raise ValueError("no runs to evaluate")
    for run in runs:
        if run.query_id not in qrels:
            raise KeyError(f"missing qrel for query {run.query_id!r}")
    ks = sorted(set(int(k) for k in ks))
    recall = {k: 0.0 for k in ks}
    mrr = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    for run in runs:
        rank = run.rank_of(qrels[run.query_id])
        for k in ks:
            if rank is not None and rank <= k:
                recall[k] += 1.0
                mrr[k] += 1.0 / rank
                ndcg[k] += 1.0 / math.log2(rank + 1)
    n = len(runs)
    return MetricsReport(
        recall={k: v / n for k, v in recall.items()},
        mrr={k: v / n for k, v in mrr.items()},
        ndcg={k: v / n for k, v in ndcg.items()},
        num_queries=n,
    )


def dominance_score(d_i: float, d_t: float) -> float:
    """(d_i - d_t) / (d_i + d_t): -1 means visual-identical, 1 text-identical."""
    if d_i < 0 or d_t < 0:
        raise ValueError("distances must be non-negative")
    if d_i + d_t == 0:
        raise ValueError("dominance undefined: both distances are zero")
    return (d_i - d_t) / (d_i + d_t)


# --- Run files (TREC style) and metrics JSON ---------------------------------


def save_run(runs: Iterable[RankedList], path: str | Path) -> None:
    """Text lines: query_id doc_id rank score."""
    with open(path, "w", encoding="utf-8") as f:
        for run in runs:
            for rank, (doc_id, score) in enumerate(run.entries, start=1):
                f.write(f"{run.query_id} {doc_id} {rank} {score:.9g}\n")


def load_run(path: str | Path) -> list[RankedList]:
    per_query: dict[str, list[tuple[int, str, float]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields")
            qid, doc_id, rank_s, score_s = parts
            if qid not in per_query:
                per_query[qid] = []
                order.append(qid)
            per_query[qid].append((int(rank_s), doc_id, float(score_s)))
    out = []
    for qid in order:
        rows = sorted(per_query[qid])
        out.append(
            RankedList(
                query_id=qid, entries=tuple((d, s) for _, d, s in rows)
            )
        )
    return out


def load_qrels(path: str | Path) -> dict[str, str]:
    """TSV (or whitespace) lines: query_id doc_id."""
    qrels: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields")
            qrels[parts[0]] = parts[1]
    return qrels


def save_metrics(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json_obj(), f, indent=2, sort_keys=True)
        f.write("\n")
