"""Contrastive training: InfoNCE, granularity strategies, gradient checks.

The loss for one query is a temperature-scaled softmax over its positive
plus every other candidate in the batch (in-batch positives and, by
default, the other examples' hard negatives too). Four width strategies:

* ``fixed``: every sequence encoded at one grid width;
* ``rand``: one width drawn uniformly per batch from the 8 valid widths;
* ``mrl``: weighted sum of per-width losses, both sides at the same width;
* ``mean``: mean over all width pairs (queries at m, documents at m'),
  encoding each sequence once per width and reusing the embeddings.

All gradients are analytic and verified against central finite differences
by :func:`grad_check`. The optimizer is plain SGD with linear warmup (a
momentum flag exists, default off), so training is exactly reproducible
from a seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Corpus, InterleavedSequence, RetrievalExample
from .encoder import (
    EncoderConfig,
    EncoderParams,
    assemble_input,
    backward,
    forward,
    zeros_like_params,
)
from .vision import VALID_GRID_WIDTHS, check_grid_width

STRATEGY_FIXED = "fixed"
STRATEGY_RAND = "rand"
STRATEGY_MRL = "mrl"
STRATEGY_MEAN = "mean"
STRATEGIES = (STRATEGY_FIXED, STRATEGY_RAND, STRATEGY_MRL, STRATEGY_MEAN)


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.05
    batch_size: int = 32
    learning_rate: float = 5e-5
    warmup_fraction: float = 0.1
    epochs: int = 3
    strategy: str = STRATEGY_FIXED
    fixed_width: int = 24
    widths: tuple[int, ...] = VALID_GRID_WIDTHS
    mrl_weights: tuple[float, ...] | None = None
    momentum: float = 0.0
    cross_hard_negatives: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        check_grid_width(self.fixed_width)
        for w in self.widths:
            check_grid_width(w)
        if self.mrl_weights is not None:
            if len(self.mrl_weights) != len(self.widths):
                raise ValueError("mrl_weights must match widths")
            if abs(sum(self.mrl_weights) - 1.0) > 1e-9:
                raise ValueError("mrl_weights must sum to 1")

    def weights(self) -> tuple[float, ...]:
        if self.mrl_weights is not None:
            return self.mrl_weights
        return tuple(1.0 / len(self.widths) for _ in self.widths)


# --- InfoNCE -----------------------------------------------------------------


def _cosine_row(q: np.ndarray, cands: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    nq = float(np.linalg.norm(q))
    nc = np.linalg.norm(cands, axis=1)
    if nq == 0.0 or np.any(nc == 0.0):
        raise ValueError("cosine undefined for zero vectors")
    cos = (cands @ q) / (nq * nc)
    return cos, nq, nc


def _softmax_loss(cos: np.ndarray, pos: int, temperature: float) -> tuple[float, np.ndarray]:
    """Stable -log softmax at position pos; returns (loss, dloss/dcos)."""
    z = cos / temperature
    m = float(z.max())
    exp = np.exp(z - m)
    total = float(exp.sum())
    loss = math.log(total) + m - float(z[pos])
    p = exp / total
    p[pos] -= 1.0
    return loss, p / temperature


def info_nce(
    q: np.ndarray, pos: np.ndarray, negs: Sequence[np.ndarray], temperature: float
) -> float:
    """InfoNCE over cosine similarities, positive first among candidates."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    q = np.asarray(q, dtype=np.float64)
    cands = np.stack([np.asarray(pos, dtype=np.float64)] + [np.asarray(n) for n in negs])
    if cands.shape[1] != q.shape[0]:
        raise ValueError("embedding dimension mismatch")
    cos, _, _ = _cosine_row(q, cands)
    loss, _ = _softmax_loss(cos, 0, temperature)
    return loss


def info_nce_with_grad(
    q: np.ndarray, pos: np.ndarray, negs: Sequence[np.ndarray], temperature: float
) -> tuple[float, np.ndarray, np.ndarray, list[np.ndarray]]:
    """InfoNCE plus analytic gradients w.r.t. the raw (unnormalized) inputs."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    q = np.asarray(q, dtype=np.float64)
    cands = np.stack([np.asarray(pos, dtype=np.float64)] + [np.asarray(n) for n in negs])
    if cands.shape[1] != q.shape[0]:
        raise ValueError("embedding dimension mismatch")
    loss, d_q, d_cands = _info_nce_core(q, cands, 0, temperature)
    return loss, d_q, d_cands[0], [d_cands[j] for j in range(1, len(cands))]


def _info_nce_core(
    q: np.ndarray, cands: np.ndarray, pos: int, temperature: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients through the cosine for one query and its candidates."""
    cos, nq, nc = _cosine_row(q, cands)
    loss, g = _softmax_loss(cos, pos, temperature)
    # dcos_j/dq = c_j/(nq*nc_j) - cos_j * q/nq^2 ; dcos_j/dc_j analogous
    d_q = (g / nc) @ cands / nq - float(g @ cos) * q / (nq * nq)
    d_cands = (g / (nq * nc))[:, None] * q[None, :] - (
        (g * cos) / (nc * nc)
    )[:, None] * cands
    return loss, d_q, d_cands


# --- Batches -----------------------------------------------------------------


@dataclass
class Batch:
    """Examples with their resolved positive and one hard negative each."""

    examples: list[RetrievalExample]
    positives: list[InterleavedSequence]
    hard_negatives: list[InterleavedSequence]

    def __post_init__(self) -> None:
        if not self.examples:
            raise ValueError("empty batch")
        if not (len(self.examples) == len(self.positives) == len(self.hard_negatives)):
            raise ValueError("batch lists must align")


def sample_hard_negative(
    example: RetrievalExample, corpus: Corpus, rng: np.random.Generator
) -> str:
    """Uniform same-article sibling of the positive; corpus-wide fallback."""
    siblings = corpus.siblings(example.positive_doc_id)
    if siblings:
        return siblings[int(rng.integers(len(siblings)))]
    others = [d for d in corpus.documents if d != example.positive_doc_id]
    if not others:
        raise ValueError("cannot sample a hard negative from a single-doc corpus")
    return others[int(rng.integers(len(others)))]


def make_batch(
    examples: Sequence[RetrievalExample], corpus: Corpus, rng: np.random.Generator
) -> Batch:
    positives = []
    negatives = []
    for ex in examples:
        positives.append(corpus[ex.positive_doc_id])
        if ex.hard_negative_doc_ids:
            neg_id = ex.hard_negative_doc_ids[
                int(rng.integers(len(ex.hard_negative_doc_ids)))
            ]
        else:
            neg_id = sample_hard_negative(ex, corpus, rng)
        negatives.append(corpus[neg_id])
    return Batch(examples=list(examples), positives=positives, hard_negatives=negatives)


def _candidate_pool(batch: Batch) -> tuple[list[InterleavedSequence], list[int], list[int]]:
    """Dedup candidate docs (positives first); per-example pos/neg indices."""
    index: dict[str, int] = {}
    docs: list[InterleavedSequence] = []

    def _add(seq: InterleavedSequence) -> int:
        if seq.seq_id not in index:
            index[seq.seq_id] = len(docs)
            docs.append(seq)
        return index[seq.seq_id]

    pos_idx = [_add(p) for p in batch.positives]
    neg_idx = [_add(n) for n in batch.hard_negatives]
    return docs, pos_idx, neg_idx


def _combo_plan(
    train_cfg: TrainConfig, rng: np.random.Generator | None
) -> list[tuple[int, int, float]]:
    """(query width, doc width, weight) triples for the configured strategy."""
    if train_cfg.strategy == STRATEGY_FIXED:
        n = train_cfg.fixed_width
        return [(n, n, 1.0)]
    if train_cfg.strategy == STRATEGY_RAND:
        if rng is None:
            raise ValueError("rand strategy needs an rng")
        n = VALID_GRID_WIDTHS[int(rng.integers(len(VALID_GRID_WIDTHS)))]
        return [(n, n, 1.0)]
    if train_cfg.strategy == STRATEGY_MRL:
        return [(m, m, w) for m, w in zip(train_cfg.widths, train_cfg.weights())]
    m_count = len(train_cfg.widths)
    weight = 1.0 / (m_count * m_count)
    return [(mq, md, weight) for mq, md in product(train_cfg.widths, train_cfg.widths)]


def _encode_embeddings(
    seqs: Sequence[InterleavedSequence],
    widths: Sequence[int],
    params: EncoderParams,
    cfg: EncoderConfig,
) -> dict[int, np.ndarray]:
    dtype = np.dtype(cfg.compute_dtype)
    out: dict[int, np.ndarray] = {}
    for w in widths:
        rows = []
        for seq in seqs:
            ts = assemble_input(seq, w, cfg, params)
            e, _ = forward(ts, params, dtype=dtype)
            rows.append(e)
        out[w] = np.stack(rows)
    return out


def _batch_loss_impl(
    batch: Batch,
    params: EncoderParams,
    cfg: EncoderConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator | None,
    want_grad: bool,
) -> tuple[float, EncoderParams | None, dict]:
    plan = _combo_plan(train_cfg, rng)
    q_widths = sorted({wq for wq, _, _ in plan})
    d_widths = sorted({wd for _, wd, _ in plan})
    docs, pos_idx, neg_idx = _candidate_pool(batch)
    queries = [ex.query for ex in batch.examples]
    n_queries = len(queries)

    q_embs = _encode_embeddings(queries, q_widths, params, cfg)
    d_embs = _encode_embeddings(docs, d_widths, params, cfg)

    if train_cfg.cross_hard_negatives:
        cand_lists = [list(range(len(docs)))] * n_queries
    else:
        base = list(dict.fromkeys(pos_idx))
        cand_lists = [
            base + ([neg_idx[i]] if neg_idx[i] not in base else [])
            for i in range(n_queries)
        ]

    d_q: dict[int, np.ndarray] = {w: np.zeros_like(q_embs[w]) for w in q_widths}
    d_d: dict[int, np.ndarray] = {w: np.zeros_like(d_embs[w]) for w in d_widths}
    total = 0.0
    for wq, wd, weight in plan:
        combo_loss = 0.0
        for i in range(n_queries):
            cand_idx = cand_lists[i]
            cands = d_embs[wd][cand_idx]
            pos_in_cands = cand_idx.index(pos_idx[i])
            if want_grad:
                loss_i, g_q, g_cands = _info_nce_core(
                    q_embs[wq][i], cands, pos_in_cands, train_cfg.temperature
                )
                scale = weight / n_queries
                d_q[wq][i] += scale * g_q
                np.add.at(d_d[wd], cand_idx, scale * g_cands)
            else:
                cos, _, _ = _cosine_row(q_embs[wq][i], cands)
                loss_i, _ = _softmax_loss(cos, pos_in_cands, train_cfg.temperature)
            combo_loss += loss_i
        total += weight * combo_loss / n_queries

    info = {"plan": plan, "widths": sorted(set(q_widths) | set(d_widths))}
    if not want_grad:
        return total, None, info

    grads = zeros_like_params(params)
    dtype = np.dtype(cfg.compute_dtype)
    for w in q_widths:
        for i, seq in enumerate(queries):
            g = d_q[w][i]
            if not g.any():
                continue
            ts = assemble_input(seq, w, cfg, params)
            _, fc = forward(ts, params, keep_cache=True, dtype=dtype)
            backward(g, fc, params, grads)
    for w in d_widths:
        for j, seq in enumerate(docs):
            g = d_d[w][j]
            if not g.any():
                continue
            ts = assemble_input(seq, w, cfg, params)
            _, fc = forward(ts, params, keep_cache=True, dtype=dtype)
            backward(g, fc, params, grads)
    return total, grads, info


def batch_loss(
    batch: Batch,
    params: EncoderParams,
    cfg: EncoderConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> float:
    loss, _, _ = _batch_loss_impl(batch, params, cfg, train_cfg, rng, want_grad=False)
    return loss


def batch_loss_and_grad(
    batch: Batch,
    params: EncoderParams,
    cfg: EncoderConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, EncoderParams, dict]:
    loss, grads, info = _batch_loss_impl(batch, params, cfg, train_cfg, rng, want_grad=True)
    return loss, grads, info


# --- Gradient verification ---------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    coords_checked: int
    passed: bool


def grad_check(
    loss_and_grad_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0: np.ndarray,
    tolerance: float = 1e-4,
    *,
    rng: np.random.Generator,
    fraction: float = 0.01,
    min_coords: int = 50,
    step: float = 1e-4,
    labels: Sequence[tuple[str, slice]] | None = None,
) -> GradCheckReport:
    """Central finite differences vs analytic gradient on sampled coordinates.

    The error per coordinate is relative where the gradient is appreciable
    and falls back to the absolute difference where both values are tiny
    (symmetric ties give 0 vs 0).
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    loss0, grad0 = loss_and_grad_fn(theta0)
    if not math.isfinite(loss0):
        raise FloatingPointError(f"non-finite loss {loss0!r} at the check point")
    if grad0.shape != theta0.shape:
        raise ValueError("analytic gradient shape mismatch")
    total = theta0.size
    count = min(total, max(min_coords, int(fraction * total)))
    coords = rng.choice(total, size=count, replace=False)

    def _label(i: int) -> str:
        if labels:
            for name, sl in labels:
                if sl.start <= i < sl.stop:
                    return f"{name}[{i - sl.start}]"
        return f"theta[{i}]"

    max_err = 0.0
    worst = ""
    for i in coords:
        probe = theta0.copy()
        probe[i] = theta0[i] + step
        lo_plus, _ = loss_and_grad_fn(probe)
        probe[i] = theta0[i] - step
        lo_minus, _ = loss_and_grad_fn(probe)
        if not (math.isfinite(lo_plus) and math.isfinite(lo_minus)):
            raise FloatingPointError(f"non-finite loss while probing {_label(int(i))}")
        fd = (lo_plus - lo_minus) / (2.0 * step)
        an = float(grad0[i])
        denom = max(abs(fd), abs(an))
        err = abs(fd - an) / denom if denom > 1e-6 else abs(fd - an)
        if err > max_err:
            max_err = err
            worst = _label(int(i))
    return GradCheckReport(
        max_rel_err=max_err,
        worst_param=worst,
        coords_checked=count,
        passed=max_err <= tolerance,
    )


def params_loss_fn(
    template: EncoderParams,
    fn: Callable[[EncoderParams], tuple[float, EncoderParams]],
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Adapt a params-space loss/grad function to the flat-vector interface."""

    def wrapped(theta: np.ndarray) -> tuple[float, np.ndarray]:
        params = template.with_vector(theta)
        loss, grads = fn(params)
        return loss, grads.to_vector()

    return wrapped


# --- Training loop -----------------------------------------------------------


@dataclass(frozen=True)
class LossRecord:
    step: int
    epoch: int
    strategy: str
    widths: str
    loss: float


@dataclass
class TrainResult:
    params: EncoderParams
    log: list[LossRecord]


def write_loss_log(log: Sequence[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "epoch", "strategy", "widths", "loss"])
        for rec in log:
            writer.writerow([rec.step, rec.epoch, rec.strategy, rec.widths, rec.loss])


def train(
    train_cfg: TrainConfig,
    trainset: Sequence[RetrievalExample],
    corpus: Corpus,
    params: EncoderParams,
    cfg: EncoderConfig,
) -> TrainResult:
    """SGD with linear warmup over seeded, shuffled batches.

    The input params are not mutated; the trained copy is returned together
    with the per-step loss log.
    """
    if not trainset:
        raise ValueError("trainset is empty")
    params = params.copy()
    velocity = zeros_like_params(params) if train_cfg.momentum else None
    rng = np.random.default_rng(train_cfg.seed)
    n_batches = math.ceil(len(trainset) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * n_batches
    warmup_steps = max(1, int(round(train_cfg.warmup_fraction * total_steps)))
    log: list[LossRecord] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(trainset))
        for b in range(n_batches):
            chunk = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            batch = make_batch([trainset[i] for i in chunk], corpus, rng)
            loss, grads, info = batch_loss_and_grad(batch, params, cfg, train_cfg, rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss!r} at step {step} (epoch {epoch})"
                )
            lr = train_cfg.learning_rate * min(1.0, (step + 1) / warmup_steps)
            if velocity is not None:
                for (_, v), (_, g) in zip(
                    velocity.named_arrays(), grads.named_arrays()
                ):
                    v *= train_cfg.momentum
                    v += g
                update = velocity
            else:
                update = grads
            for (_, p), (_, u) in zip(params.named_arrays(), update.named_arrays()):
                p -= lr * u
            log.append(
                LossRecord(
                    step=step,
                    epoch=epoch,
                    strategy=train_cfg.strategy,
                    widths="+".join(str(w) for w in info["widths"]),
                    loss=loss,
                )
            )
            step += 1
    return TrainResult(params=params, log=log)
