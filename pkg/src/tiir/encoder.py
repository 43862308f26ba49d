"""Miniature differentiable interleaved encoder with analytic gradients.

The backbone is a configurable stack (default 1) of pre-norm transformer
blocks with single-head causal self-attention and a GELU MLP, small enough
that the full backward pass is hand-written and verifiable against finite
differences. Text goes through a hashing tokenizer; each image contributes
IMG-BEGIN, n*n projected-then-pooled visual tokens, and IMG-END. The final
hidden state at the EOS position, L2-normalized, is the sequence embedding.

Everything runs in float64 and is deterministic: parameter initialization
comes from the same splitmix64 stream as the synthetic featurizer, keyed on
(config seed, tensor name).
"""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import Embedding, InterleavedSequence
from .vision import (
    GRID_SIDE,
    check_grid_width,
    featurize_image,
    unit_stream,
)

CKPT_MAGIC = b"TIIRCKPT"

SPECIAL_NAMES = ("bos", "eos", "img_begin", "img_end")
BOS, EOS, IMG_BEGIN, IMG_END = range(4)

SOURCE_TEXT = "text"
SOURCE_VISUAL = "visual"
SOURCE_SPECIAL = "special"

_WORD_RE = re.compile(r"[a-z0-9_]+")
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def fnv1a64(data: str | bytes) -> int:
    """FNV-1a 64-bit hash; the stable hash behind tokenization and seeds."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 32
    vocab_buckets: int = 4096
    max_len: int = 4096
    channels: int = 16
    layers: int = 1
    seed: int = 0
    compute_dtype: str = "float64"  # block-stack math; params always float64

    def __post_init__(self) -> None:
        if min(self.model_dim, self.vocab_buckets, self.layers) < 1:
            raise ValueError("model_dim, vocab_buckets and layers must be >= 1")
        if self.max_len < 8:
            raise ValueError("max_len must be >= 8")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class EncoderParams:
    """All learnable tensors. Frozen shapes; values mutate only in training."""

    text_emb: np.ndarray  # (V, D)
    vis_proj_w: np.ndarray  # (channels, D)
    vis_proj_b: np.ndarray  # (D,)
    pos_emb: np.ndarray  # (max_len, D)
    specials: np.ndarray  # (4, D), rows ordered as SPECIAL_NAMES
    layers: tuple[LayerParams, ...]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "text_emb", self.text_emb
        yield "vis_proj_w", self.vis_proj_w
        yield "vis_proj_b", self.vis_proj_b
        yield "pos_emb", self.pos_emb
        yield "specials", self.specials
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.wq", layer.wq
            yield f"layer{i}.wk", layer.wk
            yield f"layer{i}.wv", layer.wv
            yield f"layer{i}.wo", layer.wo
            yield f"layer{i}.w1", layer.w1
            yield f"layer{i}.w2", layer.w2

    def config(self, seed: int = 0) -> EncoderConfig:
        """Reconstruct the shape-determining config from the tensors."""
        return EncoderConfig(
            model_dim=self.text_emb.shape[1],
            vocab_buckets=self.text_emb.shape[0],
            max_len=self.pos_emb.shape[0],
            channels=self.vis_proj_w.shape[0],
            layers=len(self.layers),
            seed=seed,
        )

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            text_emb=self.text_emb.copy(),
            vis_proj_w=self.vis_proj_w.copy(),
            vis_proj_b=self.vis_proj_b.copy(),
            pos_emb=self.pos_emb.copy(),
            specials=self.specials.copy(),
            layers=tuple(
                LayerParams(
                    wq=l.wq.copy(), wk=l.wk.copy(), wv=l.wv.copy(),
                    wo=l.wo.copy(), w1=l.w1.copy(), w2=l.w2.copy(),
                )
                for l in self.layers
            ),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def with_vector(self, vec: np.ndarray) -> "EncoderParams":
        out = self.copy()
        offset = 0
        for _, arr in out.named_arrays():
            size = arr.size
            arr[...] = vec[offset : offset + size].reshape(arr.shape)
            offset += size
        if offset != vec.size:
            raise ValueError(f"vector has {vec.size} entries, params need {offset}")
        return out

    def named_slices(self) -> list[tuple[str, slice]]:
        """Flat-vector slice of each named tensor, matching to_vector order."""
        out = []
        offset = 0
        for name, arr in self.named_arrays():
            out.append((name, slice(offset, offset + arr.size)))
            offset += arr.size
        return out


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, ch = cfg.model_dim, cfg.channels
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("text_emb", (cfg.vocab_buckets, d)),
        ("vis_proj_w", (ch, d)),
        ("vis_proj_b", (d,)),
        ("pos_emb", (cfg.max_len, d)),
        ("specials", (4, d)),
    ]
    for i in range(cfg.layers):
        shapes += [
            (f"layer{i}.wq", (d, d)),
            (f"layer{i}.wk", (d, d)),
            (f"layer{i}.wv", (d, d)),
            (f"layer{i}.wo", (d, d)),
            (f"layer{i}.w1", (d, 4 * d)),
            (f"layer{i}.w2", (4 * d, d)),
        ]
    return shapes


def _assemble_params(cfg: EncoderConfig, tensors: dict[str, np.ndarray]) -> EncoderParams:
    layers = tuple(
        LayerParams(
            wq=tensors[f"layer{i}.wq"],
            wk=tensors[f"layer{i}.wk"],
            wv=tensors[f"layer{i}.wv"],
            wo=tensors[f"layer{i}.wo"],
            w1=tensors[f"layer{i}.w1"],
            w2=tensors[f"layer{i}.w2"],
        )
        for i in range(cfg.layers)
    )
    return EncoderParams(
        text_emb=tensors["text_emb"],
        vis_proj_w=tensors["vis_proj_w"],
        vis_proj_b=tensors["vis_proj_b"],
        pos_emb=tensors["pos_emb"],
        specials=tensors["specials"],
        layers=layers,
    )


def init_params(cfg: EncoderConfig) -> EncoderParams:
    """Deterministic init: splitmix64 stream keyed on (seed, tensor name),
    uniform in [-1, 1) scaled by 1/sqrt(D); the projection bias starts at 0.
    """
    scale = 1.0 / math.sqrt(cfg.model_dim)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg):
        if name == "vis_proj_b":
            tensors[name] = np.zeros(shape, dtype=np.float64)
            continue
        seed = fnv1a64(f"{cfg.seed}:{name}")
        flat = unit_stream(seed, int(np.prod(shape))) * scale
        tensors[name] = flat.reshape(shape)
    return _assemble_params(cfg, tensors)


def zeros_like_params(params: EncoderParams) -> EncoderParams:
    tensors = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
    cfg = params.config()
    return _assemble_params(cfg, tensors)


def add_scaled(target: EncoderParams, delta: EncoderParams, factor: float) -> None:
    """In-place target += factor * delta over every tensor."""
    for (_, t), (_, d) in zip(target.named_arrays(), delta.named_arrays()):
        t += factor * d


# --- Tokenization and input assembly ----------------------------------------


def tokenize_text(s: str, cfg: EncoderConfig) -> list[int]:
    """Lowercase, split on whitespace/punctuation, FNV-1a 64 hash mod V."""
    return [fnv1a64(w) % cfg.vocab_buckets for w in _WORD_RE.findall(s.lower())]


@dataclass(frozen=True)
class TokenRecord:
    """Provenance of one input position: where its vector comes from."""

    source: str
    token_id: int = -1  # text bucket id
    special: int = -1  # index into SPECIAL_NAMES
    image_index: int = -1  # which image in the sequence
    grid_token: int = -1  # row-major index into the pooled n*n grid


@dataclass
class ImageTokens:
    """Per-image forward state kept for the backward scatter."""

    features: np.ndarray  # (576, channels) raw featurizer output
    pooled: np.ndarray  # (n*n, D) projected-then-pooled visual tokens
    n: int


_CODE_TEXT, _CODE_VISUAL, _CODE_SPECIAL = 0, 1, 2
_CODE_NAMES = (SOURCE_TEXT, SOURCE_VISUAL, SOURCE_SPECIAL)


@dataclass
class TokenizedSequence:
    """Token provenance as parallel arrays (position-indexed).

    ref_a holds the text bucket id, image index, or special index depending
    on the source code; ref_b holds the pooled-grid token index for visual
    rows and -1 elsewhere.
    """

    source_codes: np.ndarray  # (T,) uint8
    ref_a: np.ndarray  # (T,) int64
    ref_b: np.ndarray  # (T,) int64
    images: list[ImageTokens]
    n: int
    truncated: bool

    def __len__(self) -> int:
        return int(self.source_codes.shape[0])

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(_CODE_NAMES[c] for c in self.source_codes)

    @property
    def records(self) -> tuple[TokenRecord, ...]:
        out = []
        for code, a, b in zip(self.source_codes, self.ref_a, self.ref_b):
            if code == _CODE_TEXT:
                out.append(TokenRecord(source=SOURCE_TEXT, token_id=int(a)))
            elif code == _CODE_SPECIAL:
                out.append(TokenRecord(source=SOURCE_SPECIAL, special=int(a)))
            else:
                out.append(
                    TokenRecord(
                        source=SOURCE_VISUAL, image_index=int(a), grid_token=int(b)
                    )
                )
        return tuple(out)


def _project_and_pool(
    features: np.ndarray, n: int, params: EncoderParams
) -> np.ndarray:
    """Project 576 features to D, rearrange 24x24, mean-pool to n x n, flatten."""
    projected = features @ params.vis_proj_w + params.vis_proj_b  # (576, D)
    d_model = projected.shape[1]
    grid = projected.reshape(GRID_SIDE, GRID_SIDE, d_model)
    k = GRID_SIDE // n
    blocks = (
        grid.reshape(n, k, n, k, d_model)
        .transpose(0, 2, 1, 3, 4)
        .reshape(n, n, k * k, d_model)
    )
    acc = np.zeros((n, n, d_model), dtype=np.float64)
    for t in range(k * k):
        acc += blocks[:, :, t, :]
    return (acc / (k * k)).reshape(n * n, d_model)


def assemble_input(
    seq: InterleavedSequence, n: int, cfg: EncoderConfig, params: EncoderParams
) -> TokenizedSequence:
    """Traverse items in order and build the token record list.

    Layout: BOS, then per item either its text tokens or IMG-BEGIN + n*n
    visual tokens + IMG-END, then EOS. If the result exceeds max_len, the
    tail is dropped but EOS is kept as the final record.
    """
    check_grid_width(n)
    rows: list[tuple[int, int, int]] = [(_CODE_SPECIAL, BOS, -1)]
    images: list[ImageTokens] = []
    for item in seq.items:
        if item.kind == "text":
            for tid in tokenize_text(item.text, cfg):
                rows.append((_CODE_TEXT, tid, -1))
        else:
            features = featurize_image(item.image_ref, cfg.channels).data.reshape(
                GRID_SIDE * GRID_SIDE, cfg.channels
            )
            pooled = _project_and_pool(features, n, params)
            img_idx = len(images)
            images.append(ImageTokens(features=features, pooled=pooled, n=n))
            rows.append((_CODE_SPECIAL, IMG_BEGIN, -1))
            rows.extend((_CODE_VISUAL, img_idx, t) for t in range(n * n))
            rows.append((_CODE_SPECIAL, IMG_END, -1))
    rows.append((_CODE_SPECIAL, EOS, -1))
    truncated = len(rows) > cfg.max_len
    if truncated:
        rows = rows[: cfg.max_len - 1] + [rows[-1]]
    arr = np.asarray(rows, dtype=np.int64)
    return TokenizedSequence(
        source_codes=arr[:, 0].astype(np.uint8),
        ref_a=arr[:, 1],
        ref_b=arr[:, 2],
        images=images,
        n=n,
        truncated=truncated,
    )


def sequence_length(seq: InterleavedSequence, n: int, cfg: EncoderConfig) -> int:
    """Assembled length before truncation: BOS/EOS + text tokens + images*(n*n+2)."""
    check_grid_width(n)
    total = 2
    for item in seq.items:
        if item.kind == "text":
            total += len(tokenize_text(item.text, cfg))
        else:
            total += n * n + 2
    return total


# --- Forward / backward ------------------------------------------------------


def _layer_norm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    return (x - mu) * inv, inv


def _layer_norm_backward(dy: np.ndarray, y: np.ndarray, inv: np.ndarray) -> np.ndarray:
    mean_dy = dy.mean(axis=-1, keepdims=True)
    mean_dyy = (dy * y).mean(axis=-1, keepdims=True)
    return inv * (dy - mean_dy - y * mean_dyy)


def _gelu(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x2 * x)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (
        1.0 + 3.0 * _GELU_A * x2
    )


@dataclass
class _LayerCache:
    u: np.ndarray
    inv1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray
    av: np.ndarray
    u2: np.ndarray
    inv2: np.ndarray
    h1: np.ndarray
    g1: np.ndarray


@dataclass
class ForwardCache:
    tokenized: TokenizedSequence
    layer_caches: list[_LayerCache]
    h: np.ndarray  # pre-normalization EOS state
    norm: float
    embedding: np.ndarray


@lru_cache(maxsize=8)
def _causal_mask(t_len: int) -> np.ndarray:
    idx = np.arange(t_len)
    mask = idx[:, None] < idx[None, :]
    mask.setflags(write=False)
    return mask


def _input_matrix(
    ts: TokenizedSequence, params: EncoderParams, dtype: np.dtype
) -> np.ndarray:
    t_len = len(ts)
    d_model = params.text_emb.shape[1]
    x = np.empty((t_len, d_model), dtype=dtype)
    text_pos = np.nonzero(ts.source_codes == _CODE_TEXT)[0]
    spec_pos = np.nonzero(ts.source_codes == _CODE_SPECIAL)[0]
    vis_pos = np.nonzero(ts.source_codes == _CODE_VISUAL)[0]
    if text_pos.size:
        x[text_pos] = params.text_emb[ts.ref_a[text_pos]]
    if spec_pos.size:
        x[spec_pos] = params.specials[ts.ref_a[spec_pos]]
    if vis_pos.size:
        img_ids = ts.ref_a[vis_pos]
        tok_ids = ts.ref_b[vis_pos]
        for i, img in enumerate(ts.images):
            sel = img_ids == i
            if sel.any():
                x[vis_pos[sel]] = img.pooled[tok_ids[sel]]
    x += params.pos_emb[:t_len].astype(dtype, copy=False)
    return x


def _block_forward(
    x: np.ndarray, layer: LayerParams, keep_cache: bool
) -> tuple[np.ndarray, _LayerCache | None]:
    t_len, d_model = x.shape
    dtype = x.dtype
    scale = dtype.type(1.0 / math.sqrt(d_model))
    wq = layer.wq.astype(dtype, copy=False)
    wk = layer.wk.astype(dtype, copy=False)
    wv = layer.wv.astype(dtype, copy=False)
    wo = layer.wo.astype(dtype, copy=False)
    w1 = layer.w1.astype(dtype, copy=False)
    w2 = layer.w2.astype(dtype, copy=False)
    u, inv1 = _layer_norm(x)
    q = u @ wq
    k = u @ wk
    v = u @ wv
    s = (q @ k.T) * scale
    s[_causal_mask(t_len)] = -np.inf
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    a = s
    av = a @ v
    x1 = x + av @ wo
    u2, inv2 = _layer_norm(x1)
    h1 = u2 @ w1
    g1 = _gelu(h1)
    out = x1 + g1 @ w2
    cache = (
        _LayerCache(u=u, inv1=inv1, q=q, k=k, v=v, a=a, av=av, u2=u2, inv2=inv2,
                    h1=h1, g1=g1)
        if keep_cache
        else None
    )
    return out, cache


def _block_backward(
    d_out: np.ndarray, layer: LayerParams, cache: _LayerCache, grad: LayerParams
) -> np.ndarray:
    d_model = d_out.shape[1]
    dtype = cache.u.dtype
    scale = dtype.type(1.0 / math.sqrt(d_model))
    wq = layer.wq.astype(dtype, copy=False)
    wk = layer.wk.astype(dtype, copy=False)
    wv = layer.wv.astype(dtype, copy=False)
    wo = layer.wo.astype(dtype, copy=False)
    w1 = layer.w1.astype(dtype, copy=False)
    w2 = layer.w2.astype(dtype, copy=False)
    # MLP branch
    d_x1 = d_out.copy()
    d_g1 = d_out @ w2.T
    grad.w2 += cache.g1.T @ d_out
    d_h1 = d_g1 * _gelu_grad(cache.h1)
    grad.w1 += cache.u2.T @ d_h1
    d_x1 += _layer_norm_backward(d_h1 @ w1.T, cache.u2, cache.inv2)
    # attention branch
    d_x = d_x1.copy()
    d_av = d_x1 @ wo.T
    grad.wo += cache.av.T @ d_x1
    d_a = d_av @ cache.v.T
    d_v = cache.a.T @ d_av
    d_s = cache.a * (d_a - (d_a * cache.a).sum(axis=-1, keepdims=True))
    d_q = (d_s @ cache.k) * scale
    d_k = (d_s.T @ cache.q) * scale
    grad.wq += cache.u.T @ d_q
    grad.wk += cache.u.T @ d_k
    grad.wv += cache.u.T @ d_v
    d_u = d_q @ wq.T + d_k @ wk.T + d_v @ wv.T
    d_x += _layer_norm_backward(d_u, cache.u, cache.inv1)
    return d_x


def forward(
    ts: TokenizedSequence,
    params: EncoderParams,
    keep_cache: bool = False,
    dtype: np.dtype = np.float64,
) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the block stack; returns the unit-norm float64 embedding (+ cache)."""
    x = _input_matrix(ts, params, np.dtype(dtype))
    layer_caches: list[_LayerCache] = []
    for layer in params.layers:
        x, cache = _block_forward(x, layer, keep_cache)
        if keep_cache:
            layer_caches.append(cache)
    h = x[-1].astype(np.float64)
    norm = float(np.linalg.norm(h))
    if norm == 0.0:
        raise FloatingPointError("EOS state collapsed to the zero vector")
    e = h / norm
    fc = (
        ForwardCache(
            tokenized=ts, layer_caches=layer_caches, h=h.copy(), norm=norm,
            embedding=e.copy(),
        )
        if keep_cache
        else None
    )
    return e, fc


def encode(
    seq: InterleavedSequence, n: int, params: EncoderParams, cfg: EncoderConfig
) -> Embedding:
    """Embed an interleaved sequence at grid width n."""
    ts = assemble_input(seq, n, cfg, params)
    e, _ = forward(ts, params, dtype=np.dtype(cfg.compute_dtype))
    return Embedding(values=e, grid_width=n, normalized=True)


def backward(
    d_embedding: np.ndarray,
    cache: ForwardCache,
    params: EncoderParams,
    grads: EncoderParams,
) -> None:
    """Accumulate dLoss/dParams into grads, given dLoss/dEmbedding."""
    ts = cache.tokenized
    t_len = len(ts)
    e = cache.embedding
    d_h = (d_embedding - e * float(e @ d_embedding)) / cache.norm
    dtype = cache.layer_caches[0].u.dtype if cache.layer_caches else np.float64
    d_x = np.zeros((t_len, e.shape[0]), dtype=dtype)
    d_x[-1] = d_h
    for layer, lcache, lgrad in zip(
        reversed(params.layers), reversed(cache.layer_caches), reversed(grads.layers)
    ):
        d_x = _block_backward(d_x, layer, lcache, lgrad)
    grads.pos_emb[:t_len] += d_x
    text_pos = np.nonzero(ts.source_codes == _CODE_TEXT)[0]
    spec_pos = np.nonzero(ts.source_codes == _CODE_SPECIAL)[0]
    vis_pos = np.nonzero(ts.source_codes == _CODE_VISUAL)[0]
    if text_pos.size:
        np.add.at(grads.text_emb, ts.ref_a[text_pos], d_x[text_pos])
    if spec_pos.size:
        np.add.at(grads.specials, ts.ref_a[spec_pos], d_x[spec_pos])
    if vis_pos.size:
        img_ids = ts.ref_a[vis_pos]
        tok_ids = ts.ref_b[vis_pos]
        d_model = e.shape[0]
        for i, img in enumerate(ts.images):
            sel = img_ids == i
            if not sel.any():
                continue
            n = img.n
            k = GRID_SIDE // n
            d_pool = np.zeros((n * n, d_model), dtype=np.float64)
            d_pool[tok_ids[sel]] = d_x[vis_pos[sel]]  # token indices are unique
            d_grid = (
                np.repeat(
                    np.repeat(d_pool.reshape(n, n, d_model), k, axis=0), k, axis=1
                )
                / (k * k)
            ).reshape(GRID_SIDE * GRID_SIDE, d_model)
            grads.vis_proj_w += img.features.T @ d_grid
            grads.vis_proj_b += d_grid.sum(axis=0)


# --- Checkpoints -------------------------------------------------------------


def save_checkpoint(
    params: EncoderParams, cfg: EncoderConfig, path: str | Path
) -> None:
    """TIIRCKPT: magic, JSON config header, then named f32 tensors."""
    header = json.dumps(
        {
            "model_dim": cfg.model_dim,
            "vocab_buckets": cfg.vocab_buckets,
            "max_len": cfg.max_len,
            "channels": cfg.channels,
            "layers": cfg.layers,
            "seed": cfg.seed,
        }
    ).encode("utf-8")
    names = list(params.named_arrays())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(names)))
        for name, arr in names:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EncoderConfig, EncoderParams]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", f.read(4))
        cfg = EncoderConfig(**json.loads(f.read(header_len).decode("utf-8")))
        (n_tensors,) = struct.unpack("<I", f.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            tensors[name] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            )
    expected = {name for name, _ in _param_shapes(cfg)}
    if set(tensors) != expected:
        raise ValueError(f"{path}: checkpoint tensors do not match config")
    return cfg, _assemble_params(cfg, tensors)
