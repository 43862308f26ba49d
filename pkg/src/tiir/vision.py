"""Image featurization stub, nested grid pooling, and image tiling.

Images never enter the engine as pixels. An ``image_ref`` resolves either
to a TIIRGRID file on disk or to a synthetic seed string ``synth:<u64>``
whose 24x24xd feature grid is generated by a splitmix64 counter stream, so
the same ref always yields bit-identical features on every platform.

Pooling compresses a 24x24 grid to n x n by per-block means with kernel
24/n, n in {1, 2, 3, 4, 6, 8, 12, 24}. Block sums accumulate in row-major
order in double precision so results are reproducible and match a naive
per-block loop exactly.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .core import FeatureGrid, load_grid

GRID_SIDE = 24
VALID_GRID_WIDTHS = (1, 2, 3, 4, 6, 8, 12, 24)

SYNTH_PREFIX = "synth:"

_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_M2 = np.uint64(0x94D049BB133111EB)


class UnresolvableImageError(ValueError):
    """The image_ref does not resolve to a grid file or synthetic seed."""


def check_grid_width(n: int) -> int:
    if n not in VALID_GRID_WIDTHS:
        raise ValueError(f"grid width must be one of {VALID_GRID_WIDTHS}, got {n}")
    return n


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 values."""
    z = (x + _SM64_GAMMA).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _SM64_M1
    z = (z ^ (z >> np.uint64(27))) * _SM64_M2
    return z ^ (z >> np.uint64(31))


def unit_stream(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Deterministic floats in [-1, 1): splitmix64(seed^gamma*i) top 53 bits.

    Keyed only on (seed, index); independent of platform and numpy version.
    """
    idx = np.arange(offset, offset + count, dtype=np.uint64)
    mixed = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ splitmix64(idx))
    u01 = (mixed >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return u01 * 2.0 - 1.0


def featurize_image(image_ref: str, channels: int) -> FeatureGrid:
    """Resolve an image_ref to its deterministic 24x24xchannels grid.

    ``synth:<u64>`` refs are generated from the seed stream (values rounded
    to float32 so that saving and reloading a synthetic grid is exact);
    anything else is treated as a TIIRGRID file path.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if image_ref.startswith(SYNTH_PREFIX):
        try:
            seed = int(image_ref[len(SYNTH_PREFIX):])
        except ValueError as exc:
            raise UnresolvableImageError(f"bad synthetic ref {image_ref!r}") from exc
        flat = unit_stream(seed, GRID_SIDE * GRID_SIDE * channels)
        data = flat.astype(np.float32).astype(np.float64)
        return FeatureGrid(data=data.reshape(GRID_SIDE, GRID_SIDE, channels))
    path = Path(image_ref)
    if not path.is_file():
        raise UnresolvableImageError(f"unresolvable image_ref {image_ref!r}")
    grid = load_grid(path)
    if grid.channels != channels:
        raise UnresolvableImageError(
            f"{image_ref}: grid has {grid.channels} channels, expected {channels}"
        )
    return grid


def _pool_blocks(data: np.ndarray, out_side: int) -> np.ndarray:
    """Mean-pool a (side, side, d) array to (out_side, out_side, d).

    Accumulates the k*k block entries one at a time in row-major block
    order, in float64, then divides; this matches a naive per-block loop
    bit for bit.
    """
    side, _, d = data.shape
    k = side // out_side
    blocks = (
        data.astype(np.float64)
        .reshape(out_side, k, out_side, k, d)
        .transpose(0, 2, 1, 3, 4)
        .reshape(out_side, out_side, k * k, d)
    )
    acc = np.zeros((out_side, out_side, d), dtype=np.float64)
    for t in range(k * k):
        acc += blocks[:, :, t, :]
    return acc / (k * k)


def pool_grid(grid: FeatureGrid, n: int) -> FeatureGrid:
    """Average-pool a 24x24 grid to n x n with kernel 24/n."""
    check_grid_width(n)
    if grid.rows != GRID_SIDE or grid.cols != GRID_SIDE:
        raise ValueError(
            f"pool_grid expects a {GRID_SIDE}x{GRID_SIDE} grid, "
            f"got {grid.rows}x{grid.cols}"
        )
    return FeatureGrid(data=_pool_blocks(grid.data, n))


def flatten_tokens(grid: FeatureGrid) -> np.ndarray:
    """Row-major flatten of an n x n x d grid into (n*n, d) token vectors."""
    if grid.rows != grid.cols:
        raise ValueError(f"flatten_tokens expects a square grid, got {grid.rows}x{grid.cols}")
    return grid.data.reshape(grid.rows * grid.cols, grid.channels)


def tile_images(grids: list[FeatureGrid]) -> FeatureGrid:
    """Tile k grids onto the smallest square canvas, then pool back to 24x24.

    Grids are placed left-to-right, top-to-bottom on a ceil(sqrt(k))-wide
    layout; unused slots stay zero. A single grid round-trips unchanged.
    """
    if not grids:
        raise ValueError("tile_images requires at least one grid")
    d = grids[0].channels
    for g in grids:
        if g.channels != d:
            raise ValueError("channel mismatch across tiled grids")
        if g.rows != GRID_SIDE or g.cols != GRID_SIDE:
            raise ValueError("tile_images expects 24x24 grids")
    side = math.ceil(math.sqrt(len(grids)))
    canvas = np.zeros((GRID_SIDE * side, GRID_SIDE * side, d), dtype=np.float64)
    for i, g in enumerate(grids):
        r, c = divmod(i, side)
        canvas[
            r * GRID_SIDE : (r + 1) * GRID_SIDE,
            c * GRID_SIDE : (c + 1) * GRID_SIDE,
        ] = g.data
    return FeatureGrid(data=_pool_blocks(canvas, GRID_SIDE))
