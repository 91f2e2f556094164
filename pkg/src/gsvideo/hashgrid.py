"""Multiresolution hash grids with multilinear interpolation.

Each grid is a stack of L levels whose resolutions grow geometrically,
``N_l = floor(N_min * b^l)``. A d-dimensional point is scaled by the level
resolution, its 2^d surrounding integer vertices are mapped into a fixed-size
feature table by an XOR-of-primes hash, and the fetched feature vectors are
multilinearly interpolated. Level outputs are concatenated coarse-to-fine.

Vertices are always hashed, even at levels coarse enough to index directly;
collisions are tolerated and resolved by training. The hash primes are the
widely used constants (1, 2654435761, 805459861), fixed so that serialized
tables mean the same thing everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import exp, log

import numpy as np

PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint32)


@dataclass(frozen=True)
class HashGridConfig:
    """Shape of one grid stack; ``per_level_scale`` is the growth factor b."""

    dims: int
    levels: int
    features_per_level: int
    table_size: int
    base_resolution: int
    per_level_scale: float

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be >= 1")
        if self.per_level_scale < 1.0:
            raise ValueError("per_level_scale must be >= 1")

    @classmethod
    def from_finest_resolution(
        cls,
        dims: int,
        levels: int,
        features_per_level: int,
        table_size: int,
        base_resolution: int,
        finest_resolution: int,
    ) -> "HashGridConfig":
        """Derive b from [N_min, N_max]; degenerate N_max == N_min gives b = 1."""
        if levels == 1 or finest_resolution == base_resolution:
            b = 1.0
        else:
            b = exp((log(finest_resolution) - log(base_resolution)) / (levels - 1))
        return cls(dims, levels, features_per_level, table_size, base_resolution, b)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


def level_resolutions(config: HashGridConfig) -> list[int]:
    """N_l = floor(N_min * b^l) for l = 0..L-1."""
    return [
        int(np.floor(config.base_resolution * config.per_level_scale**level))
        for level in range(config.levels)
    ]


def hash_index(vertex: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of prime-multiplied coordinates, wrapped mod 2^32, masked to the table.

    ``vertex`` is (..., d) with non-negative integer coordinates; the result
    is int64 indices in [0, table_size).
    """
    v = np.asarray(vertex)
    d = v.shape[-1]
    v = v.astype(np.uint32)  # multiplication below wraps mod 2^32
    acc = v[..., 0] * PRIMES[0]
    for i in range(1, d):
        acc = acc ^ (v[..., i] * PRIMES[i])
    return (acc & np.uint32(table_size - 1)).astype(np.int64)


@dataclass
class HashGrid:
    config: HashGridConfig
    tables: np.ndarray  # (levels, table_size, features_per_level)

    def copy(self) -> "HashGrid":
        return HashGrid(self.config, self.tables.copy())


def init_hash_grid(
    config: HashGridConfig, rng: np.random.Generator, dtype=np.float32
) -> HashGrid:
    """Fresh grid with features uniform in [-1e-4, 1e-4]."""
    tables = rng.uniform(
        -1e-4, 1e-4, size=(config.levels, config.table_size, config.features_per_level)
    ).astype(dtype)
    return HashGrid(config, tables)


def _corner_offsets(dims: int) -> np.ndarray:
    """The 2^d corner offsets of a cell, in fixed binary-counter order."""
    count = 1 << dims
    offsets = np.zeros((count, dims), dtype=np.int64)
    for c in range(count):
        for i in range(dims):
            offsets[c, i] = (c >> i) & 1
    return offsets


def _resolutions_array(cfg: HashGridConfig, dtype) -> np.ndarray:
    return np.asarray(level_resolutions(cfg), dtype=dtype)


def _cells(xc: np.ndarray, res: np.ndarray):
    """Per-level base vertex and fraction, (L, B, d) each; res is (L,)."""
    xs = xc[None, :, :] * res[:, None, None]
    base = np.floor(xs).astype(np.int64)
    frac = xs - base
    return base, frac


def _corner_weights(frac: np.ndarray, off_bool: np.ndarray) -> np.ndarray:
    """(L, B, 2^d) multilinear weights from (L, B, d) fractions."""
    fr = frac[:, :, None, :]
    terms = np.where(off_bool[None, None], fr, 1.0 - fr)
    return np.prod(terms, axis=3)


def _gather(grid: HashGrid, base: np.ndarray, offsets: np.ndarray):
    """Hashed corner indices (L, B, 2^d) and their features (L, B, 2^d, F)."""
    verts = base[:, :, None, :] + offsets[None, None]
    idx = hash_index(verts, grid.config.table_size)
    levels = np.arange(grid.config.levels)[:, None, None]
    return idx, grid.tables[levels, idx]


@dataclass
class EncodeState:
    """Forward working set kept so a following backward can skip recompute."""

    pts: np.ndarray
    base: np.ndarray
    frac: np.ndarray
    idx: np.ndarray
    weights: np.ndarray


def _encode_state(grid: HashGrid, x: np.ndarray) -> EncodeState:
    cfg = grid.config
    pts = np.atleast_2d(np.asarray(x))
    if pts.shape[1] != cfg.dims:
        raise ValueError(f"expected {cfg.dims}-D points, got shape {pts.shape}")
    xc = np.clip(pts, 0.0, 1.0)
    offsets = _corner_offsets(cfg.dims)
    base, frac = _cells(xc, _resolutions_array(cfg, xc.dtype))
    verts = base[:, :, None, :] + offsets[None, None]
    idx = hash_index(verts, cfg.table_size)
    weights = _corner_weights(frac, offsets.astype(bool))
    return EncodeState(pts, base, frac, idx, weights)


def _encode_from_state(grid: HashGrid, state: EncodeState) -> np.ndarray:
    levels = np.arange(grid.config.levels)[:, None, None]
    feats = grid.tables[levels, state.idx]
    w = state.weights.astype(grid.tables.dtype, copy=False)
    return np.einsum("lbcf,lbc->blf", feats, w).reshape(
        state.pts.shape[0], grid.config.output_dim
    )


def encode(grid: HashGrid, x: np.ndarray) -> np.ndarray:
    """Interpolated features for points x in [0,1]^d, concatenated over levels.

    Accepts (B, d) or a single (d,) point; marginally out-of-range inputs are
    clamped before scaling.
    """
    single = np.asarray(x).ndim == 1
    out = _encode_from_state(grid, _encode_state(grid, x))
    return out[0] if single else out


def _left_cell_for_derivative(base: np.ndarray, frac: np.ndarray):
    """Shift exact-boundary points into the left cell for derivative purposes.

    On a cell boundary (frac == 0) the interpolation value is shared between
    neighboring cells but its slope is not; we deterministically take the left
    cell's slope, except at the domain edge base == 0 where only the right
    cell exists.
    """
    on_boundary = (frac == 0.0) & (base > 0)
    base_d = np.where(on_boundary, base - 1, base)
    frac_d = np.where(on_boundary, frac.dtype.type(1.0), frac)
    return base_d, frac_d


def encode_backward(
    grid: HashGrid,
    x: np.ndarray,
    grad_out: np.ndarray,
    state: EncodeState | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * encode(grid, x)) w.r.t. tables and x.

    Table gradients land exactly on the slots the forward pass read, summed
    in slot order with double accumulation (bincount), so accumulation is
    deterministic. Point gradients chain through the interpolation weights
    and the per-level resolution scaling; clamped coordinates get zero
    gradient. Elementwise work follows the wider of the input dtypes.
    ``state`` may carry the forward working set to avoid recomputing it.
    """
    cfg = grid.config
    single = np.asarray(x).ndim == 1
    if state is None:
        state = _encode_state(grid, x)
    pts = state.pts
    go = np.atleast_2d(np.asarray(grad_out))
    dt = np.result_type(pts.dtype, go.dtype, grid.tables.dtype)
    go = go.astype(dt, copy=False)
    in_range = (pts >= 0.0) & (pts <= 1.0)
    offsets = _corner_offsets(cfg.dims)
    off_bool = offsets.astype(bool)
    levels, table, f = grid.tables.shape
    res = _resolutions_array(cfg, dt)

    gol = go.reshape(-1, levels, f).transpose(1, 0, 2)  # (L, B, F)
    base, frac, idx, w = state.base, state.frac, state.idx, state.weights

    # scatter weight * grad onto (level, slot) pairs via one bincount per column
    flat = (np.arange(levels)[:, None, None] * table + idx).reshape(-1)
    contrib = w[:, :, :, None] * gol[:, :, None, :]  # (L, B, C, F)
    table_grads = np.stack(
        [
            np.bincount(
                flat, weights=contrib[..., j].reshape(-1), minlength=levels * table
            ).reshape(levels, table)
            for j in range(f)
        ],
        axis=2,
    )

    base_d, frac_d = _left_cell_for_derivative(base, frac)
    _, feats_d = _gather(grid, base_d, offsets)
    dot = np.einsum("lbcf,lbf->lbc", feats_d.astype(dt, copy=False), gol)
    terms = np.where(
        off_bool[None, None], frac_d[:, :, None, :], 1.0 - frac_d[:, :, None, :]
    )
    x_grad = np.zeros(pts.shape, dtype=np.float64)
    sign = np.where(off_bool, dt.type(1.0), dt.type(-1.0))
    for i in range(cfg.dims):
        others = [j for j in range(cfg.dims) if j != i]
        partial = terms[:, :, :, others[0]]
        for j in others[1:]:
            partial = partial * terms[:, :, :, j]
        # sum over corners then levels, chaining the d(frac)/dx = N_l factor
        x_grad[:, i] = np.einsum(
            "lbc,c,l->b", dot * partial, sign[:, i], res, dtype=np.float64
        )
    x_grad *= in_range
    if single:
        return table_grads, x_grad[0]
    return table_grads, x_grad
