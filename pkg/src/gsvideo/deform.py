"""Per-frame deformation of canonical Gaussians.

For a Gaussian at canonical position mu and a timestamp t in [0, 1], the
field looks up spatial features at mu in a 2D hash grid, temporal features
at (mu_x, mu_y, t) in a 3D hash grid, concatenates them with a sin/cos
positional encoding of t, and runs the result through a two-layer ReLU MLP
with two linear heads producing position and color offsets:

    (mu', c', chol') = (mu + d_mu, c + d_c, chol)

The Cholesky factor is never deformed. Heads are zero-initialized so an
untrained field is exactly the identity, which is what the key-frame
initialization strategy relies on.

Either grid may be absent (spatial-only / temporal-only ablations); the MLP
input width shrinks accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianSet
from .hashgrid import (
    EncodeState,
    HashGrid,
    _encode_from_state,
    _encode_state,
    encode_backward,
)


@dataclass(frozen=True)
class PosEncConfig:
    """Number of dyadic sin/cos frequency pairs for the timestamp."""

    num_freqs: int = 6

    def __post_init__(self):
        if self.num_freqs < 0:
            raise ValueError("num_freqs must be >= 0")

    @property
    def output_dim(self) -> int:
        return 2 * self.num_freqs


def positional_encoding(t: float, cfg: PosEncConfig) -> np.ndarray:
    """(sin(2^k pi t), cos(2^k pi t)) for k = 0..K-1, sin first per pair."""
    out = np.empty(cfg.output_dim, dtype=np.float64)
    for k in range(cfg.num_freqs):
        angle = (2.0**k) * np.pi * t
        out[2 * k] = np.sin(angle)
        out[2 * k + 1] = np.cos(angle)
    return out


@dataclass
class MlpParams:
    """Two ReLU trunk layers plus linear position/color heads."""

    w1: np.ndarray  # (in, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray  # (hidden,)
    w_mu: np.ndarray  # (hidden, 2)
    b_mu: np.ndarray  # (2,)
    w_color: np.ndarray  # (hidden, 3)
    b_color: np.ndarray  # (3,)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(*(getattr(self, f).copy() for f in _MLP_FIELDS))


_MLP_FIELDS = ("w1", "b1", "w2", "b2", "w_mu", "b_mu", "w_color", "b_color")


def init_mlp(
    input_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32
) -> MlpParams:
    """Kaiming-uniform trunk, zero heads (=> identity deformation at step 0)."""

    def kaiming(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    return MlpParams(
        w1=kaiming(input_dim, hidden),
        b1=np.zeros(hidden, dtype=dtype),
        w2=kaiming(hidden, hidden),
        b2=np.zeros(hidden, dtype=dtype),
        w_mu=np.zeros((hidden, 2), dtype=dtype),
        b_mu=np.zeros(2, dtype=dtype),
        w_color=np.zeros((hidden, 3), dtype=dtype),
        b_color=np.zeros(3, dtype=dtype),
    )


@dataclass
class DeformationField:
    spatial_grid: HashGrid | None
    temporal_grid: HashGrid | None
    posenc: PosEncConfig
    mlp: MlpParams

    def __post_init__(self):
        expected = self.feature_dim()
        if self.mlp.input_dim != expected:
            raise ValueError(
                f"MLP input width {self.mlp.input_dim} != feature width {expected}"
            )

    def feature_dim(self) -> int:
        dim = self.posenc.output_dim
        if self.spatial_grid is not None:
            dim += self.spatial_grid.config.output_dim
        if self.temporal_grid is not None:
            dim += self.temporal_grid.config.output_dim
        return dim

    def params(self) -> dict[str, np.ndarray]:
        """Named learnable tensors, in a fixed order (also the wire order)."""
        out: dict[str, np.ndarray] = {}
        if self.spatial_grid is not None:
            out["spatial_tables"] = self.spatial_grid.tables
        if self.temporal_grid is not None:
            out["temporal_tables"] = self.temporal_grid.tables
        for name in _MLP_FIELDS:
            out[name] = getattr(self.mlp, name)
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        if self.spatial_grid is not None:
            self.spatial_grid.tables = params["spatial_tables"]
        if self.temporal_grid is not None:
            self.temporal_grid.tables = params["temporal_tables"]
        for name in _MLP_FIELDS:
            setattr(self.mlp, name, params[name])

    def copy(self) -> "DeformationField":
        return DeformationField(
            None if self.spatial_grid is None else self.spatial_grid.copy(),
            None if self.temporal_grid is None else self.temporal_grid.copy(),
            self.posenc,
            self.mlp.copy(),
        )


def init_field(
    rng: np.random.Generator,
    spatial_cfg,
    temporal_cfg,
    posenc: PosEncConfig = PosEncConfig(),
    hidden: int = 128,
    dtype=np.float32,
) -> DeformationField:
    """Build a field from grid configs; either config may be None (ablations)."""
    from .hashgrid import init_hash_grid

    spatial = None if spatial_cfg is None else init_hash_grid(spatial_cfg, rng, dtype)
    temporal = None if temporal_cfg is None else init_hash_grid(temporal_cfg, rng, dtype)
    dim = posenc.output_dim
    dim += spatial.config.output_dim if spatial is not None else 0
    dim += temporal.config.output_dim if temporal is not None else 0
    mlp = init_mlp(dim, hidden, rng, dtype)
    return DeformationField(spatial, temporal, posenc, mlp)


@dataclass
class DeformCache:
    """Forward activations kept so a following backward can skip recompute."""

    feats: np.ndarray
    spatial_in: np.ndarray | None
    temporal_in: np.ndarray | None
    spatial_state: EncodeState | None
    temporal_state: EncodeState | None
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    d_mu: np.ndarray


def _assemble_features(field: DeformationField, set_: GaussianSet, t: float):
    """Concatenated (f_s, f_d, gamma(t)) rows plus the per-grid encode states."""
    n = len(set_)
    dtype = set_.mu.dtype
    parts = []
    spatial_in = temporal_in = None
    spatial_state = temporal_state = None
    if field.spatial_grid is not None:
        spatial_in = set_.mu
        spatial_state = _encode_state(field.spatial_grid, spatial_in)
        parts.append(_encode_from_state(field.spatial_grid, spatial_state))
    if field.temporal_grid is not None:
        temporal_in = np.concatenate(
            [set_.mu, np.full((n, 1), t, dtype=dtype)], axis=1
        )
        temporal_state = _encode_state(field.temporal_grid, temporal_in)
        parts.append(_encode_from_state(field.temporal_grid, temporal_state))
    pe = positional_encoding(t, field.posenc).astype(dtype)
    parts.append(np.broadcast_to(pe, (n, pe.shape[0])))
    feats = np.concatenate(parts, axis=1)
    return feats, spatial_in, temporal_in, spatial_state, temporal_state


def _mlp_forward(mlp: MlpParams, feats: np.ndarray):
    z1 = feats @ mlp.w1 + mlp.b1
    h1 = np.maximum(z1, 0)
    z2 = h1 @ mlp.w2 + mlp.b2
    h2 = np.maximum(z2, 0)
    d_mu = h2 @ mlp.w_mu + mlp.b_mu
    d_color = h2 @ mlp.w_color + mlp.b_color
    return z1, h1, z2, h2, d_mu, d_color


def deform_cached(
    field: DeformationField, set_: GaussianSet, t: float
) -> tuple[GaussianSet, DeformCache]:
    """Like `deform` but also returns the cache for `deform_backward`."""
    feats, spatial_in, temporal_in, sstate, tstate = _assemble_features(field, set_, t)
    z1, h1, z2, h2, d_mu, d_color = _mlp_forward(field.mlp, feats)
    mu = np.clip(set_.mu + d_mu, 0.0, 1.0)
    color = set_.color + d_color
    out = GaussianSet(mu, set_.chol, color, set_.width, set_.height)
    cache = DeformCache(
        feats, spatial_in, temporal_in, sstate, tstate, z1, h1, z2, h2, d_mu
    )
    return out, cache


def deform(field: DeformationField, set_: GaussianSet, t: float) -> GaussianSet:
    """Deformed copy of the set at time t; positions clamped for rendering."""
    return deform_cached(field, set_, t)[0]


def deform_backward(
    field: DeformationField,
    set_: GaussianSet,
    t: float,
    dmu_out: np.ndarray,
    dchol_out: np.ndarray,
    dcolor_out: np.ndarray,
    cache: DeformCache | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray, np.ndarray]:
    """Chain upstream deformed-Gaussian gradients back to every parameter.

    Returns (field parameter grads, canonical mu grads, canonical chol grads,
    canonical color grads). Work happens in the model's dtype (float64 models
    give full double-precision gradients); table scatters always accumulate
    in double. The position clamp passes gradient through only where it was
    inactive; the Cholesky path is the identity. Passing the cache from
    `deform_cached` skips recomputing the forward activations.
    """
    if cache is None:
        cache = deform_cached(field, set_, t)[1]
    feats = cache.feats
    spatial_in, temporal_in = cache.spatial_in, cache.temporal_in
    z1, h1, z2, h2, d_mu = cache.z1, cache.h1, cache.z2, cache.h2, cache.d_mu
    mlp = field.mlp
    dt = mlp.w1.dtype

    dmu_out = np.asarray(dmu_out).astype(dt, copy=False)
    dcolor_out = np.asarray(dcolor_out).astype(dt, copy=False)

    # clamp subgradient: pass-through on [0, 1], zero outside
    raw_mu = set_.mu + d_mu
    pass_mu = ((raw_mu >= 0.0) & (raw_mu <= 1.0)).astype(dt)
    d_dmu = dmu_out * pass_mu

    grads: dict[str, np.ndarray] = {}
    grads["w_mu"] = h2.T @ d_dmu
    grads["b_mu"] = d_dmu.sum(axis=0, dtype=np.float64)
    grads["w_color"] = h2.T @ dcolor_out
    grads["b_color"] = dcolor_out.sum(axis=0, dtype=np.float64)

    dh2 = d_dmu @ mlp.w_mu.T + dcolor_out @ mlp.w_color.T
    dz2 = dh2 * (z2 > 0)
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0, dtype=np.float64)
    dh1 = dz2 @ mlp.w2.T
    dz1 = dh1 * (z1 > 0)
    grads["w1"] = feats.T @ dz1
    grads["b1"] = dz1.sum(axis=0, dtype=np.float64)
    dfeats = dz1 @ mlp.w1.T

    mu_grad = d_dmu.astype(np.float64)  # identity path mu -> mu + d_mu
    col = 0
    if field.spatial_grid is not None:
        width = field.spatial_grid.config.output_dim
        tg, xg = encode_backward(
            field.spatial_grid, spatial_in, dfeats[:, col : col + width],
            state=cache.spatial_state,
        )
        grads["spatial_tables"] = tg
        mu_grad += xg
        col += width
    if field.temporal_grid is not None:
        width = field.temporal_grid.config.output_dim
        tg, xg = encode_backward(
            field.temporal_grid, temporal_in, dfeats[:, col : col + width],
            state=cache.temporal_state,
        )
        grads["temporal_tables"] = tg
        mu_grad += xg[:, :2]  # the t column is not a parameter
        col += width

    chol_grad = np.asarray(dchol_out, dtype=np.float64).copy()
    color_grad = dcolor_out.copy()  # identity path c -> c + d_c
    return grads, mu_grad, chol_grad, color_grad
