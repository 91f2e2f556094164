"""2D Gaussian primitives and the differentiable splatting rasterizer.

A frame is modelled as an unordered weighted sum of anisotropic Gaussians:
``C_i = sum_n c_n * exp(-sigma_n)`` with ``sigma_n = 0.5 d^T Sigma^-1 d``,
no opacity and no depth ordering. The covariance is parameterized by a
lower-triangular factor ``L = [[l1, 0], [l2, l3]]`` so ``Sigma = L L^T`` is
positive semi-definite by construction; the diagonals pass through
``|l| + eps`` at evaluation time to keep Sigma invertible.

Positions and the Cholesky factor live in normalized coordinates (x/width,
y/height), which makes a Gaussian set resolution-free: the same set can be
rasterized at any output size. Pixels sample the continuous field at their
centers, ``u = (col + 0.5) / out_width``.

`render` is the tiled production path; `render_reference` is a deliberately
naive full-sum double-precision renderer kept as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .media import Image

# Evaluation-time floor added to |l1| and |l3|.
DIAG_EPS = 1e-4

# Gaussians are summed over an axis-aligned box that covers the sigma<=16
# ellipse (weight >= exp(-16) ~ 1.1e-7) with slack: the box is drawn at
# sigma = BBOX_SIGMA plus one pixel, so weights at its edge are below
# exp(-24) ~ 4e-11. That keeps the truncation error under 1e-5 per pixel
# for hundreds of overlapping Gaussians and keeps the forward smooth enough
# for finite-difference gradient checks at step 1e-4.
BBOX_SIGMA = 24.0
TILE = 16


@dataclass(frozen=True)
class Gaussian2D:
    """A single primitive: center, Cholesky factor, RGB coefficients."""

    mu: np.ndarray  # (2,) normalized [0,1], x then y
    chol: np.ndarray  # (3,) l1, l2, l3 in normalized units
    color: np.ndarray  # (3,) unclamped RGB


@dataclass
class GaussianSet:
    """Struct-of-arrays collection of Gaussians plus canvas dimensions.

    ``width``/``height`` are the canonical raster size in pixels; they anchor
    what "one pixel" means for initialization heuristics but do not constrain
    the render resolution.
    """

    mu: np.ndarray  # (N, 2)
    chol: np.ndarray  # (N, 3)
    color: np.ndarray  # (N, 3)
    width: int
    height: int

    def __len__(self) -> int:
        return self.mu.shape[0]

    def gaussian(self, i: int) -> Gaussian2D:
        return Gaussian2D(self.mu[i].copy(), self.chol[i].copy(), self.color[i].copy())

    def __iter__(self):
        return (self.gaussian(i) for i in range(len(self)))

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.mu.copy(), self.chol.copy(), self.color.copy(), self.width, self.height
        )


def effective_diagonals(chol: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positivity reparameterization of the factor diagonals."""
    return np.abs(chol[..., 0]) + DIAG_EPS, np.abs(chol[..., 2]) + DIAG_EPS


def covariance_from_cholesky(chol: np.ndarray) -> np.ndarray:
    """Sigma = L L^T for L = [[l1', 0], [l2, l3']] with reparameterized diagonals."""
    chol = np.asarray(chol, dtype=np.float64)
    l1, l3 = effective_diagonals(chol)
    l2 = chol[..., 1]
    return np.array([[l1 * l1, l1 * l2], [l1 * l2, l2 * l2 + l3 * l3]])


def eval_gaussian(
    g: Gaussian2D, pixel: tuple[float, float], width: int, height: int
) -> float:
    """Weight exp(-sigma) of one Gaussian at a continuous pixel location.

    ``pixel`` is in pixel units of a width x height raster; it is normalized
    by the raster size before the quadratic form, so the result is 1.0
    exactly when the pixel coincides with the denormalized center.
    """
    chol = np.asarray(g.chol, dtype=np.float64)
    l1, l3 = effective_diagonals(chol)
    l2 = float(chol[1])
    dx = pixel[0] / width - float(g.mu[0])
    dy = pixel[1] / height - float(g.mu[1])
    # sigma = 0.5 ||L^-1 d||^2, solved by forward substitution
    e1 = dx / l1
    e2 = (dy - l2 * e1) / l3
    return float(np.exp(-0.5 * (e1 * e1 + e2 * e2)))


def _inv_factor(chol: np.ndarray):
    """Per-Gaussian (l1', l2, l3') with the positivity floor applied."""
    l1, l3 = effective_diagonals(chol)
    return l1, chol[:, 1], l3


def _bboxes(set_: GaussianSet, out_w: int, out_h: int):
    """Inclusive pixel-index bounds of each Gaussian's influence box.

    The box covers the sigma <= BBOX_SIGMA ellipse (axis extent
    sqrt(2 * sigma * Sigma_ii)) plus one pixel of padding; rows/cols outside
    [0, out-1] are clipped, which can leave an empty (x0 > x1) box.
    """
    l1, l2, l3 = _inv_factor(set_.chol)
    sxx = l1 * l1
    syy = l2 * l2 + l3 * l3
    half_u = np.sqrt(2.0 * BBOX_SIGMA * sxx)
    half_v = np.sqrt(2.0 * BBOX_SIGMA * syy)
    # pixel j samples u_j = (j + 0.5) / out_w
    x0 = np.ceil((set_.mu[:, 0] - half_u) * out_w - 0.5).astype(np.int64) - 1
    x1 = np.floor((set_.mu[:, 0] + half_u) * out_w - 0.5).astype(np.int64) + 1
    y0 = np.ceil((set_.mu[:, 1] - half_v) * out_h - 0.5).astype(np.int64) - 1
    y1 = np.floor((set_.mu[:, 1] + half_v) * out_h - 0.5).astype(np.int64) + 1
    # keep fully off-image boxes empty: x0 may clamp to out_w (> x1)
    np.clip(x0, 0, out_w, out=x0)
    np.clip(x1, -1, out_w - 1, out=x1)
    np.clip(y0, 0, out_h, out=y0)
    np.clip(y1, -1, out_h - 1, out=y1)
    return x0, x1, y0, y1


def _tile_lists(x0, x1, y0, y1, out_w: int, out_h: int):
    """Gaussian indices per 16x16 tile, in Gaussian index order."""
    tiles_x = (out_w + TILE - 1) // TILE
    tiles_y = (out_h + TILE - 1) // TILE
    lists: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    tx0 = x0 // TILE
    tx1 = x1 // TILE
    ty0 = y0 // TILE
    ty1 = y1 // TILE
    for n in range(x0.shape[0]):
        if x1[n] < x0[n] or y1[n] < y0[n]:
            continue
        for ty in range(ty0[n], ty1[n] + 1):
            row = ty * tiles_x
            for tx in range(tx0[n], tx1[n] + 1):
                lists[row + tx].append(n)
    return lists, tiles_x, tiles_y


def _tile_geometry(set_, idx, x0, x1, y0, y1, px0, py0, tw, th, out_w, out_h):
    """Per-(Gaussian, pixel) displacement, weight, and box mask for one tile."""
    dtype = set_.mu.dtype
    u = ((px0 + np.arange(tw)).astype(dtype) + dtype.type(0.5)) / dtype.type(out_w)
    v = ((py0 + np.arange(th)).astype(dtype) + dtype.type(0.5)) / dtype.type(out_h)
    uu = np.broadcast_to(u[None, :], (th, tw)).reshape(-1)
    vv = np.broadcast_to(v[:, None], (th, tw)).reshape(-1)

    l1, l2, l3 = _inv_factor(set_.chol[idx])
    dx = uu[None, :] - set_.mu[idx, 0][:, None]
    dy = vv[None, :] - set_.mu[idx, 1][:, None]
    e1 = dx / l1[:, None]
    e2 = (dy - l2[:, None] * e1) / l3[:, None]
    w = np.exp(-0.5 * (e1 * e1 + e2 * e2))

    cols = px0 + np.arange(tw)
    rows = py0 + np.arange(th)
    in_x = (cols[None, :] >= x0[idx][:, None]) & (cols[None, :] <= x1[idx][:, None])
    in_y = (rows[None, :] >= y0[idx][:, None]) & (rows[None, :] <= y1[idx][:, None])
    mask = (in_y[:, :, None] & in_x[:, None, :]).reshape(len(idx), -1)
    w = np.where(mask, w, dtype.type(0.0))
    return dx, dy, e1, e2, w


class RenderCache:
    """Per-tile forward geometry, reusable by a following backward pass."""

    def __init__(self, out_width: int, out_height: int):
        self.out_width = out_width
        self.out_height = out_height
        self.tiles: list[tuple] = []  # (idx, dx, dy, e1, e2, w, px0, py0, tw, th)


def render_cached(
    set_: GaussianSet, out_width: int, out_height: int
) -> tuple[Image, RenderCache]:
    """Rasterize and keep the tile geometry for `render_backward`."""
    dtype = set_.mu.dtype
    out = np.zeros((out_height, out_width, 3), dtype=dtype)
    cache = RenderCache(out_width, out_height)
    if len(set_) == 0:
        return Image(out), cache
    x0, x1, y0, y1 = _bboxes(set_, out_width, out_height)
    lists, tiles_x, tiles_y = _tile_lists(x0, x1, y0, y1, out_width, out_height)

    for ty in range(tiles_y):
        py0 = ty * TILE
        th = min(TILE, out_height - py0)
        for tx in range(tiles_x):
            idx = lists[ty * tiles_x + tx]
            if not idx:
                continue
            idx = np.asarray(idx, dtype=np.int64)
            px0 = tx * TILE
            tw = min(TILE, out_width - px0)
            dx, dy, e1, e2, w = _tile_geometry(
                set_, idx, x0, x1, y0, y1, px0, py0, tw, th, out_width, out_height
            )
            tile = w.T @ set_.color[idx]  # (P, 3)
            out[py0 : py0 + th, px0 : px0 + tw] = tile.reshape(th, tw, 3)
            cache.tiles.append((idx, dx, dy, e1, e2, w, px0, py0, tw, th))
    return Image(out), cache


def render(set_: GaussianSet, out_width: int, out_height: int) -> Image:
    """Rasterize the set at an arbitrary output resolution (unclamped)."""
    return render_cached(set_, out_width, out_height)[0]


def render_reference(set_: GaussianSet, out_width: int, out_height: int) -> Image:
    """Brute-force oracle: full sum over all Gaussians, float64 accumulation."""
    acc = np.zeros((out_height * out_width, 3), dtype=np.float64)
    u = (np.arange(out_width, dtype=np.float64) + 0.5) / out_width
    v = (np.arange(out_height, dtype=np.float64) + 0.5) / out_height
    uu = np.broadcast_to(u[None, :], (out_height, out_width)).reshape(-1)
    vv = np.broadcast_to(v[:, None], (out_height, out_width)).reshape(-1)
    for n in range(len(set_)):
        chol = set_.chol[n].astype(np.float64)
        l1 = abs(chol[0]) + DIAG_EPS
        l2 = chol[1]
        l3 = abs(chol[2]) + DIAG_EPS
        dx = uu - float(set_.mu[n, 0])
        dy = vv - float(set_.mu[n, 1])
        e1 = dx / l1
        e2 = (dy - l2 * e1) / l3
        w = np.exp(-0.5 * (e1 * e1 + e2 * e2))
        acc += w[:, None] * set_.color[n].astype(np.float64)[None, :]
    out = acc.reshape(out_height, out_width, 3)
    if set_.mu.dtype != np.float64:
        out = out.astype(set_.mu.dtype)
    return Image(out)


def render_backward(
    set_: GaussianSet,
    grad_image: Image,
    out_width: int,
    out_height: int,
    cache: RenderCache | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_image * render(set)) w.r.t. mu, chol, color.

    Differentiates the same influence-box forward as `render`. Per-pixel
    partials are accumulated per tile in float64 and tiles are reduced in a
    fixed (row-major) order, so the result is deterministic. Passing the
    cache from `render_cached` skips recomputing the tile geometry.
    """
    if grad_image.data.shape != (out_height, out_width, 3):
        raise ValueError(
            f"grad image is {grad_image.data.shape}, expected "
            f"{(out_height, out_width, 3)}"
        )
    n = len(set_)
    dmu = np.zeros((n, 2), dtype=np.float64)
    dchol = np.zeros((n, 3), dtype=np.float64)
    dcolor = np.zeros((n, 3), dtype=np.float64)
    if n == 0:
        return dmu, dchol, dcolor

    if cache is None:
        cache = render_cached(set_, out_width, out_height)[1]
    grad = grad_image.data

    for idx, dx, dy, e1, e2, w, px0, py0, tw, th in cache.tiles:
        # elementwise math stays in the set's dtype; every pixel reduction
        # below accumulates in float64
        g = grad[py0 : py0 + th, px0 : px0 + tw].reshape(-1, 3)
        g = g.astype(set_.mu.dtype, copy=False)

        dcolor[idx] += np.einsum("gp,pc->gc", w, g, dtype=np.float64)
        # dL/dsigma for each (gaussian, pixel)
        gdot = set_.color[idx] @ g.T
        dsig = -w * gdot

        l1, l2, l3 = _inv_factor(set_.chol[idx])
        l1 = l1[:, None]
        l2 = l2[:, None]
        l3 = l3[:, None]
        # sigma = 0.5 (e1^2 + e2^2), e1 = dx/l1, e2 = (dy - l2 e1)/l3
        dsig_dx = e1 / l1 - e2 * l2 / (l1 * l3)
        dsig_dy = e2 / l3
        dmu[idx, 0] += np.sum(-dsig * dsig_dx, axis=1, dtype=np.float64)
        dmu[idx, 1] += np.sum(-dsig * dsig_dy, axis=1, dtype=np.float64)
        dl1 = np.sum(
            dsig * (-e1 * e1 / l1 + e2 * l2 * dx / (l1 * l1 * l3)),
            axis=1,
            dtype=np.float64,
        )
        dl2 = np.sum(dsig * (-e2 * dx / (l1 * l3)), axis=1, dtype=np.float64)
        dl3 = np.sum(dsig * (-e2 * e2 / l3), axis=1, dtype=np.float64)
        # chain through |l| + eps; np.sign gives the 0 subgradient at 0
        dchol[idx, 0] += dl1 * np.sign(set_.chol[idx, 0].astype(np.float64))
        dchol[idx, 1] += dl2
        dchol[idx, 2] += dl3 * np.sign(set_.chol[idx, 2].astype(np.float64))
    return dmu, dchol, dcolor
