"""Model compression: quantization-aware fine-tuning and quantized containers.

The canonical Gaussian attributes of a trained GoP are compressed as

* positions: 16-bit floats (cast at export),
* Cholesky vectors: 8-bit asymmetric quantization
  ``code = floor(clamp((l - beta) / gamma, 0, 255))`` with per-channel
  ``gamma``/``beta`` learned during fine-tuning (straight-through gradients
  for the floor),
* colors: residual vector quantization, M cascaded stages of codebook size B
  initialized by K-means and updated by exponential moving averages during
  fine-tuning, with a commitment loss pulling entries toward
  gradient-stopped residuals.

Each codebook carries one extra non-learned zero entry (index B), which
guarantees the per-stage residual norm never increases. The deformation
field is quantized separately, post hoc, with one 8-bit min/max affine
range per tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deform import (
    DeformationField,
    MlpParams,
    PosEncConfig,
    deform_backward,
    deform_cached,
)
from .gaussians import GaussianSet, render_backward, render_cached
from .hashgrid import HashGrid, HashGridConfig
from .media import Image
from .model import GoPModel, VideoModel
from .train import AdamState, adam_step, loss_l2

QUANT_BITS = 8
QUANT_MAX = (1 << QUANT_BITS) - 1


# ---------------------------------------------------------------------------
# Cholesky quantizer


@dataclass
class QuantParams:
    """Per-channel asymmetric 8-bit range for the three Cholesky channels."""

    scale: np.ndarray  # gamma, (3,) > 0
    offset: np.ndarray  # beta, (3,)

    @classmethod
    def from_range(cls, chol: np.ndarray) -> "QuantParams":
        """Zero-clipping initialization: beta = min, gamma = range / 255."""
        lo = chol.min(axis=0).astype(np.float32)
        hi = chol.max(axis=0).astype(np.float32)
        scale = np.maximum((hi - lo) / QUANT_MAX, 1e-8).astype(np.float32)
        return cls(scale, lo)


def quantize_cholesky(l: np.ndarray, scale, offset) -> np.ndarray:
    """code = floor(clamp((l - beta) / gamma, 0, 255)), as uint8."""
    v = np.clip((l - offset) / scale, 0.0, float(QUANT_MAX))
    return np.floor(v).astype(np.uint8)


def dequantize_cholesky(code: np.ndarray, scale, offset) -> np.ndarray:
    """code * gamma + beta in float64, so |result - l| <= gamma holds exactly."""
    return code.astype(np.float64) * np.asarray(scale, np.float64) + np.asarray(
        offset, np.float64
    )


def fake_quantize_cholesky(l: np.ndarray, scale, offset):
    """Simulated quantization plus the straight-through partials.

    Returns (dequantized l, d/dl mask, d/dgamma, d/dbeta). Treating the floor
    as identity: inside the representable range the output tracks l, so the
    range parameters see ``q - v`` and ``0``; at the clamp rails the output is
    ``beta`` or ``beta + 255 gamma``, giving ``q`` and ``1``.
    """
    v = (l - offset) / scale
    inside = (v >= 0.0) & (v <= QUANT_MAX)
    q = np.floor(np.clip(v, 0.0, float(QUANT_MAX)))
    out = q * scale + offset
    d_l = inside.astype(l.dtype)
    d_scale = np.where(inside, q - v, q)
    d_offset = np.where(inside, 0.0, 1.0)
    return out.astype(l.dtype, copy=False), d_l, d_scale, d_offset


# ---------------------------------------------------------------------------
# Residual vector quantization


@dataclass
class RvqCodebooks:
    """M stages of B learned entries; index B is an implicit fixed zero entry."""

    entries: np.ndarray  # (M, B, 3)

    @property
    def stages(self) -> int:
        return self.entries.shape[0]

    @property
    def size(self) -> int:
        return self.entries.shape[1]

    def candidates(self, stage: int) -> np.ndarray:
        """(B + 1, 3) rows of stage codebook with the zero entry appended."""
        e = self.entries[stage]
        return np.concatenate([e, np.zeros((1, e.shape[1]), dtype=e.dtype)])

    def copy(self) -> "RvqCodebooks":
        return RvqCodebooks(self.entries.copy())


def rvq_encode(colors: np.ndarray, books: RvqCodebooks) -> np.ndarray:
    """Greedy stage-by-stage nearest-entry indices, (M, N) int64.

    Ties break toward the lowest index; the appended zero entry means a stage
    never makes the residual worse.
    """
    residual = colors.astype(np.float64)
    indices = np.empty((books.stages, colors.shape[0]), dtype=np.int64)
    for m in range(books.stages):
        cand = books.candidates(m).astype(np.float64)
        d2 = ((residual[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        indices[m] = idx
        residual = residual - cand[idx]
    return indices


def rvq_decode(indices: np.ndarray, books: RvqCodebooks) -> np.ndarray:
    """Sum of the selected entries across stages, (N, 3) float32."""
    out = np.zeros((indices.shape[1], books.entries.shape[2]), dtype=np.float64)
    for m in range(books.stages):
        out += books.candidates(m).astype(np.float64)[indices[m]]
    return out.astype(np.float32)


def rvq_residuals(colors: np.ndarray, books: RvqCodebooks, indices: np.ndarray):
    """Stage inputs r^k = c - decode(stages < k), (M, N, 3) float64."""
    res = np.empty((books.stages, colors.shape[0], 3), dtype=np.float64)
    residual = colors.astype(np.float64)
    for m in range(books.stages):
        res[m] = residual
        residual = residual - books.candidates(m).astype(np.float64)[indices[m]]
    return res


def commitment_loss(
    colors: np.ndarray, books: RvqCodebooks, indices: np.ndarray
) -> float:
    """L_c = 1/(N B) sum_k sum_n ||sg[r_n^k] - C^k[i_n^k]||^2.

    The residual operand is gradient-stopped, so the loss trains codebook
    entries only (see `commitment_loss_grads`).
    """
    n = colors.shape[0]
    res = rvq_residuals(colors, books, indices)
    total = 0.0
    for m in range(books.stages):
        picked = books.candidates(m).astype(np.float64)[indices[m]]
        total += float(((res[m] - picked) ** 2).sum())
    return total / (n * books.size)


def commitment_loss_grads(
    colors: np.ndarray, books: RvqCodebooks, indices: np.ndarray
) -> np.ndarray:
    """d L_c / d entries, (M, B, 3); the stop-gradient kills all color grads."""
    n = colors.shape[0]
    res = rvq_residuals(colors, books, indices)
    grads = np.zeros_like(books.entries, dtype=np.float64)
    scale = 2.0 / (n * books.size)
    for m in range(books.stages):
        picked = books.candidates(m).astype(np.float64)[indices[m]]
        diff = scale * (picked - res[m])  # (N, 3)
        for c in range(diff.shape[1]):
            acc = np.bincount(
                indices[m], weights=diff[:, c], minlength=books.size + 1
            )
            grads[m, :, c] += acc[: books.size]  # zero entry is not learned
    return grads


# ---------------------------------------------------------------------------
# K-means initialization and EMA codebook updates


def kmeans(
    points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25
) -> np.ndarray:
    """Seeded k-means++ plus Lloyd iterations; deterministic given rng state.

    Empty clusters keep their previous centroid.
    """
    pts = points.astype(np.float64)
    n = pts.shape[0]
    centroids = np.empty((k, pts.shape[1]), dtype=np.float64)
    centroids[0] = pts[int(rng.integers(n))]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            r = float(rng.random()) * total
            pick = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), n - 1)
        centroids[j] = pts[pick]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))

    assign = None
    for _ in range(iters):
        dist = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids


def kmeans_init(colors: np.ndarray, size: int, stages: int, seed: int) -> RvqCodebooks:
    """Stage m is K-means over the residuals left by stages < m."""
    rng = np.random.default_rng(seed)
    entries = np.zeros((stages, size, colors.shape[1]), dtype=np.float32)
    books = RvqCodebooks(entries)
    residual = colors.astype(np.float64)
    for m in range(stages):
        entries[m] = kmeans(residual, size, rng).astype(np.float32)
        cand = books.candidates(m).astype(np.float64)
        idx = np.argmin(
            ((residual[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2), axis=1
        )
        residual = residual - cand[idx]
    return books


@dataclass
class EmaState:
    """Decayed per-entry assignment counts and residual sums."""

    counts: np.ndarray  # (M, B)
    sums: np.ndarray  # (M, B, 3)

    @classmethod
    def warm_start(
        cls, colors: np.ndarray, books: RvqCodebooks, indices: np.ndarray
    ) -> "EmaState":
        """Counts/sums consistent with the K-means assignment."""
        m_, b_ = books.stages, books.size
        counts = np.zeros((m_, b_), dtype=np.float64)
        sums = np.zeros((m_, b_, 3), dtype=np.float64)
        res = rvq_residuals(colors, books, indices)
        for m in range(m_):
            counts[m] = np.bincount(indices[m], minlength=b_ + 1)[:b_]
            for c in range(3):
                sums[m, :, c] = np.bincount(
                    indices[m], weights=res[m][:, c], minlength=b_ + 1
                )[:b_]
        return cls(counts, sums)


def ema_update(
    books: RvqCodebooks,
    state: EmaState,
    colors: np.ndarray,
    indices: np.ndarray,
    decay: float = 0.99,
    eps: float = 1e-5,
) -> None:
    """EMA-VQ codebook update in place; entries with no batch assignments stay.

    Per stage, counts and residual sums decay toward the batch statistics and
    assigned entries move to sum / (count + eps).
    """
    res = rvq_residuals(colors, books, indices)
    for m in range(books.stages):
        b_ = books.size
        n_j = np.bincount(indices[m], minlength=b_ + 1)[:b_].astype(np.float64)
        s_j = np.zeros((b_, 3), dtype=np.float64)
        for c in range(3):
            s_j[:, c] = np.bincount(
                indices[m], weights=res[m][:, c], minlength=b_ + 1
            )[:b_]
        state.counts[m] = decay * state.counts[m] + (1.0 - decay) * n_j
        state.sums[m] = decay * state.sums[m] + (1.0 - decay) * s_j
        assigned = n_j > 0
        books.entries[m][assigned] = (
            state.sums[m][assigned] / (state.counts[m][assigned, None] + eps)
        ).astype(books.entries.dtype)


# ---------------------------------------------------------------------------
# Post-hoc 8-bit tensor quantization (deformation field)


@dataclass
class QuantTensor:
    codes: np.ndarray  # uint8, flat
    scale: float
    offset: float
    shape: tuple[int, ...]


def quantize_tensor(arr: np.ndarray) -> QuantTensor:
    # ranges live in float32 because that is their wire format
    lo = np.float32(arr.min()) if arr.size else np.float32(0.0)
    hi = np.float32(arr.max()) if arr.size else np.float32(0.0)
    scale = np.float32((hi - lo) / QUANT_MAX)
    if scale <= 0.0:
        codes = np.zeros(arr.size, dtype=np.uint8)
        return QuantTensor(codes, np.float32(0.0), lo, arr.shape)
    codes = np.floor((arr.reshape(-1).astype(np.float64) - lo) / scale + 0.5)
    codes = np.clip(codes, 0, QUANT_MAX).astype(np.uint8)
    return QuantTensor(codes, scale, lo, arr.shape)


def dequantize_tensor(qt: QuantTensor) -> np.ndarray:
    out = qt.codes.astype(np.float32) * np.float32(qt.scale) + np.float32(qt.offset)
    return out.reshape(qt.shape)


# ---------------------------------------------------------------------------
# Compressed model containers


@dataclass
class CompressedGoP:
    first_frame: int
    num_frames: int
    mu_f16: np.ndarray  # (N, 2) float16
    chol_codes: np.ndarray  # (N, 3) uint8
    quant: QuantParams
    color_indices: np.ndarray  # (M, N) uint8
    books: RvqCodebooks
    field_tensors: dict[str, QuantTensor]

    @property
    def num_gaussians(self) -> int:
        return self.mu_f16.shape[0]


@dataclass
class CompressedVideoModel:
    width: int
    height: int
    frame_count: int
    gop_size: int
    spatial_cfg: HashGridConfig | None
    temporal_cfg: HashGridConfig | None
    posenc_freqs: int
    mlp_hidden: int
    gops: list[CompressedGoP]

    def materialize(self) -> VideoModel:
        """Dequantize everything into a renderable float model (bit-exact)."""
        gops = [
            _materialize_gop(
                g, self.spatial_cfg, self.temporal_cfg, self.posenc_freqs,
                self.width, self.height,
            )
            for g in self.gops
        ]
        return VideoModel(self.width, self.height, self.frame_count, self.gop_size, gops)

    def decode(self, scale: float = 1.0):
        return self.materialize().decode(scale)


def _materialize_gop(
    comp: CompressedGoP,
    spatial_cfg,
    temporal_cfg,
    posenc_freqs: int,
    width: int,
    height: int,
) -> GoPModel:
    mu = comp.mu_f16.astype(np.float32)
    chol = dequantize_cholesky(
        comp.chol_codes, comp.quant.scale, comp.quant.offset
    ).astype(np.float32)
    color = rvq_decode(comp.color_indices.astype(np.int64), comp.books)
    canonical = GaussianSet(mu, chol, color, width, height)

    spatial = temporal = None
    if spatial_cfg is not None:
        spatial = HashGrid(
            spatial_cfg, dequantize_tensor(comp.field_tensors["spatial_tables"])
        )
    if temporal_cfg is not None:
        temporal = HashGrid(
            temporal_cfg, dequantize_tensor(comp.field_tensors["temporal_tables"])
        )
    mlp = MlpParams(
        *(
            dequantize_tensor(comp.field_tensors[name])
            for name in ("w1", "b1", "w2", "b2", "w_mu", "b_mu", "w_color", "b_color")
        )
    )
    field = DeformationField(spatial, temporal, PosEncConfig(posenc_freqs), mlp)
    return GoPModel(canonical, field, comp.first_frame, comp.num_frames)


def compress_field(field: DeformationField) -> dict[str, QuantTensor]:
    return {name: quantize_tensor(arr) for name, arr in field.params().items()}


# ---------------------------------------------------------------------------
# Quantization-aware fine-tuning


@dataclass
class QuantizeConfig:
    """Rate point and fine-tuning schedule for one compression run."""

    stages: int = 2  # M
    codebook_size: int = 64  # B (learned entries per stage)
    lam: float = 0.1  # commitment loss weight
    steps: int = 1000
    lr: float = 1e-3
    lr_quant: float = 1e-4  # gamma/beta learning rate
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    quantize_cholesky: bool = True
    quantize_colors: bool = True

    def __post_init__(self):
        if not 1 <= self.stages:
            raise ValueError("stages must be >= 1")
        if not 1 <= self.codebook_size <= 255:
            raise ValueError("codebook_size must be in [1, 255] (8-bit indices)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")


def finetune_quantized(
    gop: GoPModel, frames: list[Image], cfg: QuantizeConfig, log=None
) -> CompressedGoP:
    """Fine-tune a trained GoP under simulated quantization and pack it.

    Gradients reach the raw Cholesky values and the learned range through the
    straight-through estimator, and the raw colors through the RVQ decode
    identity; codebooks move by EMA toward the stage residuals. The
    deformation field stays frozen and is quantized post hoc.
    """
    canonical = gop.canonical.copy()
    field = gop.field
    w, h = canonical.width, canonical.height
    n_frames = len(frames)

    quant = QuantParams.from_range(canonical.chol)
    books = kmeans_init(canonical.color, cfg.codebook_size, cfg.stages, cfg.seed)
    indices = rvq_encode(canonical.color, books)
    ema = EmaState.warm_start(canonical.color, books, indices)

    params = {
        "mu": canonical.mu,
        "chol": canonical.chol,
        "color": canonical.color,
        "scale": quant.scale,
        "offset": quant.offset,
    }
    lr = {k: cfg.lr for k in ("mu", "chol", "color")}
    lr.update(scale=cfg.lr_quant, offset=cfg.lr_quant)
    state = AdamState.for_params(params)

    for step in range(cfg.steps):
        i = step % n_frames
        t = 0.0 if gop.num_frames == 1 else i / (gop.num_frames - 1)

        if cfg.quantize_cholesky:
            chol_q, d_l, d_scale, d_offset = fake_quantize_cholesky(
                canonical.chol, quant.scale, quant.offset
            )
        else:
            chol_q = canonical.chol
        if cfg.quantize_colors:
            indices = rvq_encode(canonical.color, books)
            color_q = rvq_decode(indices, books)
        else:
            color_q = canonical.color

        sim = GaussianSet(canonical.mu, chol_q, color_q, w, h)
        deformed, dcache = deform_cached(field, sim, t)
        rendered, rcache = render_cached(deformed, w, h)
        l2, grad = loss_l2(rendered, frames[i])
        lc = (
            commitment_loss(canonical.color, books, indices)
            if cfg.quantize_colors
            else 0.0
        )
        loss = l2 + cfg.lam * lc

        dmu_d, dchol_d, dcolor_d = render_backward(deformed, grad, w, h, cache=rcache)
        _, gmu, gchol_q, gcolor_q = deform_backward(
            field, sim, t, dmu_d, dchol_d, dcolor_d, cache=dcache
        )

        grads = {"mu": gmu, "color": gcolor_q}  # RVQ decode is identity (STE)
        if cfg.quantize_cholesky:
            grads["chol"] = gchol_q * d_l
            grads["scale"] = np.sum(gchol_q * d_scale, axis=0)
            grads["offset"] = np.sum(gchol_q * d_offset, axis=0)
        else:
            grads["chol"] = gchol_q
            grads["scale"] = np.zeros(3)
            grads["offset"] = np.zeros(3)

        adam_step(
            params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        )
        np.clip(canonical.mu, 0.0, 1.0, out=canonical.mu)
        np.clip(quant.scale, 1e-8, None, out=quant.scale)
        if cfg.quantize_colors:
            ema_update(
                books, ema, canonical.color, rvq_encode(canonical.color, books),
                cfg.ema_decay, cfg.ema_eps,
            )
        if log and (step + 1) % 200 == 0:
            log(f"stage=finetune step={step + 1} frame={i} loss={loss:.6g} l2={l2:.6g}")

    final_indices = rvq_encode(canonical.color, books)
    return CompressedGoP(
        first_frame=gop.first_frame,
        num_frames=gop.num_frames,
        mu_f16=canonical.mu.astype(np.float16),
        chol_codes=quantize_cholesky(canonical.chol, quant.scale, quant.offset),
        quant=quant,
        color_indices=final_indices.astype(np.uint8),
        books=books,
        field_tensors=compress_field(field),
    )
