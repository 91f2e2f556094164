"""The .gsv container: header + per-GoP payload, little-endian throughout.

Layout:

* header: magic ``GSVD``, u16 version, u8 flags (bit 0 = quantized), video
  dimensions and GoP structure, grid/MLP/positional-encoding configuration,
  RVQ geometry, then a CRC32 of everything so far;
* payload: per-GoP parameter blocks (raw float32 in float mode; float16
  positions, 8-bit codes, RVQ indices and float32 codebooks, and 8-bit
  per-tensor ranges in quantized mode);
* trailer: CRC32 of the payload bytes.

The header fully determines the payload layout, decode is bit-exact, and
the CRCs make any single corrupted byte a structured decode error rather
than a silently wrong parse.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .codec import (
    CompressedGoP,
    CompressedVideoModel,
    QuantParams,
    QuantTensor,
    RvqCodebooks,
)
from .deform import DeformationField, MlpParams, PosEncConfig
from .gaussians import GaussianSet
from .hashgrid import HashGrid, HashGridConfig
from .model import GoPModel, VideoModel

MAGIC = b"GSVD"
VERSION = 1
FLAG_QUANTIZED = 0x01


class BitstreamError(Exception):
    """Malformed .gsv data; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []

    def pack(self, fmt: str, *values):
        self.chunks.append(struct.pack("<" + fmt, *values))

    def array(self, arr: np.ndarray, dtype: str):
        self.chunks.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise BitstreamError("truncated stream", self.offset)
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values if len(values) > 1 else values[0]

    def array(self, count: int, dtype: str) -> np.ndarray:
        size = count * np.dtype(dtype).itemsize
        if self.offset + size > len(self.data):
            raise BitstreamError(
                f"truncated stream: wanted {size} bytes of {dtype}", self.offset
            )
        out = np.frombuffer(self.data, dtype=np.dtype(dtype), count=count,
                            offset=self.offset)
        self.offset += size
        return out.copy()


_GRID_FMT = "BBBIHf"  # dims, levels, features, table_size, base_res, scale
_MLP_FIELDS = ("w1", "b1", "w2", "b2", "w_mu", "b_mu", "w_color", "b_color")


def _write_grid_cfg(w: _Writer, cfg: HashGridConfig):
    w.pack(
        _GRID_FMT, cfg.dims, cfg.levels, cfg.features_per_level,
        cfg.table_size, cfg.base_resolution, cfg.per_level_scale,
    )


def _read_grid_cfg(r: _Reader) -> HashGridConfig:
    dims, levels, feats, table, base, scale = r.unpack(_GRID_FMT)
    try:
        return HashGridConfig(dims, levels, feats, table, base, scale)
    except ValueError as exc:
        raise BitstreamError(f"bad grid config: {exc}", r.offset) from exc


def _model_arch(model: VideoModel | CompressedVideoModel):
    """(spatial_cfg, temporal_cfg, posenc_freqs, mlp_hidden) of a model."""
    if isinstance(model, CompressedVideoModel):
        return model.spatial_cfg, model.temporal_cfg, model.posenc_freqs, model.mlp_hidden
    if model.gops:
        field = model.gops[0].field
        return (
            None if field.spatial_grid is None else field.spatial_grid.config,
            None if field.temporal_grid is None else field.temporal_grid.config,
            field.posenc.num_freqs,
            field.mlp.hidden_dim,
        )
    return None, None, 0, 0


def _mlp_shapes(
    spatial_cfg, temporal_cfg, posenc_freqs: int, hidden: int
) -> dict[str, tuple[int, ...]]:
    dim = 2 * posenc_freqs
    dim += spatial_cfg.output_dim if spatial_cfg is not None else 0
    dim += temporal_cfg.output_dim if temporal_cfg is not None else 0
    return {
        "w1": (dim, hidden), "b1": (hidden,),
        "w2": (hidden, hidden), "b2": (hidden,),
        "w_mu": (hidden, 2), "b_mu": (2,),
        "w_color": (hidden, 3), "b_color": (3,),
    }


def _field_tensor_shapes(spatial_cfg, temporal_cfg, posenc_freqs, hidden):
    shapes: dict[str, tuple[int, ...]] = {}
    if spatial_cfg is not None:
        shapes["spatial_tables"] = (
            spatial_cfg.levels, spatial_cfg.table_size, spatial_cfg.features_per_level
        )
    if temporal_cfg is not None:
        shapes["temporal_tables"] = (
            temporal_cfg.levels, temporal_cfg.table_size, temporal_cfg.features_per_level
        )
    shapes.update(_mlp_shapes(spatial_cfg, temporal_cfg, posenc_freqs, hidden))
    return shapes


def serialize(model: VideoModel | CompressedVideoModel) -> bytes:
    """Pack a (possibly quantized) video model into .gsv bytes."""
    quantized = isinstance(model, CompressedVideoModel)
    spatial_cfg, temporal_cfg, posenc_freqs, hidden = _model_arch(model)

    head = _Writer()
    head.pack("4s", MAGIC)
    head.pack("H", VERSION)
    head.pack("B", FLAG_QUANTIZED if quantized else 0)
    head.pack("IIIH", model.width, model.height, model.frame_count, model.gop_size)
    head.pack("H", len(model.gops))
    head.pack("B", posenc_freqs)
    head.pack("H", hidden)
    present = (1 if spatial_cfg is not None else 0) | (
        2 if temporal_cfg is not None else 0
    )
    head.pack("B", present)
    if spatial_cfg is not None:
        _write_grid_cfg(head, spatial_cfg)
    if temporal_cfg is not None:
        _write_grid_cfg(head, temporal_cfg)
    if quantized:
        head.pack("BB", model.gops[0].books.stages if model.gops else 0,
                  model.gops[0].books.size if model.gops else 0)
    else:
        head.pack("BB", 0, 0)
    header = head.bytes()

    body = _Writer()
    shapes = _field_tensor_shapes(spatial_cfg, temporal_cfg, posenc_freqs, hidden)
    for gop in model.gops:
        if quantized:
            _write_quantized_gop(body, gop, shapes)
        else:
            _write_float_gop(body, gop, shapes)
    payload = body.bytes()

    return (
        header
        + struct.pack("<I", zlib.crc32(header))
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def _write_float_gop(w: _Writer, gop: GoPModel, shapes):
    n = len(gop.canonical)
    w.pack("IHI", gop.first_frame, gop.num_frames, n)
    w.array(gop.canonical.mu, "<f4")
    w.array(gop.canonical.chol, "<f4")
    w.array(gop.canonical.color, "<f4")
    params = gop.field.params()
    for name in shapes:
        w.array(params[name], "<f4")


def _write_quantized_gop(w: _Writer, gop: CompressedGoP, shapes):
    n = gop.num_gaussians
    w.pack("IHI", gop.first_frame, gop.num_frames, n)
    w.array(gop.mu_f16, "<f2")
    w.array(gop.chol_codes, "u1")
    w.array(gop.quant.scale, "<f4")
    w.array(gop.quant.offset, "<f4")
    w.array(gop.color_indices, "u1")
    w.array(gop.books.entries, "<f4")
    for name in shapes:
        qt = gop.field_tensors[name]
        w.pack("ff", qt.scale, qt.offset)
        w.array(qt.codes, "u1")


def deserialize(data: bytes) -> VideoModel | CompressedVideoModel:
    """Parse .gsv bytes; raises BitstreamError on any corruption."""
    r = _Reader(data)
    magic = r.unpack("4s")
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}", 0)
    version = r.unpack("H")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}", 4)
    flags = r.unpack("B")
    quantized = bool(flags & FLAG_QUANTIZED)
    width, height, frame_count, gop_size = r.unpack("IIIH")
    num_gops = r.unpack("H")
    posenc_freqs = r.unpack("B")
    hidden = r.unpack("H")
    present = r.unpack("B")
    spatial_cfg = _read_grid_cfg(r) if present & 1 else None
    temporal_cfg = _read_grid_cfg(r) if present & 2 else None
    rvq_stages, rvq_size = r.unpack("BB")

    header_end = r.offset
    stored_crc = r.unpack("I")
    if stored_crc != zlib.crc32(data[:header_end]):
        raise BitstreamError("header CRC mismatch", header_end)

    if len(data) < r.offset + 4:
        raise BitstreamError("truncated stream: missing payload CRC", r.offset)
    payload = data[r.offset : len(data) - 4]
    (trailer_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if trailer_crc != zlib.crc32(payload):
        raise BitstreamError("payload CRC mismatch", len(data) - 4)

    shapes = _field_tensor_shapes(spatial_cfg, temporal_cfg, posenc_freqs, hidden)
    gops = []
    for _ in range(num_gops):
        if quantized:
            gops.append(_read_quantized_gop(r, shapes, rvq_stages, rvq_size))
        else:
            gops.append(
                _read_float_gop(
                    r, shapes, spatial_cfg, temporal_cfg, posenc_freqs, width, height
                )
            )
    if r.offset != len(data) - 4:
        raise BitstreamError(
            f"{len(data) - 4 - r.offset} unexpected trailing payload bytes", r.offset
        )

    if quantized:
        return CompressedVideoModel(
            width, height, frame_count, gop_size,
            spatial_cfg, temporal_cfg, posenc_freqs, hidden, gops,
        )
    return VideoModel(width, height, frame_count, gop_size, gops)


def _read_float_gop(
    r: _Reader, shapes, spatial_cfg, temporal_cfg, posenc_freqs, width, height
) -> GoPModel:
    first, num_frames, n = r.unpack("IHI")
    mu = r.array(2 * n, "<f4").reshape(n, 2)
    chol = r.array(3 * n, "<f4").reshape(n, 3)
    color = r.array(3 * n, "<f4").reshape(n, 3)
    tensors = {
        name: r.array(int(np.prod(shape)), "<f4").reshape(shape)
        for name, shape in shapes.items()
    }
    spatial = None if spatial_cfg is None else HashGrid(spatial_cfg, tensors["spatial_tables"])
    temporal = None if temporal_cfg is None else HashGrid(temporal_cfg, tensors["temporal_tables"])
    mlp = MlpParams(*(tensors[name] for name in _MLP_FIELDS))
    field = DeformationField(spatial, temporal, PosEncConfig(posenc_freqs), mlp)
    canonical = GaussianSet(mu, chol, color, width, height)
    return GoPModel(canonical, field, first, num_frames)


def _read_quantized_gop(r: _Reader, shapes, stages: int, size: int) -> CompressedGoP:
    first, num_frames, n = r.unpack("IHI")
    mu = r.array(2 * n, "<f2").reshape(n, 2)
    codes = r.array(3 * n, "u1").reshape(n, 3)
    scale = r.array(3, "<f4")
    offset = r.array(3, "<f4")
    indices = r.array(stages * n, "u1").reshape(stages, n)
    entries = r.array(stages * size * 3, "<f4").reshape(stages, size, 3)
    tensors = {}
    for name, shape in shapes.items():
        t_scale, t_offset = r.unpack("ff")
        codes_t = r.array(int(np.prod(shape)), "u1")
        tensors[name] = QuantTensor(
            codes_t, np.float32(t_scale), np.float32(t_offset), tuple(shape)
        )
    return CompressedGoP(
        first_frame=first,
        num_frames=num_frames,
        mu_f16=mu,
        chol_codes=codes,
        quant=QuantParams(scale, offset),
        color_indices=indices,
        books=RvqCodebooks(entries),
        field_tensors=tensors,
    )


def save_gsv(model: VideoModel | CompressedVideoModel, path) -> int:
    """Write the stream; returns its size in bytes."""
    data = serialize(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_gsv(path) -> VideoModel | CompressedVideoModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise BitstreamError(f"cannot read {path}: {exc}") from exc
    return deserialize(data)


def bits_per_pixel(stream_bytes: int, width: int, height: int, frames: int) -> float:
    """8 * bytes / (width * height * frames), the rate metric."""
    return 8.0 * stream_bytes / (width * height * max(frames, 1))
