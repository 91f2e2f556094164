"""Frame I/O and quality metrics.

Frames live in memory as float arrays in [0, 1] (shape H x W x 3, RGB).
Supported on-disk formats are directories of 8-bit RGB PNGs and raw
interleaved RGB24 files. All metrics are computed on the float data, not
on the 8-bit export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError


class MediaError(Exception):
    """Unreadable, malformed, or dimensionally inconsistent frame data."""


@dataclass
class Image:
    """One RGB frame; ``data`` is (height, width, 3) float, row-major."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise MediaError(f"image data must be (H, W, 3), got {self.data.shape}")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class FrameSequence:
    """Ordered frames of identical dimensions plus where they came from."""

    frames: list[Image]
    source: str = ""

    def __post_init__(self):
        if self.frames:
            w, h = self.frames[0].width, self.frames[0].height
            for i, f in enumerate(self.frames):
                if (f.width, f.height) != (w, h):
                    raise MediaError(
                        f"frame {i} is {f.width}x{f.height}, expected {w}x{h}"
                    )

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    def __len__(self) -> int:
        return len(self.frames)


def to_uint8(data: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half-away-from-zero to 8 bits."""
    clamped = np.clip(data, 0.0, 1.0)
    # values are non-negative after the clamp, so floor(x + 0.5) rounds
    # half-away-from-zero (np.round would round half-to-even)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def from_uint8(data: np.ndarray, dtype=np.float32) -> np.ndarray:
    return data.astype(dtype) / dtype(255.0)


def _sorted_pngs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def load_frames(
    path: str | Path,
    width: int | None = None,
    height: int | None = None,
    dtype=np.float32,
) -> FrameSequence:
    """Load a PNG directory or a raw RGB24 file into float frames.

    PNG: ``path`` is a directory; frames are its ``*.png`` files in name
    order. Raw: ``path`` is a file of ``width*height*3``-byte frames and both
    dimensions must be given.
    """
    path = Path(path)
    if path.is_dir():
        files = _sorted_pngs(path)
        if not files:
            raise MediaError(f"no .png files in {path}")
        frames = []
        for f in files:
            try:
                with PILImage.open(f) as img:
                    rgb = np.asarray(img.convert("RGB"))
            except (UnidentifiedImageError, OSError) as exc:
                raise MediaError(f"cannot read {f}: {exc}") from exc
            frames.append(Image(from_uint8(rgb, dtype)))
        return FrameSequence(frames, source=str(path))

    if not path.exists():
        raise MediaError(f"no such file or directory: {path}")
    if width is None or height is None:
        raise MediaError("raw input needs explicit width and height")
    frame_bytes = width * height * 3
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % frame_bytes != 0:
        raise MediaError(
            f"{path} holds {raw.size} bytes, not a positive multiple of the "
            f"{frame_bytes}-byte frame size for {width}x{height} RGB24"
        )
    count = raw.size // frame_bytes
    data = raw.reshape(count, height, width, 3)
    return FrameSequence(
        [Image(from_uint8(data[i], dtype)) for i in range(count)], source=str(path)
    )


def save_frames(seq: FrameSequence, path: str | Path, fmt: str = "png") -> None:
    """Write frames as 8-bit data: a PNG directory or one raw RGB24 file."""
    path = Path(path)
    if fmt == "png":
        path.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            PILImage.fromarray(to_uint8(frame.data), mode="RGB").save(
                path / f"frame_{i:04d}.png"
            )
    elif fmt == "raw":
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            for frame in seq.frames:
                fh.write(to_uint8(frame.data).tobytes())
    else:
        raise MediaError(f"unknown frame format {fmt!r}")


def psnr(a: Image, b: Image) -> float:
    """PSNR in dB over all pixel channels, peak 1.0; +inf for identical."""
    if a.data.shape != b.data.shape:
        raise MediaError(f"dimension mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def mean_psnr(decoded: list[Image], reference: list[Image]) -> float:
    """Per-frame PSNR averaged over frames (the sequence-level metric)."""
    if len(decoded) != len(reference):
        raise MediaError(f"frame count mismatch: {len(decoded)} vs {len(reference)}")
    values = [psnr(d, r) for d, r in zip(decoded, reference)]
    return sum(values) / len(values)
