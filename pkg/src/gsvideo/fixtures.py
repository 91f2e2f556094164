"""Seeded synthetic test clips.

Three kinds, each probing a different part of the pipeline:

* ``square`` - a textured square translating diagonally over a static
  textured background (key-frame initialization plus real dynamics),
* ``pan``    - a global integer-pixel pan over one large texture (camera
  motion with no independent object),
* ``static`` - the same frame repeated (degenerate dynamics).

Frames are generated directly on the 8-bit lattice (multiples of 1/255), so
writing them to PNG and loading them back is lossless and training on disk
or in-memory fixtures is bit-identical.
"""

from __future__ import annotations

import numpy as np

from .media import FrameSequence, Image

KINDS = ("square", "pan", "static")


def _quantize(data: np.ndarray) -> np.ndarray:
    return (np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5) / 255.0).astype(np.float32)


def _smooth_texture(rng: np.random.Generator, width: int, height: int, cells: int):
    """Low-frequency RGB noise, bilinearly upsampled to the target size."""
    coarse = rng.uniform(0.1, 0.9, size=(cells, cells, 3))
    ys = np.linspace(0, cells - 1, height)
    xs = np.linspace(0, cells - 1, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, cells - 1)
    x1 = np.minimum(x0 + 1, cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    out = (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
        + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y1, x1)] * fy * fx
    )
    return out


def square_sweep_bounds(
    width: int, height: int, frames: int
) -> tuple[int, int, int, int]:
    """Region (x0, y0, x1, y1), exclusive upper bounds, swept by the square."""
    side = max(4, width // 4)
    step = max(1, width // (4 * max(frames - 1, 1)))
    x0 = width // 8
    y0 = height // 8
    x1 = min(width, x0 + side + step * (frames - 1))
    y1 = min(height, y0 + side + step * (frames - 1))
    return x0, y0, x1, y1


def make_fixture(
    kind: str, width: int = 32, height: int = 32, frames: int = 8, seed: int = 0
) -> FrameSequence:
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}, expected one of {KINDS}")
    rng = np.random.default_rng(seed)
    background = _smooth_texture(rng, width, height, 5)

    if kind == "static":
        frame = _quantize(background)
        return FrameSequence(
            [Image(frame.copy()) for _ in range(frames)], source=f"fixture:{kind}"
        )

    if kind == "pan":
        shift = max(1, width // (2 * max(frames, 1)))
        big = _smooth_texture(rng, width + shift * frames, height, 7)
        out = []
        for k in range(frames):
            out.append(Image(_quantize(big[:, k * shift : k * shift + width])))
        return FrameSequence(out, source=f"fixture:{kind}")

    # translating textured square
    side = max(4, width // 4)
    patch = _smooth_texture(rng, side, side, 3)
    x0, y0, _, _ = square_sweep_bounds(width, height, frames)
    step = max(1, width // (4 * max(frames - 1, 1)))
    out = []
    for k in range(frames):
        data = background.copy()
        px = min(x0 + step * k, width - side)
        py = min(y0 + step * k, height - side)
        data[py : py + side, px : px + side] = patch
        out.append(Image(_quantize(data)))
    return FrameSequence(out, source=f"fixture:{kind}")


def make_masks(
    width: int,
    height: int,
    frames: int,
    count: int = 5,
    size: int = 6,
    seed: int = 0,
) -> list[np.ndarray]:
    """Per-frame boolean masks of ``count`` random size x size squares."""
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(frames):
        m = np.zeros((height, width), dtype=bool)
        for _ in range(count):
            x = int(rng.integers(0, max(1, width - size + 1)))
            y = int(rng.integers(0, max(1, height - size + 1)))
            m[y : y + size, x : x + size] = True
        masks.append(m)
    return masks


def apply_masks(seq: FrameSequence, masks: list[np.ndarray], fill: float = 0.0):
    """Overwrite masked pixels with ``fill`` (the corrupted/inpainting input)."""
    out = []
    for frame, mask in zip(seq.frames, masks):
        data = frame.data.copy()
        data[mask] = fill
        out.append(Image(data))
    return FrameSequence(out, source=seq.source + ":masked")
