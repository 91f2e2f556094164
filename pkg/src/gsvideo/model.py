"""Trained-model containers: one model per group of pictures, plus the video.

A GoP model is a canonical Gaussian set and a deformation field covering a
contiguous frame range. Decoding frame i of a GoP deforms the canonical set
at the normalized local timestamp t = i / (num_frames - 1) and rasterizes
it; any output resolution works because the representation is resolution
free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .deform import DeformationField, deform
from .gaussians import GaussianSet, render
from .media import Image


@dataclass
class GoPModel:
    canonical: GaussianSet
    field: DeformationField
    first_frame: int
    num_frames: int

    def frame_time(self, local_index: int) -> float:
        """Local timestamp in [0, 1]; a single-frame group sits at t = 0."""
        if not 0 <= local_index < self.num_frames:
            raise IndexError(f"frame {local_index} outside GoP of {self.num_frames}")
        if self.num_frames == 1:
            return 0.0
        return local_index / (self.num_frames - 1)

    def deformed(self, local_index: int) -> GaussianSet:
        return deform(self.field, self.canonical, self.frame_time(local_index))

    def render_frame(self, local_index: int, out_width: int, out_height: int) -> Image:
        return render(self.deformed(local_index), out_width, out_height)


@dataclass
class VideoModel:
    width: int
    height: int
    frame_count: int
    gop_size: int
    gops: list[GoPModel] = field(default_factory=list)

    def output_size(self, scale: float = 1.0) -> tuple[int, int]:
        return int(round(self.width * scale)), int(round(self.height * scale))

    def decode_frame(self, index: int, scale: float = 1.0) -> Image:
        for gop in self.gops:
            if gop.first_frame <= index < gop.first_frame + gop.num_frames:
                w, h = self.output_size(scale)
                return gop.render_frame(index - gop.first_frame, w, h)
        raise IndexError(f"frame {index} not covered by any GoP")

    def decode(self, scale: float = 1.0) -> list[Image]:
        return [self.decode_frame(i, scale) for i in range(self.frame_count)]
