"""Deformable 2D Gaussian splat video codec.

A video is split into groups of pictures; each group is represented by a
canonical set of 2D Gaussians plus a spatio-temporal hash-encoded
deformation field, trained by gradient descent against the source frames
and optionally compressed into a quantized .gsv bitstream. Decoding
rasterizes the deformed Gaussians per frame, at any output resolution.
"""

from .bitstream import BitstreamError, bits_per_pixel, load_gsv, save_gsv
from .codec import QuantizeConfig, finetune_quantized
from .deform import DeformationField, PosEncConfig, deform
from .fixtures import make_fixture
from .gaussians import Gaussian2D, GaussianSet, render, render_reference
from .hashgrid import HashGrid, HashGridConfig, encode
from .media import FrameSequence, Image, MediaError, load_frames, psnr, save_frames
from .model import GoPModel, VideoModel
from .train import TrainConfig, train_gop, train_video

__version__ = "0.1.0"

__all__ = [
    "BitstreamError",
    "DeformationField",
    "FrameSequence",
    "Gaussian2D",
    "GaussianSet",
    "GoPModel",
    "HashGrid",
    "HashGridConfig",
    "Image",
    "MediaError",
    "PosEncConfig",
    "QuantizeConfig",
    "TrainConfig",
    "VideoModel",
    "bits_per_pixel",
    "deform",
    "encode",
    "finetune_quantized",
    "load_frames",
    "load_gsv",
    "make_fixture",
    "psnr",
    "render",
    "render_reference",
    "save_frames",
    "save_gsv",
    "train_gop",
    "train_video",
]
