"""Command-line front end.

Subcommands wire the pipeline end to end: `fixture` writes synthetic clips,
`encode` trains models and writes a float .gsv stream, `decode` renders a
stream back to frames (at any --scale), `compress` runs quantization-aware
fine-tuning and reports rate-distortion points, and `metrics` compares two
frame sources.

Output is line-oriented key=value text; the compress RD table is CSV.
Decode FPS is measured around rendering only, excluding file I/O and PNG
encoding, so it reflects the representation rather than the disk. Exit
codes: 0 success, 2 bad arguments, 3 data errors, 4 internal errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bitstream, fixtures, media
from .codec import CompressedVideoModel, QuantizeConfig, finetune_quantized
from .media import FrameSequence, MediaError
from .train import PROFILES, TrainConfig, train_video

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _add_raw_dims(parser):
    parser.add_argument("--width", type=int, help="frame width for raw RGB24 input")
    parser.add_argument("--height", type=int, help="frame height for raw RGB24 input")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsvideo",
        description="Deformable 2D Gaussian splat video codec.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="train models and write a .gsv stream")
    enc.add_argument("--input", required=True, help="PNG directory or raw RGB24 file")
    enc.add_argument("--output", required=True, help="output .gsv path")
    enc.add_argument("--profile", choices=sorted(PROFILES), default="tiny")
    enc.add_argument("--gop-size", type=int)
    enc.add_argument("--gaussians", type=int)
    enc.add_argument("--coarse-steps", type=int)
    enc.add_argument("--deform-steps", type=int)
    enc.add_argument("--seed", type=int, default=0)
    enc.add_argument("--mask", help="directory of per-frame masks; nonzero = excluded")
    enc.add_argument("--jobs", type=int, default=1, help="parallel GoP training jobs")
    enc.add_argument("--log-every", type=int, default=0, help="training log interval")
    _add_raw_dims(enc)

    dec = sub.add_parser(
        "decode",
        help="render a .gsv stream to frames",
        description="Render a .gsv stream to frames. decode_fps measures "
        "rendering only (file I/O and PNG encoding excluded); frames render "
        "sequentially unless --jobs asks for parallel rendering.",
    )
    dec.add_argument("--input", required=True, help=".gsv path")
    dec.add_argument("--output", required=True, help="output directory or raw file")
    dec.add_argument("--scale", type=float, default=1.0, help="resolution multiplier")
    dec.add_argument("--format", choices=("png", "raw"), default="png")
    dec.add_argument(
        "--reference",
        help="original frames; when given, per-frame PSNR is computed on the "
        "float renders before 8-bit export",
    )
    dec.add_argument("--jobs", type=int, default=1, help="parallel render workers")
    _add_raw_dims(dec)

    comp = sub.add_parser("compress", help="quantize a float stream (with fine-tuning)")
    comp.add_argument("--input", required=True, help="float .gsv path")
    comp.add_argument("--frames", required=True, help="original frames for fine-tuning")
    comp.add_argument("--output", required=True, help="quantized .gsv path")
    comp.add_argument(
        "--rvq-stages", default="2", help="RVQ stage count(s) M, comma separated"
    )
    comp.add_argument(
        "--rvq-size", default="64", help="RVQ codebook size(s) B, comma separated"
    )
    comp.add_argument("--lambda", dest="lam", type=float, default=0.1,
                      help="commitment loss weight")
    comp.add_argument("--finetune-steps", type=int, default=1000)
    comp.add_argument("--seed", type=int, default=0)
    comp.add_argument("--report", help="also write the RD table CSV here")
    _add_raw_dims(comp)

    fix = sub.add_parser("fixture", help="generate a synthetic test clip")
    fix.add_argument("--kind", choices=fixtures.KINDS, default="square")
    fix.add_argument("--output", required=True, help="output PNG directory")
    fix.add_argument("--width", type=int, default=32)
    fix.add_argument("--height", type=int, default=32)
    fix.add_argument("--frames", type=int, default=8)
    fix.add_argument("--seed", type=int, default=0)

    met = sub.add_parser("metrics", help="PSNR between two frame sources")
    met.add_argument("--input", required=True)
    met.add_argument("--reference", required=True)
    _add_raw_dims(met)

    return parser


def _load_frames(path: str, args) -> FrameSequence:
    return media.load_frames(path, width=args.width, height=args.height)


def _load_masks(path: str, seq: FrameSequence) -> list[np.ndarray]:
    masks_seq = media.load_frames(path)
    if len(masks_seq) != len(seq):
        raise MediaError(
            f"{len(masks_seq)} masks for {len(seq)} frames in {path}"
        )
    return [m.data.sum(axis=2) > 0 for m in masks_seq.frames]


def _train_config(args) -> TrainConfig:
    cfg = PROFILES[args.profile](seed=args.seed, log_every=args.log_every)
    overrides = {}
    if args.gop_size is not None:
        overrides["gop_size"] = args.gop_size
    if args.gaussians is not None:
        overrides["num_gaussians"] = args.gaussians
    if args.coarse_steps is not None:
        overrides["coarse_steps"] = args.coarse_steps
    if args.deform_steps is not None:
        overrides["deform_steps"] = args.deform_steps
    return replace(cfg, **overrides) if overrides else cfg


def _print_psnr_table(decoded, reference, prefix=""):
    values = []
    for i, (dec, ref) in enumerate(zip(decoded, reference)):
        value = media.psnr(dec, ref)
        values.append(value)
        print(f"{prefix}frame={i} psnr={value:.6f}")
    mean = sum(values) / len(values) if values else float("nan")
    print(f"{prefix}mean_psnr={mean:.6f}")
    return mean


def _cmd_encode(args) -> int:
    seq = _load_frames(args.input, args)
    cfg = _train_config(args)
    if args.mask:
        cfg = replace(cfg, masks=_load_masks(args.mask, seq))
    t0 = time.perf_counter()
    model = train_video(seq, cfg, jobs=args.jobs, log=print)
    train_seconds = time.perf_counter() - t0
    size = bitstream.save_gsv(model, args.output)
    print(f"stream_bytes={size}")
    print(f"bpp={bitstream.bits_per_pixel(size, model.width, model.height, model.frame_count):.6f}")
    print(f"train_seconds={train_seconds:.3f}")
    _print_psnr_table(model.decode(), seq.frames)
    return EXIT_OK


_WORKER_MODEL = None


def _decode_worker_init(data: bytes):
    global _WORKER_MODEL
    model = bitstream.deserialize(data)
    if isinstance(model, CompressedVideoModel):
        model = model.materialize()
    _WORKER_MODEL = model


def _decode_worker(job):
    index, scale = job
    return _WORKER_MODEL.decode_frame(index, scale)


def _cmd_decode(args) -> int:
    model = bitstream.load_gsv(args.input)
    if isinstance(model, CompressedVideoModel):
        model = model.materialize()
    t0 = time.perf_counter()
    if args.jobs > 1 and model.frame_count > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(
            max_workers=args.jobs,
            initializer=_decode_worker_init,
            initargs=(bitstream.serialize(model),),
        ) as pool:
            decoded = list(
                pool.map(_decode_worker, [(i, args.scale) for i in range(model.frame_count)])
            )
    else:
        decoded = model.decode(scale=args.scale)
    render_seconds = time.perf_counter() - t0
    fps = len(decoded) / render_seconds if render_seconds > 0 else float("inf")
    out_w, out_h = model.output_size(args.scale)
    print(f"frames={len(decoded)} width={out_w} height={out_h}")
    print(f"decode_fps={fps:.3f}")
    if args.reference:
        ref = _load_frames(args.reference, args)
        _print_psnr_table(decoded, ref.frames)
    media.save_frames(FrameSequence(decoded), args.output, fmt=args.format)
    return EXIT_OK


def _rate_points(args) -> list[tuple[int, int]]:
    stages = [int(s) for s in str(args.rvq_stages).split(",")]
    sizes = [int(s) for s in str(args.rvq_size).split(",")]
    if len(stages) == 1 and len(sizes) > 1:
        stages = stages * len(sizes)
    if len(sizes) == 1 and len(stages) > 1:
        sizes = sizes * len(stages)
    if len(stages) != len(sizes):
        raise MediaError("--rvq-stages and --rvq-size lists must align")
    return list(zip(stages, sizes))


def _point_path(base: str, m: int, b: int, multiple: bool) -> Path:
    path = Path(base)
    if not multiple:
        return path
    return path.with_name(f"{path.stem}.m{m}.b{b}{path.suffix}")


def _cmd_compress(args) -> int:
    model = bitstream.load_gsv(args.input)
    if isinstance(model, CompressedVideoModel):
        raise MediaError("input stream is already quantized")
    if not model.gops:
        raise MediaError("cannot compress an empty stream")
    seq = _load_frames(args.frames, args)
    if len(seq) != model.frame_count:
        raise MediaError(
            f"{len(seq)} frames for a stream of {model.frame_count}"
        )
    points = _rate_points(args)
    arch = model.gops[0].field
    rows = ["stages,size,bytes,bpp,psnr"]
    for m, b in points:
        qcfg = QuantizeConfig(
            stages=m, codebook_size=b, lam=args.lam,
            steps=args.finetune_steps, seed=args.seed,
        )
        gops = []
        for gop in model.gops:
            frames = seq.frames[gop.first_frame : gop.first_frame + gop.num_frames]
            gops.append(finetune_quantized(gop, frames, qcfg, log=print))
        compressed = CompressedVideoModel(
            width=model.width, height=model.height,
            frame_count=model.frame_count, gop_size=model.gop_size,
            spatial_cfg=None if arch.spatial_grid is None else arch.spatial_grid.config,
            temporal_cfg=None if arch.temporal_grid is None else arch.temporal_grid.config,
            posenc_freqs=arch.posenc.num_freqs,
            mlp_hidden=arch.mlp.hidden_dim,
            gops=gops,
        )
        out_path = _point_path(args.output, m, b, len(points) > 1)
        size = bitstream.save_gsv(compressed, out_path)
        bpp = bitstream.bits_per_pixel(
            size, model.width, model.height, model.frame_count
        )
        mean = media.mean_psnr(compressed.decode(), seq.frames)
        rows.append(f"{m},{b},{size},{bpp:.6f},{mean:.6f}")
        print(f"point stages={m} size={b} bytes={size} bpp={bpp:.6f} psnr={mean:.6f}")
    print("\n".join(rows))
    if args.report:
        Path(args.report).write_text("\n".join(rows) + "\n")
    return EXIT_OK


def _cmd_fixture(args) -> int:
    seq = fixtures.make_fixture(
        args.kind, args.width, args.height, args.frames, args.seed
    )
    media.save_frames(seq, args.output)
    print(f"kind={args.kind} frames={len(seq)} width={seq.width} height={seq.height}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    a = _load_frames(args.input, args)
    b = _load_frames(args.reference, args)
    if len(a) != len(b):
        raise MediaError(f"frame count mismatch: {len(a)} vs {len(b)}")
    _print_psnr_table(a.frames, b.frames)
    return EXIT_OK


_COMMANDS = {
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "compress": _cmd_compress,
    "fixture": _cmd_fixture,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (MediaError, bitstream.BitstreamError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # internal invariant violations
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
