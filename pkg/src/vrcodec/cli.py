"""Command-line interface: ``vrcodec <verb> ...`` (or ``python -m vrcodec``)."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .codec import CompressedImage, compress, decompress, target_rate_search
from .data import list_images, load_image, save_image
from .metrics import max_scales, ms_ssim, psnr
from .sweep import SweepSpec, codelength_map, default_delta_grid, export_codelength_maps, rd_sweep
from .train import TrainConfig, load_state, train_run


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "steps": str(args.steps),
                                        "pretrain_steps": str(min(config.pretrain_steps, args.steps))})
    out = Path(args.out)
    state = None
    if args.resume:
        state = load_state(args.resume, config)

    def show(rec):
        if not args.quiet:
            print(f"step {rec['step']:>6} {rec['phase']:<8} loss {rec['loss']:.4f} "
                  f"bits {rec['bits']:.1f} mse {rec['mse']:.5f}", flush=True)

    result = train_run(config, out_dir=out, state=state, progress=show)
    print(json.dumps({"final": str(out / "final.vrckpt"), "steps": result.state.step,
                      "phase_boundary": result.phase_boundary}))
    return 0


def cmd_compress(args) -> int:
    model, _ = ckpt_io.load_model(args.checkpoint)
    image = load_image(args.input)
    if args.target_bpp is not None:
        found = target_rate_search(image, model, args.target_bpp)
        stream = found.stream
        info = {"lambda_index": found.lambda_index, "delta": found.delta, "bpp": found.bpp,
                "outside_envelope": found.outside_envelope}
    else:
        if args.lambda_index is None:
            raise SystemExit("compress needs --lambda-index (with --delta) or --target-bpp")
        stream = compress(image, model, args.lambda_index, args.delta)
        info = {"lambda_index": stream.lambda_index, "delta": stream.delta, "bpp": stream.bpp}
    data = stream.to_bytes()
    Path(args.output).write_bytes(data)
    info["bytes"] = len(data)
    print(json.dumps(info))
    return 0


def cmd_decompress(args) -> int:
    model, _ = ckpt_io.load_model(args.checkpoint)
    stream = CompressedImage.from_bytes(Path(args.input).read_bytes())
    save_image(args.output, decompress(stream, model))
    return 0


def _metrics(a: np.ndarray, b: np.ndarray) -> dict:
    scales = max_scales(*a.shape[-2:])
    return {"psnr_db": psnr(a, b), "ms_ssim": ms_ssim(a, b, scales) if scales else None}


def cmd_eval(args) -> int:
    if len(args.images) % 2:
        raise SystemExit("eval takes reference/distorted pairs")
    results = []
    for ref, dist in zip(args.images[::2], args.images[1::2]):
        results.append({"reference": ref, "distorted": dist, **_metrics(load_image(ref), load_image(dist))})
    # json has no infinity; identical pairs report psnr_db as null
    results = [{k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
               for r in results]
    text = json.dumps(results, indent=2)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    model, lambdas = ckpt_io.load_model(args.checkpoint)
    options = ckpt_io.parse_config(Path(args.spec).read_text()) if args.spec else {}
    indices = _ints(args.lambda_indices or options.get("lambda_indices", "")) or list(range(model.config.n_lambdas))
    deltas = _floats(args.deltas or options.get("deltas", "")) or list(default_delta_grid())
    image_dir = args.images or options.get("images")
    if not image_dir:
        raise SystemExit("sweep needs --images DIR (or images= in the spec file)")
    output = args.output or options.get("output", "sweep")
    spec = SweepSpec(indices, deltas, [load_image(p) for p in list_images(image_dir)], output)
    rows = rd_sweep(spec, model, lambdas)
    for row in rows:
        print(f"lambda[{row.lambda_index}] delta {row.delta:.3f}: bpp {row.bpp:.4f} "
              f"psnr {row.psnr_db:.2f} dB ms-ssim {row.ms_ssim:.4f}")
    return 0


def cmd_codelength_map(args) -> int:
    model, _ = ckpt_io.load_model(args.checkpoint)
    maps = codelength_map(load_image(args.input), model, args.lambda_index, args.delta)
    export_codelength_maps(maps, args.out)
    print(json.dumps({"z_bits": float(maps.z_bits.sum()), "w_bits": float(maps.w_bits.sum())}))
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    ok = run_selfcheck(verbose=not args.quiet)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vrcodec", description="Variable-rate learned image codec")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", help="training config (key=value lines); defaults if omitted")
    p.add_argument("--out", required=True, help="output directory for log and checkpoints")
    p.add_argument("--steps", type=int, help="override the total step count")
    p.add_argument("--resume", help="state checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="image -> .vrc1 stream")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lambda-index", type=int)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--target-bpp", type=float)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help=".vrc1 stream -> image")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="PSNR / MS-SSIM for reference/distorted image pairs")
    p.add_argument("images", nargs="+", help="ref1 dist1 [ref2 dist2 ...]")
    p.add_argument("--output", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="rate-distortion sweep over (lambda, delta)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", help="key=value file with lambda_indices, deltas, images, output")
    p.add_argument("--images", help="directory of images")
    p.add_argument("--lambda-indices", help="comma-separated indices (default: all)")
    p.add_argument("--deltas", help="comma-separated bin sizes (default: 9 log-spaced in [0.5, 2])")
    p.add_argument("--output", help="output prefix; writes .csv and .json")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("codelength-map", help="per-element code lengths for z and w")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambda-index", type=int, required=True)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_codelength_map)

    p = sub.add_parser("selfcheck", help="run the built-in invariant checks")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
