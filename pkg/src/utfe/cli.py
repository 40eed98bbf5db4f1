"""Command-line front end.

Subcommands: gen-data, train, encode, reconstruct, evaluate, compare.
Exit codes: 0 success, 1 runtime failure, 2 usage error. Every output
file is written atomically (temp file + rename), so a failing command
leaves no partial outputs behind.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench
from .data import (NoiseConfig, SynthConfig, _atomic_write_bytes, corrupt,
                   generate_synthetic, image_seed, load_corpus, load_pgm,
                   save_pgm, write_corpus)
from .extractors import (DENOISING_KINDS, KINDS, FeatureSize, ModelFormatError,
                         TrainConfig, build_extractor, load_model, save_model,
                         train)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

DEFAULT_TRAIN_SIGMA = 0.2


class UsageError(Exception):
    pass


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise UsageError(message)


def cmd_gen_data(args) -> int:
    _require(args.count >= 1, f"--count must be >= 1, got {args.count}")
    config = SynthConfig(seed=args.seed, count=args.count,
                         background_speckle=args.sigma)
    images = generate_synthetic(config)
    seeds = [image_seed(args.seed, i) for i in range(args.count)]
    write_corpus(args.out, images, seeds)
    print(f"wrote {args.count} images and manifest to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        features = FeatureSize.parse(args.features)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    if args.kind == "dct":
        given = [name for name, value in (
            ("--epochs", args.epochs), ("--lr", args.lr), ("--sigma", args.sigma),
            ("--seed", args.seed), ("--batch", args.batch), ("--target", args.target),
        ) if value is not None]
        _require(not given, f"--kind dct takes no training flags, got {' '.join(given)}")
        try:
            model = build_extractor("dct", features)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        save_model(model, args.out)
        print(f"wrote dct model ({features}, K={features.length}) to {args.out}")
        return EXIT_OK

    _require(args.data is not None, f"--data is required for --kind {args.kind}")
    denoising = args.kind in DENOISING_KINDS
    if not denoising:
        _require(args.sigma is None, f"--sigma only applies to {DENOISING_KINDS}")
        _require(args.target is None, f"--target only applies to {DENOISING_KINDS}")
    sigma = args.sigma
    if denoising and sigma is None:
        sigma = DEFAULT_TRAIN_SIGMA
        print(f"note: no --sigma given, using default speckle sigma {sigma}",
              file=sys.stderr)
    try:
        model = build_extractor(args.kind, features)
        config = TrainConfig(
            learning_rate=0.001 if args.lr is None else args.lr,
            epochs=200 if args.epochs is None else args.epochs,
            batch_size=64 if args.batch is None else args.batch,
            seed=0 if args.seed is None else args.seed,
            noise=NoiseConfig(sigma=sigma, seed=0) if denoising else None,
            denoising_target=args.target or "clean",
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    images = load_corpus(args.data)
    train(model, images, config,
          on_epoch=lambda e, loss: print(f"{e + 1}\t{loss:.8f}", flush=True))
    save_model(model, args.out)
    print(f"wrote trained {args.kind} model (K={features.length}) to {args.out}",
          file=sys.stderr)
    return EXIT_OK


def cmd_encode(args) -> int:
    model = load_model(args.model)
    image = load_pgm(args.infile)
    features = model.encode(image)
    text = "".join(f"{float(v):.9g}\n" for v in features)
    _atomic_write_bytes(args.out, text.encode())
    print(f"wrote {features.size} features to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    with open(args.infile, encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]
    try:
        features = np.array([float(v) for v in lines], dtype=np.float32)
    except ValueError:
        raise ValueError(f"{args.infile}: unparsable feature value") from None
    image = model.reconstruct(features)
    save_pgm(args.out, image)
    print(f"wrote reconstruction to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    images = load_corpus(args.data)
    scores = bench.evaluate_extractor(model, images, noisy=args.noisy,
                                      sigma=args.sigma, seed=args.seed)
    mse_values, cw_values = scores["mse"], scores["cw_ssim"]
    for i in range(images.shape[0]):
        print(f"{i}\t{mse_values[i]:.6f}\t{cw_values[i]:.6f}")
    print(f"mean mse      {mse_values.mean():.6f} +- {mse_values.std():.6f}")
    print(f"mean cw_ssim  {cw_values.mean():.6f} +- {cw_values.std():.6f}")
    if args.csv:
        lines = ["image,mse,cw_ssim"]
        lines += [f"{i},{mse_values[i]:.6f},{cw_values[i]:.6f}"
                  for i in range(images.shape[0])]
        _atomic_write_bytes(args.csv, ("\n".join(lines) + "\n").encode())
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        spec = bench.parse_experiment_spec(args.spec)
    except FileNotFoundError:
        raise UsageError(f"spec file {args.spec!r} not found") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = bench.run_compare(spec, timing=args.timing,
                               log=lambda msg: print(msg, file=sys.stderr))
    _atomic_write_bytes(args.out, bench.format_report_csv(report).encode())
    print(bench.format_report_table(report), end="")
    print(f"wrote report to {args.out}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="utfe",
        description="Train, apply, and compare unsupervised feature extractors "
                    "for 50x60 grayscale images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic PGM corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.5,
                   help="background speckle strength")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an extractor and save the model")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--features", required=True, help='feature size, e.g. "2x(5,6)"')
    p.add_argument("--data", help="corpus directory (PGM files)")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None,
                   help="training speckle sigma (dae/dcae)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--target", choices=("clean", "noisy"), default=None,
                   help="denoising reconstruction target")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode one PGM image to a feature vector")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True, metavar="IMG.pgm")
    p.add_argument("--out", required=True, metavar="VEC.txt")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("reconstruct", help="reconstruct an image from features")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True, metavar="VEC.txt")
    p.add_argument("--out", required=True, metavar="IMG.pgm")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score a model on a test corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noisy", action="store_true",
                   help="corrupt inputs; metrics still compare against clean")
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0, help="evaluation noise seed")
    p.add_argument("--csv", help="also write per-image scores as CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run a multi-extractor comparison")
    p.add_argument("--spec", required=True, help="experiment spec file")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--timing", choices=("none", "wall"), default="none",
                   help="train_seconds column: deterministic 0.0 or wall time")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
