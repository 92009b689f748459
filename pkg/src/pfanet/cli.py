"""Command-line entry point: ``pfanet {train,eval,gradcheck,synth,predict}``.

Exit codes: 0 success, 1 usage or config error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import gradcheck
from .data import (DatasetError, SynthSceneSpec, load_dataset, load_rgb_png, materialize_synth,
                   save_depth_png)
from .optim import NumericError
from .tensor import ShapeError
from .trainer import evaluate, load_checkpoint, model_predictor, save_preview, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


def _train(args) -> int:
    cfg = config_mod.load(args.config)
    if args.out:
        cfg = config_mod.replace(cfg, out_dir=args.out)
    result = train(cfg, resume=args.resume)
    print(f"{result.steps} steps, checkpoint {result.checkpoint}")
    if result.losses:
        print(f"final loss {result.losses[-1]:.6f}")
    return EXIT_OK


def _eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, args.split)
    result = evaluate(model_predictor(model), dataset, args.out, args.dump_depth)
    print(result.table())
    return EXIT_OK if result.reports else EXIT_USAGE


def _gradcheck(args) -> int:
    results = gradcheck.run(tol=args.tol, only=args.only or None, seed=args.seed)
    print(gradcheck.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def _synth(args) -> int:
    spec = config_mod.load(args.spec, SynthSceneSpec) if args.spec else SynthSceneSpec()
    ids = materialize_synth(args.out, spec, args.count)
    print(f"wrote {len(ids)} scenes to {args.out}")
    return EXIT_OK


def _predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    rgb = load_rgb_png(args.image)
    h, w = rgb.shape[1:]
    if h % 32 or w % 32:
        raise ShapeError(f"{args.image} is {h}x{w}; both sides must be divisible by 32")
    depth = model.predict(rgb)
    save_depth_png(args.out, depth)
    if args.preview:
        save_preview(args.preview, depth, model.config.max_depth)
    print(f"depth range {depth.min():.3f} .. {depth.max():.3f} m, wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfanet", description="PFANet monocular depth estimation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override out_dir from the config")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split file name without .txt (default: every rgb/*.png)")
    p.add_argument("--dump-depth", dest="dump_depth", help="write predicted depth PNGs here")
    p.add_argument("--out", help="write metrics.csv, per_sample.csv and metrics.txt here")
    p.set_defaults(func=_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--tol", type=float, help="override every component's tolerance")
    p.add_argument("--only", nargs="*", choices=gradcheck.COMPONENTS, metavar="NAME")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_gradcheck)

    p = sub.add_parser("synth", help="write synthetic scenes in the dataset layout")
    p.add_argument("--spec", help="key = value file with SynthSceneSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=_synth)

    p = sub.add_parser("predict", help="predict depth for one RGB PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="16-bit depth PNG (metres x 256)")
    p.add_argument("--preview", help="optional false-colour PNG")
    p.set_defaults(func=_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, OSError, ValueError) as exc:
        # config, format, shape and loss-input errors are all ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
