"""Command line interface: train, enhance, darken and evaluate.

Environment overrides: ``LLTEXT_SEED`` replaces the config seed and
``LLTEXT_OUTPUT_ROOT`` re-roots relative output paths.
"""

import argparse
import importlib
import json
import logging
import os
from pathlib import Path

from .data import DEFAULT_SCALE_RANGE, build_synthetic_dataset
from .pipeline import TrainConfig, enhance_command, evaluate_command, train
from .region import PooledLumaProvider, load_region_scorer

log = logging.getLogger(__name__)


def _resolve_out(path):
    if path is None:
        return None
    root = os.environ.get("LLTEXT_OUTPUT_ROOT")
    path = Path(path)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_detector(weights):
    if weights is None:
        log.info("no detector weights given, using the pooled-luma stub")
        return PooledLumaProvider()
    return load_region_scorer(weights)


def load_plugin(spec):
    """Resolve a ``module:callable`` plugin spec."""
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ValueError(f"plugin spec must look like module:callable, got {spec!r}")
    return getattr(importlib.import_module(module_name), attr)


def _cmd_train(args):
    config = TrainConfig.from_json(args.config)
    env_seed = os.environ.get("LLTEXT_SEED")
    if env_seed is not None:
        config.seed = int(env_seed)
    detector = _load_detector(args.detector_weights)
    result = train(config, args.manifest, detector,
                   out_dir=_resolve_out(args.out),
                   resume_from=args.resume)
    final = result.log[-1] if result.log else {}
    print(f"trained {config.epochs} epochs, final loss "
          f"{final.get('total', float('nan')):.6f}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_enhance(args):
    written = enhance_command(args.input_dir, args.ckpt,
                              _resolve_out(args.output_dir),
                              dump_attention=_resolve_out(args.dump_attention))
    print(f"enhanced {len(written)} images")
    return 0


def _cmd_darken(args):
    if args.scale_range:
        lo, hi = (float(v) for v in args.scale_range.split(","))
        scale_range = (lo, hi)
    else:
        scale_range = DEFAULT_SCALE_RANGE
    seed = int(os.environ.get("LLTEXT_SEED", args.seed))
    manifest = build_synthetic_dataset(
        args.input_dir, _resolve_out(args.output_dir), ann_dir=args.ann,
        scale_range=scale_range, sigma=args.sigma, gamma=args.gamma,
        seed=seed, split=args.split)
    print(f"manifest: {manifest}")
    return 0


def _cmd_evaluate(args):
    detector = _load_detector(args.detector_weights)
    recognizer = load_plugin(args.recognizer) if args.recognizer else None
    report = evaluate_command(args.pred, args.gt, ann_dir=args.ann,
                              detector=detector, recognizer=recognizer,
                              report_path=_resolve_out(args.report))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lltext",
        description="Low-light image enhancement with scene text restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the enhancer")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--detector-weights", help="region scorer checkpoint")
    p.add_argument("--out", default="runs/train", help="checkpoint directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("enhance", help="enhance a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--out", dest="output_dir", required=True)
    p.add_argument("--dump-attention", help="also dump attention maps here")
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("darken", help="build a synthetic low-light dataset")
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--out", dest="output_dir", required=True)
    p.add_argument("--ann", help="directory of quad annotations to copy")
    p.add_argument("--scale-range", help="exposure scale range, e.g. 0.01,0.033")
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.set_defaults(func=_cmd_darken)

    p = sub.add_parser("evaluate", help="score enhanced images")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ann", help="annotation directory for detection metrics")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--detector-weights", help="region scorer checkpoint")
    p.add_argument("--recognizer", help="module:callable word recognizer plugin")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
