"""Command-line entry point: gen-data, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 validation failure (bad config/data/checkpoint, failed
check), 2 usage error. TWM_SEED, when set, overrides every config seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .checkpoint import CheckpointError
from .data import DatasetError, PhantomSpec, gen_phantoms
from .network import ConfigError, ModelConfig
from .optim import TrainConfig
from .train import TrainingError, run_evaluation, run_prediction, run_training

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2
SEED_ENV = "TWM_SEED"

log = logging.getLogger("topowmamba")


def seed_override() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def _with_seed(d: dict) -> dict:
    seed = seed_override()
    return d if seed is None else {**d, "seed": seed}


def cmd_gen_data(args) -> int:
    spec = PhantomSpec.from_dict(_with_seed(_load_json(args.spec)))
    manifest = gen_phantoms(spec, args.out)
    print(f"wrote {len(manifest['samples'])} phantoms to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg = ModelConfig.from_dict(_with_seed(_load_json(args.model_config)))
    train_cfg = TrainConfig.from_dict(_with_seed(_load_json(args.train_config)))
    result = run_training(model_cfg, train_cfg, args.data, args.out)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    report = run_evaluation(args.ckpt, args.data, args.split, args.report)
    mean = report.to_dict()["mean"]
    print(f"{args.split}: n={len(report.cases)} dice={mean['dice']:.2f} "
          f"hd95={mean['hd95']:.2f} iou={mean['iou']:.2f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    for path in run_prediction(args.ckpt, args.input, args.out, args.overlay):
        print(path)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .selfcheck import CHECKS, run_checks

    names = [args.module] if args.module else list(CHECKS)
    if args.module and args.module not in CHECKS:
        print(f"unknown module {args.module!r}; choose from {', '.join(CHECKS)}", file=sys.stderr)
        return EXIT_USAGE
    seed = seed_override()
    reports = run_checks(names, args.tol, 0 if seed is None else seed)
    for name, rep in reports.items():
        print(f"{name:10s} {rep}")
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topowmamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    g.add_argument("--spec", required=True, help="PhantomSpec JSON")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model-config", required=True)
    t.add_argument("--train-config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--report", required=True, help="JSON report path (CSV written alongside)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict masks for PGM or raw f32 slices")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--overlay", action="store_true", help="also write colour overlays (PPM)")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", default=None, help="one of sca, vss, snake_vss, scvss, wmb, model")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, TrainingError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
