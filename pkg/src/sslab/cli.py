"""Command line entry point: ``sslab warp|train-moons|train-dense|sweep|miou``.

Exit codes: 0 success, 1 I/O or image format error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .consistency import ConfigError, PerturbationParams, sample_perturbation
from .data import ImageFormatError, read_pgm, read_ppm, write_pgm, write_ppm
from .harness import PERTURBATIONS, VARIANTS, ExperimentConfig, compute_miou, run_dense, run_moons, sweep
from .photometric import PhotometricParams, apply_photometric
from .tps import GeometricParams, backward_warp

EXIT_IO = 1
EXIT_CONFIG = 2

# flag name -> (config field, type)
_OVERRIDES = {
    "variant": str,
    "teacher": str,
    "ema": float,
    "alpha": float,
    "epochs": int,
    "lr": float,
    "schedule": str,
    "weight_decay": float,
    "seed": int,
    "batch_labeled": int,
    "batch_unlabeled": int,
    "perturbation": str,
    "r_fraction": float,
    "moons_sigma": float,
    "label_proportion": float,
    "train_scenes": int,
    "val_scenes": int,
    "image_size": int,
    "illumination": float,
    "texture": float,
    "log_every": int,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file mirroring ExperimentConfig")
    p.add_argument("--out", dest="output_dir", help="output directory")
    for name, typ in _OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--batch-norm", dest="batch_norm", action=argparse.BooleanOptionalAction, default=None)


def _load_config(args, task: str) -> ExperimentConfig:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config: {err}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.config}: {err}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    doc["task"] = doc.get("task", task)
    if doc["task"] != task:
        raise ConfigError(f"config task {doc['task']!r} does not match command ({task})")
    for name in list(_OVERRIDES) + ["output_dir", "batch_norm"]:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    return ExperimentConfig.from_dict(doc)


def cmd_warp(args) -> int:
    image = read_ppm(args.input)
    h, w = image.shape[:2]
    if args.identity:
        tau = PerturbationParams(GeometricParams.identity(h, w), PhotometricParams())
    else:
        rng = np.random.default_rng(args.seed)
        r = args.r_fraction * h
        tau = sample_perturbation(rng, h, w, r, photometric=not args.no_photometric, geometric=not args.no_geometric)
    warped, mask = backward_warp(apply_photometric(image, tau.photometric), tau.geometric.warp())
    write_ppm(args.output, warped)
    mask_path = args.mask or Path(args.output).with_suffix(".mask.pgm")
    write_pgm(mask_path, (mask * 255).astype(np.int64))
    doc = tau.to_dict()
    doc["r"] = args.r_fraction * h
    print(json.dumps(doc, sort_keys=True))
    return 0


def _print_final(res) -> None:
    print(res.final.to_json())


def cmd_train_moons(args) -> int:
    _print_final(run_moons(_load_config(args, "moons")))
    return 0


def cmd_train_dense(args) -> int:
    _print_final(run_dense(_load_config(args, "dense")))
    return 0


def _csv(typ):
    return lambda s: [typ(x) for x in s.split(",") if x]


def cmd_sweep(args) -> int:
    base = _load_config(args, args.task)
    variants = args.variants or [base.variant]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    for p in args.perturbations or []:
        if p not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {p!r}")
    summary = sweep(base, variants, args.seeds or [base.seed], args.perturbations, workers=args.workers)
    print(json.dumps(summary["means"], indent=2, sort_keys=True))
    return 0


def cmd_miou(args) -> int:
    pred, true = read_pgm(args.pred), read_pgm(args.true)
    if pred.shape != true.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {true.shape}")
    per_class, miou = compute_miou(pred, true, ignore=args.ignore)
    print(json.dumps({"per_class_iou": {str(k): v for k, v in per_class.items()}, "miou": miou}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("warp", help="perturb a PPM image with a random photometric + TPS warp")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--mask", type=Path, help="validity mask PGM (default: <output>.mask.pgm)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--r-fraction", type=float, default=0.05, help="max displacement as a fraction of height")
    p.add_argument("--identity", action="store_true", help="apply the identity perturbation")
    p.add_argument("--no-photometric", action="store_true")
    p.add_argument("--no-geometric", action="store_true")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("train-moons", help="two-moons consistency experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_moons)

    p = sub.add_parser("train-dense", help="synthetic dense-prediction experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_dense)

    p = sub.add_parser("sweep", help="grid over variants x perturbations x seeds")
    _add_config_flags(p)
    p.add_argument("--task", choices=["moons", "dense"], default="moons")
    p.add_argument("--variants", type=_csv(str))
    p.add_argument("--perturbations", type=_csv(str))
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("miou", help="mIoU between two label PGMs")
    p.add_argument("pred", type=Path)
    p.add_argument("true", type=Path)
    p.add_argument("--ignore", type=int, default=0)
    p.set_defaults(func=cmd_miou)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"sslab: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ImageFormatError) as err:
        print(f"sslab: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
