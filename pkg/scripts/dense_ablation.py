"""Synthetic dense benchmark: supervised baseline vs. 1w-ct with Ph, TPS and PhTPS perturbations.

    python scripts/dense_ablation.py --seeds 0,1,2 --out runs/dense

Prints mean mIoU (0-100) per cell and writes ``summary.json`` files under
``--out``.  Extra ``key=value`` pairs override ExperimentConfig fields, e.g.
``epochs=100 teacher=mean-teacher``.
"""

import argparse
import json
from pathlib import Path

from sslab.harness import ExperimentConfig, sweep


def _parse_overrides(pairs):
    out = {}
    for item in pairs:
        key, _, value = item.partition("=")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="runs/dense")
    p.add_argument("overrides", nargs="*", help="key=value config overrides")
    args = p.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    base = ExperimentConfig(task="dense", log_every=100, **_parse_overrides(args.overrides))
    root = Path(args.out)
    sup = sweep(base.replace(output_dir=str(root / "supervised")), ["supervised"], seeds, workers=args.workers)
    cons = sweep(base.replace(output_dir=str(root / "1w-ct")), ["1w-ct"], seeds, ["phtps", "ph", "tps"],
                 workers=args.workers)
    means = {"supervised": 100 * sup["means"]["supervised"]}
    means.update({k: 100 * v for k, v in cons["means"].items()})
    for name, miou in means.items():
        print(f"{name:>14}  {miou:6.2f}")
    phtps, ph, tps = means["1w-ct/phtps"], means["1w-ct/ph"], means["1w-ct/tps"]
    print(json.dumps({
        "phtps_minus_supervised": phtps - means["supervised"],
        "pairs_held": [phtps >= ph, ph >= tps, phtps >= tps],
    }))


if __name__ == "__main__":
    main()
