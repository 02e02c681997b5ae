"""Two-moons comparison of consistency wirings over several seeds.

    python scripts/moons_ordering.py --seeds 0,1,2,3,4 --epochs 4000 --out runs/moons

Writes one run directory per (variant, seed) plus ``summary.json`` with the
mean clean-test accuracy of each variant.
"""

import argparse
import json

from sslab.harness import ExperimentConfig, sweep

VARIANTS = ["supervised", "1w-ct", "1w-cs", "2w-c1", "1w-p2"]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int, default=4000)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="runs/moons")
    args = p.parse_args()

    base = ExperimentConfig(task="moons", epochs=args.epochs, output_dir=args.out, log_every=500)
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = sweep(base, args.variants.split(","), seeds, workers=args.workers)
    means = summary["means"]
    for name, acc in sorted(means.items(), key=lambda kv: -kv[1]):
        print(f"{name:>10}  {acc:.4f}")
    print(json.dumps({"ordering_holds": means["1w-ct"] > max(v for k, v in means.items() if k != "1w-ct")}))


if __name__ == "__main__":
    main()
