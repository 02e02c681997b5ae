"""Render a synthetic scene next to several random perturbations of it.

    python scripts/warp_demo.py --out runs/warp_demo --count 4

Writes ``scene.ppm``, ``labels.pgm`` and, per sample, the perturbed image, its
validity mask and the perturbation parameters as JSON.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from sslab.consistency import perturb_images, sample_perturbation
from sslab.data import synth_scenes, write_pgm, write_ppm


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/warp_demo")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--r-fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = synth_scenes(1, args.size, args.size, seed=args.seed, texture=0.15)
    write_ppm(out / "scene.ppm", scene.images[0])
    write_pgm(out / "labels.pgm", scene.labels[0] * 50)
    rng = np.random.default_rng(args.seed)
    taus = [sample_perturbation(rng, args.size, args.size, args.r_fraction * args.size) for _ in range(args.count)]
    batch = perturb_images(np.repeat(scene.images, args.count, axis=0), taus)
    for i, tau in enumerate(taus):
        write_ppm(out / f"perturbed_{i}.ppm", batch.images[i])
        write_pgm(out / f"mask_{i}.pgm", (batch.masks[i] * 255).astype(np.int64))
        (out / f"tau_{i}.json").write_text(json.dumps(tau.to_dict(), indent=2) + "\n")
    print(f"wrote {1 + 3 * args.count} files to {out}")


if __name__ == "__main__":
    main()
