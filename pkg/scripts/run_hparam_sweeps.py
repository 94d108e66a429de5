#!/usr/bin/env python3
"""Reproduce the hyperparameter-study grids on the synthetic benchmark.

Sweeps the fusion weight (0 to 1, step 0.1), neighbor count
{1,3,5,7,9,11,13}, selection ratio {0.1,0.3,0.5,0.7,0.9}, and entity count
{4,8} (the synthetic bundle plants 8 entities per scale, which caps the
entity grid). Writes one summary CSV per swept key via the CLI sweep
command.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from promptmil.cli import main as cli_main

SWEEPS = {
    "lambda": "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
    "n_neighbors": "1,3,5,7,9,11,13",
    "r": "0.1,0.3,0.5,0.7,0.9",
    "n_entities": "4,8",
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/sweeps")
    parser.add_argument("--repeats", type=int, default=1)
    parser.add_argument("--max-epochs", type=int, default=40)
    parser.add_argument("--keys", default=",".join(SWEEPS),
                        help="comma-separated subset of sweep keys")
    parser.add_argument("--parallel", type=int, default=1)
    args = parser.parse_args()

    out = Path(args.out)
    data = out / "data"
    if not (data / "manifest.json").exists():
        rc = cli_main(["gen-synthetic", "--out", str(data), "--classes", "3",
                       "--entities", "8", "--instances", "24",
                       "--bags-per-class", "24", "--separation", "5.0",
                       "--dim", "64", "--seed", "17"])
        if rc != 0:
            return rc

    cfg_path = out / "base.cfg"
    cfg_path.write_text(
        f"manifest = {data}/manifest.json\n"
        f"embedding_bundle = {data}/embeddings/index.json\n"
        f"out_dir = {out}/runs\n"
        f"seed = 7\nshots = 8\nrepeats = {args.repeats}\n"
        f"max_epochs = {args.max_epochs}\nn_neighbors = 5\n")

    for key in [k.strip() for k in args.keys.split(",") if k.strip()]:
        if key not in SWEEPS:
            print(f"unknown sweep key {key!r}", file=sys.stderr)
            return 2
        rc = cli_main(["sweep", "--config", str(cfg_path), "--key", key,
                       "--values", SWEEPS[key], "--parallel", str(args.parallel)])
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
