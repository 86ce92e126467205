#!/usr/bin/env python3
"""Pretrain the desk maze base model and compare (c=1, h=2.5) against
(c=0, h=7.5) fine-tuning at matched compute.

    python3 scripts/maze_ablation.py --out runs/ablation --seed 0
"""
import argparse
import json
import logging
import time

from tiltmatch.experiments import maze_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON run config shared by every stage")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.time()
    results = maze_ablation(args.out, args.seed, args.config)
    print(json.dumps(results, indent=2))
    print(f"total {time.time() - t0:.0f} s; table in {args.out}/ablation.csv")


if __name__ == "__main__":
    main()
