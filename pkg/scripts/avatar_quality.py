"""Fit one avatar on a single-person clip and report held-out PSNR and mask IoU.

    python scripts/avatar_quality.py [--iterations 5000] [--held-out 7]
"""
import argparse
import json
import logging

from avopt.experiments import avatar_quality


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--held-out", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(json.dumps(avatar_quality(iterations=args.iterations, held_out=args.held_out, seed=args.seed), indent=2))


if __name__ == "__main__":
    main()
