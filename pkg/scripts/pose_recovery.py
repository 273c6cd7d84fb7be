"""Pose recovery on perturbed contact scenes with the fitted contact avatars.

    python scripts/pose_recovery.py --seeds 0-19 [--iterations 150] [--pa 0.01]
"""
import argparse
import json
import logging

from avopt.experiments import contact_avatars, contact_case, recover
from avopt.poseopt import LossWeights, PoseConfig


def seed_range(text):
    a, _, b = text.partition("-")
    return list(range(int(a), int(b or a) + 1))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-19"))
    ap.add_argument("--iterations", type=int, default=PoseConfig.iterations)
    ap.add_argument("--lr", type=float, default=PoseConfig.lr)
    ap.add_argument("--rgb", type=float, default=LossWeights.rgb)
    ap.add_argument("--alpha", type=float, default=LossWeights.alpha)
    ap.add_argument("--pa", type=float, default=LossWeights.pa)
    ap.add_argument("--out", default=None, help="JSON lines output")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    fields = contact_avatars()
    cfg = PoseConfig(iterations=args.iterations, lr=args.lr,
                     weights=LossWeights(rgb=args.rgb, alpha=args.alpha, pa=args.pa))
    for s in args.seeds:
        synthetic, gt, init = contact_case(s)
        r = recover(synthetic, gt, init, fields, cfg)
        r.pop("poses")
        r["seed"] = s
        r["ratio"] = r["final_mpjpe"] / r["initial_mpjpe"]
        line = json.dumps(r)
        print(line, flush=True)
        if args.out:
            with open(args.out, "a") as fh:
                fh.write(line + "\n")


if __name__ == "__main__":
    main()
