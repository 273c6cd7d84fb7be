"""Loss-term ablations, alternating vs joint, and the reprojection baseline on contact scenes.

    python scripts/ablations.py --seeds 0-9
"""
import argparse
import json
import logging

import numpy as np

from avopt.experiments import alternating_vs_joint, contact_avatars, contact_case, recover, reprojection_case
from avopt.poseopt import LossWeights, PoseConfig

VARIANTS = {"full": LossWeights(), "no_rgb": LossWeights(rgb=0.0), "no_mask": LossWeights(alpha=0.0),
            "no_pa": LossWeights(pa=0.0)}


def seed_range(text):
    a, _, b = text.partition("-")
    return list(range(int(a), int(b or a) + 1))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-9"))
    ap.add_argument("--noise-px", type=float, default=3.0)
    ap.add_argument("--skip-alternating", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    fields = contact_avatars()
    table = {k: [] for k in VARIANTS}
    table.update(alternating=[], joint=[], reprojection=[])
    for s in args.seeds:
        synthetic, gt, init = contact_case(s)
        for name, w in VARIANTS.items():
            r = recover(synthetic, gt, init, fields, PoseConfig(weights=w))
            table[name].append(r["final_mpjpe"])
        if not args.skip_alternating:
            r = alternating_vs_joint(synthetic, gt, init, fields, seed=s)
            table["alternating"].append(r["alternating"])
            table["joint"].append(r["joint"])
        table["reprojection"].append(reprojection_case(synthetic, init, args.noise_px, s))
        print(json.dumps({"seed": s, **{k: v[-1] for k, v in table.items() if v}}), flush=True)
    for k, v in table.items():
        if v:
            print(f"{k:>13s}  mean MPJPE {np.mean(v):7.2f} mm")


if __name__ == "__main__":
    main()
