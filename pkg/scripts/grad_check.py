"""Finite-difference check of every analytic gradient term.

    python scripts/grad_check.py [--configs 5] [--terms pose_rgb density]
"""
import argparse
import time

from avopt.gradcheck import TERMS, GradCheckConfig, run_grad_check


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--configs", type=int, default=GradCheckConfig.configs)
    ap.add_argument("--terms", nargs="+", default=list(TERMS), choices=list(TERMS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t = time.perf_counter()
    reports = run_grad_check(GradCheckConfig(configs=args.configs, terms=args.terms, seed=args.seed))
    for term, r in reports.items():
        print(f"{term:>14s}  max rel err {r.max_error:.2e}")
    print(f"{time.perf_counter() - t:.0f} s")


if __name__ == "__main__":
    main()
