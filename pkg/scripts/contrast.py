#!/usr/bin/env python3
"""Relative contrast of L1 and L2 distances as dimension grows."""
import argparse

from fedmm.vecmath import relative_contrast


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", default="10,100,1000,10000")
    ap.add_argument("--points", type=int, default=100)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rep = relative_contrast([int(d) for d in args.dims.split(",")], args.points, args.trials, args.seed)
    print(f"{'d':>7s} {'L1':>9s} {'L2':>9s} {'ratio/sqrt(d)':>14s}")
    for row in zip(rep.dims, rep.l1_contrast, rep.l2_contrast, rep.m_over_u_rootd):
        print("{:7d} {:9.4f} {:9.4f} {:14.4f}".format(*row))


if __name__ == "__main__":
    main()
