"""Misfit against time shift of a 6 Hz Ricker for every objective.

Prints the number of interior local minima per curve and the value at zero
shift; --csv writes the normalised curves.
"""
import argparse
import csv

import numpy as np

from fwikit.objectives import ObjectiveConfig
from fwikit.scan import DEFAULT_CONFIGS, convexity_scan, interior_minima, normalise


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--f0", type=float, default=6.0)
    ap.add_argument("--step", type=float, default=0.01)
    ap.add_argument("--gamma", type=float, default=0.0, help="soft-DTW smoothing")
    ap.add_argument("--csv")
    args = ap.parse_args()
    configs = dict(DEFAULT_CONFIGS)
    configs["SoftDTW"] = ObjectiveConfig("SoftDTW", softdtw_gamma=args.gamma)
    shifts, curves = convexity_scan(args.f0, 0.5, args.step, configs=configs)
    centre = int(np.argmin(np.abs(shifts)))
    print(f"{'objective':10s} {'minima':>6s} {'J(0)':>10s} {'argmin':>7s}")
    for kind, v in curves.items():
        print(f"{kind:10s} {len(interior_minima(v)):6d} {v[centre]:10.2e} "
              f"{shifts[int(np.argmin(v))]:7.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["shift"] + list(curves))
            norm = {k: normalise(v) for k, v in curves.items()}
            for i, s in enumerate(shifts):
                w.writerow([s] + [norm[k][i] for k in curves])


if __name__ == "__main__":
    main()
