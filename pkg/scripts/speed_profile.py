"""Tabulate v(t) for a measure and report the local log-log slope."""
import argparse

import numpy as np

from cdilab.measure import parse_measure
from cdilab.speed import build_speed_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--measure", default="beta:1.5")
    ap.add_argument("--t-min", type=float, default=1e-4)
    ap.add_argument("--t-max", type=float, default=1.0)
    ap.add_argument("--nodes", type=int, default=33, help="at least 16")
    args = ap.parse_args()
    table = build_speed_table(parse_measure(args.measure), args.t_min, args.t_max, args.nodes)
    lt, lv = np.log(table.t_grid), np.log(table.v_values)
    slope = np.gradient(lv, lt)
    print("t,v,v*t^2,local_slope")
    for t, v, s in zip(table.t_grid, table.v_values, slope):
        print(f"{t:.4e},{v:.6e},{v * t * t:.6f},{s:.5f}")


if __name__ == "__main__":
    main()
