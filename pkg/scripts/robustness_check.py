"""Estimate C(delta) as the 99th percentile of the modulus sup, then report
v |fbar(fbar_inv(x/v) +- C t^delta) - x/v| along a t ladder."""
import argparse

import numpy as np

from cdilab.evt import parse_tail, robustness_gap
from cdilab.harness import ExperimentConfig, run_experiment
from cdilab.measure import parse_measure
from cdilab.speed import speed_v


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--measure", default="kingman")
    ap.add_argument("--tail", default="pareto:1,2")
    ap.add_argument("--t", type=float, default=0.02, help="horizon of the modulus run")
    ap.add_argument("--delta", type=float, default=0.4)
    ap.add_argument("--replicates", type=int, default=100, help="at least 100")
    ap.add_argument("--x", type=float, default=1.0)
    args = ap.parse_args()
    cfg = ExperimentConfig(
        args.measure, "normal", (args.t,), "modulus", replicates=args.replicates, delta=args.delta
    )
    c_delta = run_experiment(cfg).per_t[0]["moments"]["quantiles"]["99"]
    m = parse_measure(args.measure)
    ts = args.t * 2.0 ** -np.arange(0, 12, 2)
    vs = np.array([speed_v(m, t) for t in ts])
    gap = robustness_gap(parse_tail(args.tail), ts, vs, args.x, c_delta, args.delta)
    print(f"C(delta={args.delta}) ~ {c_delta:.4f}")
    print("t,v,gap")
    for t, v, g in zip(ts, vs, gap):
        print(f"{t:.4e},{v:.4e},{g:.4e}")


if __name__ == "__main__":
    main()
