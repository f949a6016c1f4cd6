"""Compare root counts of simulated genealogies with block counts of the jump chain."""
import argparse

import numpy as np
from scipy import stats

from cdilab.coalescent import block_count_at, simulate_block_count
from cdilab.harness import seed_stream
from cdilab.lookdown import simulate_genealogy
from cdilab.measure import parse_measure


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--measure", default="kingman")
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--t", type=float, default=0.1)
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    m = parse_measure(args.measure)
    roots = np.array(
        [simulate_genealogy(m, args.n, args.t, seed_stream(args.seed, r, "genealogy")).root_count for r in range(args.reps)]
    )
    counts = np.array(
        [block_count_at(simulate_block_count(m, args.n, args.t, seed_stream(args.seed, r, "blocks")), args.t)
         for r in range(args.reps)]
    )
    print(f"mean roots {roots.mean():.3f}  mean N(t) {counts.mean():.3f}")
    print(f"KS two-sample p {stats.ks_2samp(roots, counts).pvalue:.4f}")


if __name__ == "__main__":
    main()
