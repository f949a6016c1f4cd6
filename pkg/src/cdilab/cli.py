"""``cdi-lab`` command line entry point."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from cdilab.coalescent import simulate_block_count
from cdilab.errors import CDILabError, ConfigError, ConsistencyError
from cdilab.evt import parse_tail
from cdilab.harness import STATISTICS, ExperimentConfig, run_experiment, seed_stream
from cdilab.lookdown import (
    ancestor_max,
    attach_motion,
    dislocation,
    extremal_max,
    simulate_genealogy,
)
from cdilab.measure import lambda_bk, merge_size_distribution, parse_measure, total_rate
from cdilab.speed import build_speed_table, speed_v

EXIT_OK, EXIT_CONFIG, EXIT_CONSISTENCY = 0, 2, 3


def _emit(obj, out):
    text = json.dumps(obj, sort_keys=True, indent=1)
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        print(text)


def cmd_speed(args):
    m = parse_measure(args.measure)
    if args.t:
        rows = [{"t": t, "v": speed_v(m, t)} for t in args.t]
        _emit(rows, args.out)
        return
    if not args.table:
        raise ConfigError("give --t values or --table T_MIN T_MAX N")
    t_min, t_max, nodes = args.table
    table = build_speed_table(m, float(t_min), float(t_max), int(nodes))
    lines = ["t,v"] + [f"{float(t)!r},{float(v)!r}" for t, v in zip(table.t_grid, table.v_values)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")


def cmd_rates(args):
    m = parse_measure(args.measure)
    b = args.b
    _emit(
        {
            "b": b,
            "lambda_bk": {str(k): lambda_bk(m, b, k) for k in range(2, b + 1)},
            "total_rate": total_rate(m, b),
            "merge_size_distribution": merge_size_distribution(m, b).tolist(),
        },
        args.out,
    )


def cmd_simulate_n(args):
    m = parse_measure(args.measure)
    paths = [
        simulate_block_count(m, args.n0, args.t, seed_stream(args.seed, r, "blocks")).to_json()
        for r in range(args.reps)
    ]
    _emit(paths, args.out)


def cmd_genealogy(args):
    m = parse_measure(args.measure)
    family = parse_tail(args.tail)
    grid = args.t - args.t * 2.0 ** -np.arange(args.grid)
    rows = []
    for r in range(args.reps):
        forest = simulate_genealogy(m, args.n, args.t, seed_stream(args.seed, r, "genealogy"))
        sp = attach_motion(
            forest, family, args.dim, seed_stream(args.seed, r, "motion"),
            initial_seed=seed_stream(args.seed, r, "initial"),
        )
        if args.dim == 1:
            m_anc, m_hat = ancestor_max(sp), extremal_max(sp)
        else:
            m_anc = float(np.sqrt((sp.root_positions**2).sum(1)).max())
            m_hat = extremal_max(sp, "norm")
        rows.append(
            {
                "root_count": forest.root_count,
                "M": m_anc,
                "M_hat": m_hat,
                "dislocation_max": dislocation(sp, 0.0),
                "sup_ratio_delta": max(
                    dislocation(sp, s) / (args.t - s) ** args.delta for s in grid
                ),
            }
        )
    _emit(rows, args.out)


def _config_from_args(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        base = ExperimentConfig.from_file(args.config)
        raw = {k: v for k, v in vars(base).items()}
    inline = {
        "measure": args.measure,
        "tail": args.tail,
        "t_list": args.t_list,
        "statistic": args.statistic,
        "replicates": args.replicates,
        "master_seed": args.seed,
        "n": args.n,
        "dim": args.dim,
        "output": args.out,
    }
    raw.update({k: v for k, v in inline.items() if v is not None})
    return ExperimentConfig.from_mapping(raw)


def cmd_experiment(args):
    config = _config_from_args(args)
    result = run_experiment(config, workers=args.workers)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(result.to_csv())
    if not config.output:
        print(result.to_json())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdi-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("speed", help="speed function v(t)")
    s.add_argument("--measure", required=True)
    s.add_argument("--t", type=float, nargs="*")
    s.add_argument("--table", nargs=3, metavar=("T_MIN", "T_MAX", "N"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_speed)

    s = sub.add_parser("rates", help="merger rates at b blocks")
    s.add_argument("--measure", required=True)
    s.add_argument("--b", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rates)

    s = sub.add_parser("simulate-n", help="block-counting paths")
    s.add_argument("--measure", required=True)
    s.add_argument("--n0", type=int, required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate_n)

    s = sub.add_parser("genealogy", help="per-replicate forest statistics")
    s.add_argument("--measure", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--tail", default="normal")
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--delta", type=float, default=0.4)
    s.add_argument("--grid", type=int, default=12)
    s.add_argument("--out")
    s.set_defaults(func=cmd_genealogy)

    s = sub.add_parser("experiment", help="run a limit-law experiment")
    s.add_argument("--config", help="key=value file mirroring ExperimentConfig")
    s.add_argument("--measure")
    s.add_argument("--tail")
    s.add_argument("--t-list", dest="t_list")
    s.add_argument("--statistic", choices=STATISTICS)
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConsistencyError as exc:
        print(f"consistency error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (CDILabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
