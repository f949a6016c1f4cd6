"""Run every config in scripts/configs (or the ones named) and write JSON + CSV results."""
import argparse
import pathlib

from cdilab.harness import ExperimentConfig, run_experiment

HERE = pathlib.Path(__file__).parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", help="config stems, default all")
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted((HERE / "configs").glob("*.cfg"))
    if args.names:
        paths = [p for p in paths if p.stem in args.names]
    for path in paths:
        res = run_experiment(ExperimentConfig.from_file(path), workers=args.workers)
        res.save(out / f"{path.stem}.json")
        (out / f"{path.stem}.csv").write_text(res.to_csv())
        summary = ", ".join(
            f"t={row['t']:g} ks={row['ks']:.4f}" if row["ks"] is not None else f"t={row['t']:g} mean={row['moments']['mean']:.4f}"
            for row in res.per_t
        )
        print(f"{path.stem}: {summary} ({res.meta['wall_time']:.1f}s)")


if __name__ == "__main__":
    main()
