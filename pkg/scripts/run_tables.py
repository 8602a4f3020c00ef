"""Run the simulation presets over their ratio grids and print an error table.

    python scripts/run_tables.py --reps 50 --out runs/tables
    python scripts/run_tables.py --preset ex2-gauss --ratio 3
"""
import argparse
from pathlib import Path

from pivotblend.simharness import PRESET_NAMES, _PRESETS, preset, run_experiment, write_run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=PRESET_NAMES, action="append",
                    help="preset to run (repeatable; default all)")
    ap.add_argument("--ratio", type=float, action="append", help="scale ratio (default: the preset's grid)")
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/tables"))
    args = ap.parse_args(argv)

    print(f"{'preset':<12s} {'ratio':>5s} {'Err(b)':>8s} {'Err(s)':>8s} {'Err(n)':>8s} {'Err(m)':>8s} "
          f"{'failed':>6s} {'sec/rep':>8s}")
    for name in args.preset or PRESET_NAMES:
        for ratio in args.ratio or sorted(_PRESETS[name][7]):
            res = run_experiment(preset(name, ratio=ratio, reps=args.reps, seed=args.seed))
            write_run(res, args.out / f"{name}-r{ratio:g}")
            m = res.metrics
            print(f"{name:<12s} {ratio:5.1f} {m.err_beta:8.4f} {m.err_sigma:8.4f} {m.err_nu:8.4f} {m.err_m:8.4f} "
                  f"{m.n_failed:6d} {m.mean_runtime:8.3f}", flush=True)


if __name__ == "__main__":
    main()
