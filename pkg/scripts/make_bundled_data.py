"""Regenerate the small CSVs shipped in src/pivotblend/data."""
from pathlib import Path

import numpy as np

from pivotblend._rng import make_rng
from pivotblend.densities import Gaussian, SkewSpec, SPDistribution
from pivotblend.simharness import gen_design, gen_twopart

OUT = Path(__file__).resolve().parents[1] / "src" / "pivotblend" / "data"


def write(path, header, M):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in M:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    X = gen_design(10, 2, 0.3, 11)
    eps = SPDistribution(Gaussian(), SkewSpec(0.5, 0.4, 1.0)).sample(10, seed=make_rng(12))
    y = 1.0 + X @ np.array([2.0, -1.0]) + eps
    write(OUT / "tiny.csv", ["x1", "x2", "y"], np.column_stack([X, y]))

    X, y, _ = gen_twopart(N=200, p=6, k=2, seed=5, coef=1.5)
    write(OUT / "semicontinuous.csv", [f"x{j + 1}" for j in range(6)] + ["y"], np.column_stack([X, y]))


if __name__ == "__main__":
    main()
