#!/usr/bin/env python3
"""Regenerates the bundled synthetic tabular datasets in data/.

boston_style.csv: 506 rows, 13 inputs + target, with the column names and
rough marginal ranges of the Boston housing data and a smooth nonlinear,
heteroscedastic target.

energy_style.csv: 768 rows, 8 inputs + target, a full factorial design over
the building-shape inputs of the energy-efficiency data with a nearly
deterministic target.
"""

import argparse
import itertools
from pathlib import Path

import numpy as np


def boston_style(rng):
    n = 506
    urban = rng.normal(size=n)
    wealth = rng.normal(size=n)
    crim = np.exp(0.9 * urban - 0.6 * wealth + rng.normal(scale=0.8, size=n)) * 0.8
    zn = np.where(rng.uniform(size=n) < 0.27, rng.choice([12.5, 20, 25, 40, 80], size=n), 0.0)
    indus = np.clip(11 + 5 * urban - 2 * wealth + rng.normal(scale=2.5, size=n), 0.5, 28)
    chas = (rng.uniform(size=n) < 0.07).astype(float)
    nox = np.clip(0.55 + 0.08 * urban + 0.03 * indus / 10 + rng.normal(scale=0.04, size=n), 0.38, 0.87)
    rm = np.clip(6.28 + 0.5 * wealth + rng.normal(scale=0.45, size=n), 3.6, 8.8)
    age = np.clip(68 + 20 * urban - 6 * wealth + rng.normal(scale=15, size=n), 3, 100)
    dis = np.clip(np.exp(1.2 - 0.45 * urban + rng.normal(scale=0.25, size=n)), 1.1, 12)
    rad = np.where(urban + rng.normal(scale=0.4, size=n) > 1.0, 24.0, rng.choice([1, 2, 3, 4, 5, 6, 7, 8], size=n))
    tax = np.clip(400 + 90 * urban + 8 * rad + rng.normal(scale=50, size=n), 187, 711)
    ptratio = np.clip(18.5 + 1.2 * urban - 0.8 * wealth + rng.normal(scale=1.2, size=n), 12.6, 22)
    b = np.clip(396.9 - np.abs(rng.normal(scale=40, size=n)) * (1 + np.maximum(urban, 0)), 0.3, 396.9)
    lstat = np.clip(np.exp(2.4 - 0.45 * wealth + 0.2 * urban + rng.normal(scale=0.25, size=n)), 1.7, 38)
    medv = (
        22
        + 6.5 * (rm - 6.28)
        + 2.2 * np.maximum(rm - 7.0, 0) ** 2
        - 9.0 * np.log(lstat / 11.0)
        - 0.9 * (ptratio - 18.5)
        - 1.4 * np.log1p(crim)
        - 12 * (nox - 0.55)
        + 2.5 * chas
        - 0.8 * (dis - 3.5) * (dis < 3.5)
    )
    medv = medv + rng.normal(size=n) * (1.8 + 0.08 * np.abs(medv - 22))
    medv = np.clip(medv, 5, 50)
    cols = {
        "CRIM": crim, "ZN": zn, "INDUS": indus, "CHAS": chas, "NOX": nox, "RM": rm, "AGE": age,
        "DIS": dis, "RAD": rad, "TAX": tax, "PTRATIO": ptratio, "B": b, "LSTAT": lstat, "MEDV": medv,
    }
    return cols


def energy_style(rng):
    shapes = [
        (0.98, 514.5, 294.0, 110.25, 7.0), (0.90, 563.5, 318.5, 122.5, 7.0), (0.86, 588.0, 294.0, 147.0, 7.0),
        (0.82, 612.5, 318.5, 147.0, 7.0), (0.79, 637.0, 343.0, 147.0, 7.0), (0.76, 661.5, 416.5, 122.5, 7.0),
        (0.74, 686.0, 245.0, 220.5, 3.5), (0.71, 710.5, 269.5, 220.5, 3.5), (0.69, 735.0, 294.0, 220.5, 3.5),
        (0.66, 759.5, 318.5, 220.5, 3.5), (0.64, 784.0, 343.0, 220.5, 3.5), (0.62, 808.5, 367.5, 220.5, 3.5),
    ]
    glazing = [(0.0, 0)] + [(g, d) for g in (0.10, 0.25, 0.40) for d in range(1, 6)]
    rows = []
    for (rc, sa, wa, ra, oh), o, (ga, gd) in itertools.product(shapes, range(2, 6), glazing):
        rows.append((rc, sa, wa, ra, oh, o, ga, gd))
    x = np.array(rows, dtype=float)
    rc, sa, wa, ra, oh, o, ga, gd = x.T
    y = (
        -14
        + 4.2 * oh
        + 0.03 * wa
        - 0.02 * ra
        + 22 * ga
        + 15 * rc * (oh > 5)
        + 0.4 * np.cos(np.pi * o / 2)
        + 0.3 * (gd == 1)
        + rng.normal(scale=0.5, size=len(x))
    )
    names = ["X1", "X2", "X3", "X4", "X5", "X6", "X7", "X8"]
    cols = {k: x[:, i] for i, k in enumerate(names)}
    cols["Y1"] = y
    return cols


def write(path, cols):
    names = list(cols)
    data = np.column_stack([cols[k] for k in names])
    with open(path, "w") as f:
        f.write(",".join(names) + "\n")
        for row in data:
            f.write(",".join(f"{v:.6g}" for v in row) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    ap.add_argument("--seed", type=int, default=20210301)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    write(args.out / "boston_style.csv", boston_style(np.random.default_rng(args.seed)))
    write(args.out / "energy_style.csv", energy_style(np.random.default_rng(args.seed + 1)))


if __name__ == "__main__":
    main()
