"""Plot per-class margin and scale trajectories from a training run.

    adams train --data d.bin --out runs/a --epochs 1 --trajectory-every-step
    python3 scripts/plot_trajectories.py runs/a/seed_0 --data d.bin --out traj.png

Without ``--classes`` the two seen classes with the largest and smallest
noise scale are drawn.  Needs matplotlib (``pip install -e .[plots]``).
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from adams.adaptive_params import read_trajectory_csv
from adams.data import load

PANELS = (("lambda_p", 2), ("lambda_n", 3), ("alpha", 4), ("beta", 5))


def pick_classes(data_path: str) -> list[int]:
    seen = [c for c in load(data_path).classes if not c.unseen]
    seen.sort(key=lambda c: c.noise_scale)
    return [seen[-1].class_id, seen[0].class_id]


def same_direction_fraction(rows: np.ndarray) -> float:
    """Share of moving steps where lambda_p and alpha change with the same sign."""
    d_lp, d_a = np.diff(rows[:, 2]), np.diff(rows[:, 4])
    moved = (d_lp != 0) | (d_a != 0)
    if not moved.any():
        return float("nan")
    return float(np.mean(np.sign(d_lp[moved]) == np.sign(d_a[moved])))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", help="run directory or trajectory.csv")
    ap.add_argument("--data", help="dataset file, used to choose classes by noise scale")
    ap.add_argument("--classes", type=int, nargs="+")
    ap.add_argument("--out", default="trajectories.png")
    args = ap.parse_args(argv)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = Path(args.run)
    rows = np.array(read_trajectory_csv(src / "trajectory.csv" if src.is_dir() else src))
    if args.classes:
        classes = args.classes
    elif args.data:
        classes = pick_classes(args.data)
    else:
        ap.error("give --classes or --data")

    fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
    for c in classes:
        sel = rows[rows[:, 1] == c]
        print(f"class {c}: {len(sel)} rows, lambda_p/alpha same direction "
              f"{100 * same_direction_fraction(sel):.0f}% of moving steps")
        for ax, (name, col) in zip(axes, PANELS):
            ax.plot(sel[:, 0], sel[:, col], label=f"class {c}")
    for ax, (name, _) in zip(axes, PANELS):
        ax.set_title(name)
        ax.set_xlabel("step")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
