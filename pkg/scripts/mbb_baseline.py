"""MBB half-beam (60x20, volume 0.5) with the MMA baseline; writes the final design as PGM.

    python scripts/mbb_baseline.py [--out mbb.pgm]
"""
import argparse

import numpy as np

from metato.fem import BoundaryConditions, Discretization
from metato.optim import standard_optimize
from metato.render import density_image, write_pgm
from metato.taskgen import Task, validate_annotate


def mbb_task(nelx: int = 60, nely: int = 20, vstar: float = 0.5) -> Task:
    """Half beam: rollers on the symmetry edge, roller at the bottom right, unit load down at the top left."""
    d = Discretization(nelx, nely)
    fixed = [2 * d.node(0, iy) for iy in range(nely + 1)] + [2 * d.node(nelx, nely) + 1]
    bc = BoundaryConditions.from_point_loads(fixed, [(d.node(0, 0), 1.0, -np.pi / 2)])
    return validate_annotate(Task(d, bc, vstar, task_id="mbb"))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="mbb.pgm")
    ap.add_argument("--nelx", type=int, default=60)
    ap.add_argument("--nely", type=int, default=20)
    args = ap.parse_args()
    task = mbb_task(args.nelx, args.nely)
    rec = standard_optimize(task)
    print(f"{rec.iterations} iterations ({rec.stop_reason}); compliance {rec.c_cont:.3f}, "
          f"thresholded {rec.c_thresh:.3f}")
    write_pgm(density_image(task.disc.to_grid(rec.binary)), args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
