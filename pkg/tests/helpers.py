"""Small hand-built tasks shared by the test modules."""
import numpy as np

from metato.fem import BoundaryConditions, Discretization
from metato.taskgen import Task, validate_annotate


def mbb_task(nelx=60, nely=20, vstar=0.5):
    """Half MBB beam: symmetry rollers on the left edge, roller at the bottom right, load top left."""
    d = Discretization(nelx, nely)
    left = [d.node(0, iy) for iy in range(nely + 1)]
    fixed = [2 * n for n in left] + [2 * d.node(nelx, nely) + 1]
    bc = BoundaryConditions.from_point_loads(fixed, [(d.node(0, 0), 1.0, -np.pi / 2)])
    return validate_annotate(Task(d, bc, vstar, task_id="mbb"))


def cantilever_task(nelx=20, nely=20, vstar=0.4, angle=-np.pi / 2):
    d = Discretization(nelx, nely)
    left = [d.node(0, iy) for iy in range(nely + 1)]
    fixed = np.concatenate([[2 * n, 2 * n + 1] for n in left])
    bc = BoundaryConditions.from_point_loads(fixed, [(d.node(nelx, nely // 2), 1.0, angle)])
    return validate_annotate(Task(d, bc, vstar, task_id=f"cantilever-{nelx}x{nely}"))
