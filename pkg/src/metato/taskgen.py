"""Pseudorandom compliance tasks: generation, validation/annotation and dataset files.

Dataset file layout (all integers and floats little-endian)::

    8 bytes   magic b"MNTOTSK1"
    u32       manifest length M
    M bytes   manifest, UTF-8 JSON with sorted keys
    per task, in manifest order:
        u32 id length, id bytes (UTF-8)
        u32 nelx, u32 nely
        f64 vstar, f64 c_ref
        u32 n_fixed, n_fixed x i64 fixed DOFs
        u32 n_loads, n_loads x i64 load DOFs, n_loads x f64 load values
        nelx*nely x f64 processed strain energy
    32 bytes  sha256 of everything above
"""
from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import struct
from collections import Counter, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import count
from pathlib import Path

import numpy as np

from .fem import (
    BoundaryConditions,
    Discretization,
    MaterialModel,
    SingularSystemError,
    SolverNonConvergenceError,
    assemble_solve,
)
from .filters import DegenerateFieldError, preprocess_strain_energy
from .network import ChecksumError

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MNTOTSK1"
FORMAT_VERSION = 1
REGIMES = ("train", "validation", "in-dist", "out-of-dist", "cross-res")
# fixed per-regime keys so each regime draws from its own seed substream
_REGIME_KEYS = {name: i + 1 for i, name in enumerate(REGIMES)}

VSTAR_RANGE = (0.1, 0.5)
BOUNDARY_WEIGHT = 4.0
MAX_REFERENCE_COMPLIANCE = 1e8
SEGMENT_FRACTION = (0.1, 0.5)


class RejectionReason(str, enum.Enum):
    SINGULAR = "singular"
    NO_LOAD = "no-load"
    NON_FINITE = "non-finite"
    EXCESSIVE_COMPLIANCE = "excessive-compliance"
    DEGENERATE_ENERGY = "degenerate-energy"


class TaskRejected(Exception):
    def __init__(self, reason: RejectionReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


class GenerationStallError(RuntimeError):
    pass


@dataclass(eq=False)
class Task:
    disc: Discretization
    bc: BoundaryConditions
    vstar: float
    task_id: str = ""
    regime: str = "train"
    energy: np.ndarray | None = None
    c_ref: float | None = None

    @property
    def annotated(self) -> bool:
        return self.energy is not None and self.c_ref is not None


def _task_rng(seed: int, regime: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_REGIME_KEYS[regime], index)))


def _load_node_weights(disc: Discretization) -> np.ndarray:
    w = np.ones(disc.n_nodes)
    w[disc.boundary_nodes] = BOUNDARY_WEIGHT
    return w / w.sum()


def _both_dofs(nodes) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    return np.sort(np.concatenate([2 * nodes, 2 * nodes + 1]))


def generate_point_task(rng: np.random.Generator, disc: Discretization) -> Task:
    """1-3 unit point loads (boundary-biased nodes, uniform angle), 1-4 boundary supports."""
    n_loads = int(rng.integers(1, 4))
    load_nodes = rng.choice(disc.n_nodes, size=n_loads, p=_load_node_weights(disc))
    angles = rng.uniform(0.0, 2 * np.pi, size=n_loads)
    n_supports = int(rng.integers(1, 5))
    supports = rng.choice(disc.boundary_nodes, size=n_supports, replace=False)
    vstar = float(rng.uniform(*VSTAR_RANGE))
    bc = BoundaryConditions.from_point_loads(
        _both_dofs(supports), [(int(n), 1.0, float(a)) for n, a in zip(load_nodes, angles)]
    )
    return Task(disc, bc, vstar)


def _segment_length(rng: np.random.Generator, side: int) -> int:
    lo = max(1, int(np.ceil(SEGMENT_FRACTION[0] * side)))
    hi = max(lo, int(np.floor(SEGMENT_FRACTION[1] * side)))
    return int(rng.integers(lo, hi + 1))


def _line_nodes(disc: Discretization, horizontal: bool, offset: int, start: int, length: int) -> list[int]:
    if horizontal:
        return [disc.node(start + k, offset) for k in range(length + 1)]
    return [disc.node(offset, start + k) for k in range(length + 1)]


def generate_line_task(rng: np.random.Generator, disc: Discretization) -> Task:
    """Supports on a boundary segment, unit total load spread over a grid-aligned segment."""
    side = int(rng.integers(4))  # 0 top, 1 bottom, 2 left, 3 right
    horizontal = side < 2
    span = disc.nelx if horizontal else disc.nely
    length = _segment_length(rng, span)
    start = int(rng.integers(0, span - length + 1))
    offset = {0: 0, 1: disc.nely, 2: 0, 3: disc.nelx}[side]
    supports = _line_nodes(disc, horizontal, offset, start, length)

    horizontal = bool(rng.integers(2))
    span, across = (disc.nelx, disc.nely) if horizontal else (disc.nely, disc.nelx)
    length = _segment_length(rng, span)
    start = int(rng.integers(0, span - length + 1))
    offset = int(rng.integers(0, across + 1))
    loaded = _line_nodes(disc, horizontal, offset, start, length)
    angle = float(rng.uniform(0.0, 2 * np.pi))
    share = 1.0 / len(loaded)

    vstar = float(rng.uniform(*VSTAR_RANGE))
    bc = BoundaryConditions.from_point_loads(_both_dofs(supports), [(n, share, angle) for n in loaded])
    return Task(disc, bc, vstar)


def validate_annotate(task: Task, mat: MaterialModel | None = None, solver: str = "auto") -> Task:
    """Solve the uniform design; attach processed energy and c_ref or raise TaskRejected."""
    mat = mat or MaterialModel()
    bc = task.bc
    bc.check(task.disc)
    free_load = ~np.isin(bc.load_dofs, bc.fixed_dofs) & (bc.load_values != 0.0)
    if not free_load.any():
        raise TaskRejected(RejectionReason.NO_LOAD, "all loads act on fixed DOFs")
    try:
        state = assemble_solve(task.disc, bc, mat, np.full(task.disc.n_elem, task.vstar), solver=solver)
    except (SingularSystemError, SolverNonConvergenceError) as exc:
        raise TaskRejected(RejectionReason.SINGULAR, str(exc)) from exc
    c = state.compliance
    if not np.isfinite(c) or c <= 0:
        raise TaskRejected(RejectionReason.NON_FINITE, f"compliance {c}")
    if c > MAX_REFERENCE_COMPLIANCE:
        raise TaskRejected(RejectionReason.EXCESSIVE_COMPLIANCE, f"compliance {c:.3g}")
    try:
        energy = preprocess_strain_energy(state.energies)
    except DegenerateFieldError as exc:
        raise TaskRejected(RejectionReason.DEGENERATE_ENERGY, str(exc)) from exc
    return replace(task, energy=energy, c_ref=c)


@dataclass(eq=False)
class Dataset:
    tasks: list[Task]
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def by_id(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


def _candidate(args) -> Task | RejectionReason:
    regime, seed, index, nelx, nely, mat = args
    disc = Discretization(nelx, nely)
    rng = _task_rng(seed, regime, index)
    make = generate_line_task if regime == "out-of-dist" else generate_point_task
    task = make(rng, disc)
    task = replace(task, task_id=f"{regime}:{seed}:{index}", regime=regime)
    try:
        return validate_annotate(task, mat)
    except TaskRejected as exc:
        return exc.reason


def build_dataset(
    regime: str,
    n: int,
    seed: int,
    disc: Discretization,
    mat: MaterialModel | None = None,
    jobs: int = 1,
    stall_window: int = 1000,
    stall_rate: float = 0.99,
) -> Dataset:
    """Draw candidates in index order until ``n`` validated tasks are collected.

    Candidate ``i`` depends only on (seed, regime, i), so the result is the
    same for any ``jobs``.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")
    mat = mat or MaterialModel()
    tasks: list[Task] = []
    rejections: Counter = Counter()
    recent: deque = deque(maxlen=stall_window)
    drawn = 0
    chunk = max(8 * jobs, 16)
    executor = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        indices = count()
        while len(tasks) < n:
            batch = [(regime, seed, next(indices), disc.nelx, disc.nely, mat) for _ in range(chunk)]
            results = executor.map(_candidate, batch) if executor else map(_candidate, batch)
            for result in results:
                drawn += 1
                ok = isinstance(result, Task)
                recent.append(ok)
                if ok:
                    tasks.append(result)
                    if len(tasks) == n:
                        break
                else:
                    rejections[result.value] += 1
                if len(recent) == stall_window and recent.count(False) > stall_rate * stall_window:
                    raise GenerationStallError(
                        f"{recent.count(False)} of the last {stall_window} candidates were rejected"
                    )
    finally:
        if executor:
            executor.shutdown()
    log.info("built %s dataset: %d tasks from %d candidates", regime, n, drawn)
    manifest = {
        "format_version": FORMAT_VERSION,
        "regime": regime,
        "seed": seed,
        "nelx": disc.nelx,
        "nely": disc.nely,
        "n": n,
        "candidates": drawn,
        "rejections": dict(sorted(rejections.items())),
        "material": {"E0": mat.E0, "Emin": mat.Emin, "nu": mat.nu, "penal": mat.penal},
    }
    return Dataset(tasks, manifest)


def _pack_task(t: Task) -> bytes:
    buf = io.BytesIO()
    tid = t.task_id.encode()
    buf.write(struct.pack("<I", len(tid)) + tid)
    buf.write(struct.pack("<IIdd", t.disc.nelx, t.disc.nely, t.vstar, t.c_ref))
    buf.write(struct.pack("<I", len(t.bc.fixed_dofs)) + t.bc.fixed_dofs.astype("<i8").tobytes())
    buf.write(struct.pack("<I", len(t.bc.load_dofs)))
    buf.write(t.bc.load_dofs.astype("<i8").tobytes() + t.bc.load_values.astype("<f8").tobytes())
    buf.write(np.asarray(t.energy).astype("<f8").tobytes())
    return buf.getvalue()


def dataset_bytes(ds: Dataset) -> bytes:
    if not all(t.annotated for t in ds.tasks):
        raise ValueError("only annotated tasks can be serialized")
    manifest = json.dumps(ds.manifest, sort_keys=True, separators=(",", ":")).encode()
    body = DATASET_MAGIC + struct.pack("<I", len(manifest)) + manifest
    body += b"".join(_pack_task(t) for t in ds.tasks)
    return body + hashlib.sha256(body).digest()


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def _read(fmt: str, raw: bytes, pos: int):
    size = struct.calcsize(fmt)
    return struct.unpack_from(fmt, raw, pos), pos + size


def _array(raw: bytes, pos: int, n: int, dtype: str):
    size = n * np.dtype(dtype).itemsize
    return np.frombuffer(raw, dtype=dtype, count=n, offset=pos).astype(dtype[1:]), pos + size


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(DATASET_MAGIC):
        raise ValueError(f"{path} is not a task dataset")
    body = raw[:-32]
    if hashlib.sha256(body).digest() != raw[-32:]:
        raise ChecksumError(f"checksum mismatch in {path}")
    (m,), pos = _read("<I", body, len(DATASET_MAGIC))
    manifest = json.loads(body[pos:pos + m])
    pos += m
    regime = manifest["regime"]
    tasks = []
    while pos < len(body):
        (k,), pos = _read("<I", body, pos)
        tid = body[pos:pos + k].decode()
        pos += k
        (nelx, nely, vstar, c_ref), pos = _read("<IIdd", body, pos)
        (nf,), pos = _read("<I", body, pos)
        fixed, pos = _array(body, pos, nf, "<i8")
        (nl,), pos = _read("<I", body, pos)
        ldofs, pos = _array(body, pos, nl, "<i8")
        lvals, pos = _array(body, pos, nl, "<f8")
        disc = Discretization(nelx, nely)
        energy, pos = _array(body, pos, disc.n_elem, "<f8")
        tasks.append(Task(disc, BoundaryConditions(fixed, ldofs, lvals), vstar, tid, regime, energy, c_ref))
    if len(tasks) != manifest["n"]:
        raise ValueError(f"manifest promises {manifest['n']} tasks, file holds {len(tasks)}")
    return Dataset(tasks, manifest)


def export_text(ds: Dataset) -> str:
    """Lossless JSON rendering (floats use repr round-tripping)."""
    records = [
        {
            "id": t.task_id,
            "nelx": t.disc.nelx,
            "nely": t.disc.nely,
            "vstar": t.vstar,
            "c_ref": t.c_ref,
            "fixed_dofs": t.bc.fixed_dofs.tolist(),
            "loads": [[int(d), float(v)] for d, v in zip(t.bc.load_dofs, t.bc.load_values)],
            "energy": np.asarray(t.energy).tolist(),
        }
        for t in ds.tasks
    ]
    return json.dumps({"manifest": ds.manifest, "tasks": records}, sort_keys=True, indent=1)


def import_text(text: str) -> Dataset:
    doc = json.loads(text)
    regime = doc["manifest"]["regime"]
    tasks = []
    for r in doc["tasks"]:
        loads = np.asarray(r["loads"], dtype=float).reshape(-1, 2)
        bc = BoundaryConditions(np.asarray(r["fixed_dofs"]), loads[:, 0].astype(np.int64), loads[:, 1])
        tasks.append(
            Task(Discretization(r["nelx"], r["nely"]), bc, r["vstar"], r["id"], regime,
                 np.asarray(r["energy"], dtype=float), r["c_ref"])
        )
    return Dataset(tasks, doc["manifest"])
