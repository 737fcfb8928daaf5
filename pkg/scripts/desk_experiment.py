"""Desk-scale comparison of initializations on 20x20 tasks, plus an 80x80 transfer run.

Meta-trains on 1000 generated tasks, pretrains on 100 of them, then optimizes
32 held-out tasks from each initialization and prints iteration statistics.
Takes roughly 20 minutes on one core.

    python scripts/desk_experiment.py [--out desk-results]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from metato.evaluation import ResultRow, ResultsTable, performance_profile, save_profiles
from metato.fem import Discretization
from metato.meta import MetaConfig, identity_loss, pretrain_identity, reptile_train
from metato.network import NetworkConfig, init_standard, save_checkpoint
from metato.optim import neural_optimize
from metato.taskgen import build_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="desk-results")
    ap.add_argument("--train-tasks", type=int, default=1000)
    ap.add_argument("--test-tasks", type=int, default=32)
    ap.add_argument("--iterations", type=int, default=200)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    disc = Discretization(20, 20)
    train = build_dataset("train", args.train_tasks, 1, disc)
    test = build_dataset("in-dist", args.test_tasks, 3, disc)
    held = build_dataset("validation", 20, 2, disc)
    init = init_standard(NetworkConfig(omega0=60.0), 0)

    t0 = time.perf_counter()
    meta_cfg = MetaConfig(meta_iterations=args.iterations, validation_interval=0, seed=0)
    meta = reptile_train(train.tasks, meta_cfg, init).final
    print(f"meta-training: {time.perf_counter() - t0:.0f} s")
    save_checkpoint(meta, out / "meta.ckpt")

    t0 = time.perf_counter()
    pre, history = pretrain_identity(train.tasks[:100], init, 100, 1e-5, 0)
    print(f"pretraining: {time.perf_counter() - t0:.0f} s, train MSE {history[0]:.3e} -> {history[-1]:.3e}, "
          f"held-out MSE {identity_loss(pre, held.tasks):.3e}")
    save_checkpoint(pre, out / "pretrained.ckpt")

    inits = {
        "meta": meta,
        "standard": init_standard(NetworkConfig(omega0=30.0), 0),
        "standard-omega60": init,
        "pretrained": pre,
    }
    rows = []
    for name, params in inits.items():
        its = []
        for task in test.tasks:
            rec, _ = neural_optimize(task, params)
            its.append(rec.iterations)
            rows.append(ResultRow(task.task_id, name, rec.iterations, rec.stop_reason, rec.c_cont, rec.c_thresh))
        print(f"{name:>18}: median {np.median(its):6.1f}  mean {np.mean(its):6.1f} iterations")
    table = ResultsTable(rows).sorted([t.task_id for t in test.tasks], list(inits))
    table.save(out / "results.csv")
    save_profiles(performance_profile(table, "iterations"), out / "profile.csv")

    fine = build_dataset("cross-res", 4, 11, Discretization(80, 80))
    transfer = []
    for task in fine.tasks:
        rec, _ = neural_optimize(task, meta)
        transfer.append({"task": task.task_id, "iterations": rec.iterations, "stop": rec.stop_reason,
                         "c_cont": rec.c_cont, "max_volume_error": float(np.max(np.abs(np.subtract(rec.volumes, task.vstar))))})
    print(json.dumps(transfer, indent=1))


if __name__ == "__main__":
    main()
