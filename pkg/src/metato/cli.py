"""``metato`` command line: datasets, training, optimization, benchmarks, profiles, images.

Exit codes: 0 success, 2 configuration or input error, 3 task-generation
stall, 4 runtime failure. Outputs resolve against the output directory
(``--output-dir`` > ``$METATO_OUTPUT_DIR`` > config ``paths.output_dir``);
inputs resolve against the working directory. Every command writes
``<output>.manifest.json``, which ``metato replay`` re-executes.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig
from .evaluation import (
    Method,
    ResultsTable,
    performance_profile,
    run_benchmark,
    save_profiles,
    save_run_record,
    threshold_stats,
)
from .fem import Discretization
from .meta import evaluate_validation, identity_loss, pretrain_identity, reptile_train
from .network import init_standard, load_checkpoint, save_checkpoint
from .optim import network_initial_design, neural_optimize, standard_optimize
from .render import density_image, write_pgm
from .taskgen import GenerationStallError, build_dataset, export_text, load_dataset, save_dataset

log = logging.getLogger("metato")

OUTPUT_ENV = "METATO_OUTPUT_DIR"


class InputError(ConfigError):
    """A referenced input file is missing or malformed."""


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = RunConfig.preset(args.preset)
    if args.config:
        cfg = RunConfig.load(args.config, cfg)
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.override(key, value)
    if os.environ.get(OUTPUT_ENV):
        cfg = cfg.override("paths.output_dir", os.environ[OUTPUT_ENV])
    if args.output_dir:
        cfg = cfg.override("paths.output_dir", args.output_dir)
    return cfg


def _out(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.paths.output_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _input(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"input file {path} does not exist")
    return p


def _load(loader, path):
    try:
        return loader(_input(path))
    except (ValueError, OSError, KeyError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(args, cfg: RunConfig, outputs: list[Path], seeds: dict, extra: dict | None = None) -> Path:
    out_dir = Path(cfg.paths.output_dir)
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "cwd": os.getcwd(),
        "config": cfg.to_ini(),
        "seeds": seeds,
        "outputs": {
            (str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p)): _sha256(p) for p in outputs
        },
        "versions": {
            "metato": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
        },
    }
    manifest.update(extra or {})
    path = outputs[0].with_name(outputs[0].name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _seed(args, cfg: RunConfig, name: str) -> int:
    return args.seed if args.seed is not None else cfg.seed(name)


# ---------------------------------------------------------------- commands

def cmd_gen_tasks(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg, f"taskgen/{args.regime}")
    if args.regime == "cross-res":
        nelx, nely = cfg.mesh.fine_nelx, cfg.mesh.fine_nely
    else:
        nelx, nely = cfg.mesh.nelx, cfg.mesh.nely
    nelx, nely = args.nelx or nelx, args.nely or nely
    if args.n < 1:
        raise ConfigError("--n must be positive")
    ds = build_dataset(args.regime, args.n, seed, Discretization(nelx, nely),
                       cfg.optim_config().material, jobs=args.jobs)
    out = _out(cfg, args.out or f"tasks-{args.regime}-{seed}.bin")
    save_dataset(ds, out)
    outputs = [out]
    if args.export_text:
        text = out.with_suffix(".json")
        text.write_text(export_text(ds))
        outputs.append(text)
    _write_manifest(args, cfg, outputs, {"taskgen": seed}, {"dataset": ds.manifest})
    print(f"wrote {len(ds)} tasks to {out} ({ds.manifest['candidates']} candidates)")
    return 0


def _network_cfg(args, cfg: RunConfig, baseline: bool = False):
    if getattr(args, "unconditioned", False):
        cfg = cfg.override("network.conditioned", "false")
    return cfg.network_config(baseline)


def cmd_meta_train(args, cfg: RunConfig) -> int:
    train = _load(load_dataset, args.train)
    validation = _load(load_dataset, args.validation).tasks if args.validation else None
    if args.iterations is not None:
        cfg = cfg.override("meta.meta_iterations", str(args.iterations))
    init_seed = _seed(args, cfg, "init")
    meta_seed = cfg.seed("meta")
    init = init_standard(_network_cfg(args, cfg), init_seed)
    result = reptile_train(train.tasks, cfg.meta_config(meta_seed), init, cfg.optim_config(), validation)

    out = _out(cfg, args.out)
    best = result.best()
    save_checkpoint(best.params, out)
    outputs = [out]
    for ck in result.checkpoints:
        path = out.with_name(f"{out.stem}-iter{ck.iteration}{out.suffix}")
        save_checkpoint(ck.params, path)
        outputs.append(path)
    # wall time makes the log a diagnostic, not a reproducible artifact
    log_path = out.with_name(f"{out.stem}-log.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("meta_iteration", "mean_inner_loss", "validation_loss", "wall_time"))
        for row in result.log_rows:
            w.writerow((row[0], repr(row[1]), repr(row[2]), f"{row[3]:.3f}"))
    _write_manifest(args, cfg, outputs, {"init": init_seed, "meta": meta_seed},
                    {"selected_iteration": best.iteration, "skipped_tasks": result.skipped, "log": str(log_path)})
    print(f"meta-trained {cfg.meta.meta_iterations} iterations; selected iteration {best.iteration} -> {out}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    train = _load(load_dataset, args.train)
    epochs = args.epochs if args.epochs is not None else cfg.pretrain.epochs
    init_seed = _seed(args, cfg, "init")
    order_seed = cfg.seed("pretrain")
    init = init_standard(cfg.network_config(), init_seed)
    params, history = pretrain_identity(train.tasks, init, epochs, cfg.pretrain.lr, order_seed)
    out = _out(cfg, args.out)
    save_checkpoint(params, out)
    hist = out.with_name(f"{out.stem}-loss.csv")
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "mse"))
        w.writerows((i + 1, repr(v)) for i, v in enumerate(history))
    outputs = [out, hist]
    extra = {}
    if args.heldout:
        extra["heldout_mse"] = identity_loss(params, _load(load_dataset, args.heldout).tasks)
        print(f"held-out identity MSE {extra['heldout_mse']:.3e}")
    _write_manifest(args, cfg, outputs, {"init": init_seed, "pretrain": order_seed}, extra)
    print(f"pretrained {epochs} epochs, final MSE {history[-1]:.3e} -> {out}")
    return 0


def _pick_task(ds, key: str):
    if key.isdigit():
        idx = int(key)
        if idx >= len(ds):
            raise ConfigError(f"task index {idx} out of range ({len(ds)} tasks)")
        return ds[idx]
    try:
        return ds.by_id(key)
    except KeyError:
        raise ConfigError(f"no task with id {key!r}") from None


def _method(name: str, init: str, args, cfg: RunConfig) -> Method:
    """``init`` is ``standard``, ``mma``, ``mma:<ckpt>`` or a checkpoint path (neural)."""
    if init == "standard":
        return Method(name, "neural", init_standard(_network_cfg(args, cfg, baseline=True), cfg.seed("init")))
    if init == "mma":
        return Method(name, "mma")
    if init.startswith("mma:"):
        return Method(name, "mma", _load(load_checkpoint, init[4:]))
    return Method(name, "neural", _load(load_checkpoint, init))


def cmd_optimize(args, cfg: RunConfig) -> int:
    ds = _load(load_dataset, args.task_file)
    task = _pick_task(ds, str(args.task_id))
    method = _method("run", args.init, args, cfg)
    ocfg = cfg.optim_config()
    if method.kind == "neural":
        record, _ = neural_optimize(task, method.params, ocfg)
    else:
        init = None if method.params is None else network_initial_design(task, method.params, ocfg)
        record = standard_optimize(task, ocfg, init)
    out = _out(cfg, args.out)
    save_run_record(record, out)
    design = out.with_name(f"{out.stem}-design.npy")
    binary = out.with_name(f"{out.stem}-binary.npy")
    np.save(design, task.disc.to_grid(record.design))
    np.save(binary, task.disc.to_grid(record.binary))
    _write_manifest(args, cfg, [out, design, binary], {"init": cfg.seed("init")},
                    {"task_id": task.task_id, "wall_time": record.wall_time})
    print(f"{task.task_id}: {record.iterations} iterations ({record.stop_reason}), "
          f"c/c_ref {record.c_cont / task.c_ref:.5f}, thresholded {record.c_thresh / task.c_ref:.5f}")
    return 0


DEFAULT_METHODS = ("neural=standard", "mma=mma")


def cmd_bench(args, cfg: RunConfig) -> int:
    ds = _load(load_dataset, args.tasks)
    tasks = ds.tasks[: args.limit] if args.limit else ds.tasks
    methods = []
    for item in args.method or DEFAULT_METHODS:
        if "=" not in item:
            raise ConfigError(f"--method expects NAME=INIT, got {item!r}")
        name, init = item.split("=", 1)
        methods.append(_method(name, init, args, cfg))
    ocfg = cfg.optim_config()
    if args.budget:
        cfg = cfg.override("optim.max_iters", str(args.budget))
        ocfg = cfg.optim_config()
    out = _out(cfg, args.out)
    table = run_benchmark(tasks, methods, ocfg, out, jobs=args.jobs)
    _write_manifest(args, cfg, [out], {"init": cfg.seed("init")})
    for m in table.methods:
        its = table.column(m, "iterations")
        print(f"{m}: median iterations {np.median(its):.1f}, mean {np.mean(its[np.isfinite(its)]):.2f}")
    return 0


def cmd_profile(args, cfg: RunConfig) -> int:
    table = _load(ResultsTable.load, args.results)
    curves = performance_profile(table, args.metric)
    out = _out(cfg, args.out or f"profile-{args.metric}.csv")
    save_profiles(curves, out)
    for name, c in curves.items():
        print(f"{name}: best on {100 * c(1.0):.1f}% of tasks, within 5% on {100 * c(1.05):.1f}%")
    if args.threshold_stats:
        for name, s in threshold_stats(table).items():
            print(f"{name}: thresholding changes compliance by {s.mean_change:+.2f}% "
                  f"on average ({s.n_excluded} tasks excluded)")
    _write_manifest(args, cfg, [out], {})
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    src = _input(args.input)
    if src.suffix == ".csv":
        src = _input(str(src.with_name(f"{src.stem}-design.npy")))
    grid = _load(np.load, str(src))
    if grid.ndim == 1:
        if not (args.nelx and args.nely) or args.nelx * args.nely != grid.size:
            raise InputError("1-D density files need matching --nelx and --nely")
        grid = Discretization(args.nelx, args.nely).to_grid(grid)
    try:
        pixels = density_image(grid)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = _out(cfg, args.out or f"{src.stem}.pgm")
    write_pgm(pixels, out)
    _write_manifest(args, cfg, [out], {})
    print(f"wrote {pixels.shape[1]}x{pixels.shape[0]} image to {out}")
    return 0


def cmd_validate(args, cfg: RunConfig) -> int:
    """Mean post-adaptation loss of a checkpoint on a dataset (checkpoint selection metric)."""
    params = _load(load_checkpoint, args.checkpoint)
    ds = _load(load_dataset, args.tasks)
    loss = evaluate_validation(params, ds.tasks, args.steps, cfg.optim_config(), cfg.meta.inner_lr)
    print(f"mean loss after {args.steps} steps: {loss:.6f}")
    return 0


def cmd_replay(args) -> int:
    manifest = json.loads(_input(args.manifest).read_text())
    into = Path(args.into or tempfile.mkdtemp(prefix="metato-replay-")).resolve()
    os.chdir(manifest["cwd"])
    code = main(manifest["argv"] + ["--output-dir", str(into)])
    if code != 0:
        return code
    mismatched = []
    for rel, digest in manifest["outputs"].items():
        path = Path(rel) if Path(rel).is_absolute() else into / rel
        if not path.exists() or _sha256(path) != digest:
            mismatched.append(rel)
    if mismatched:
        print(f"replay differs for: {', '.join(mismatched)}", file=sys.stderr)
        return 4
    print(f"replay reproduced {len(manifest['outputs'])} artifact(s) bit-identically in {into}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--preset", default="full", choices=("full", "desk"))
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    common.add_argument("--output-dir")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("--seed", type=int, help="override the named-substream seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="metato", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", parents=[common], help="generate a task dataset")
    p.add_argument("--regime", required=True, choices=("train", "validation", "in-dist", "out-of-dist", "cross-res"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--nelx", type=int)
    p.add_argument("--nely", type=int)
    p.add_argument("--out")
    p.add_argument("--export-text", action="store_true", help="also write a lossless JSON copy")
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("meta-train", parents=[common], help="Reptile meta-training")
    p.add_argument("--train", required=True)
    p.add_argument("--validation")
    p.add_argument("--iterations", type=int)
    p.add_argument("--unconditioned", action="store_true", help="drop the strain-energy input")
    p.add_argument("--out", default="meta.ckpt")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("pretrain", parents=[common], help="strain-energy identity pretraining")
    p.add_argument("--train", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--heldout", help="dataset for held-out identity MSE")
    p.add_argument("--out", default="pretrained.ckpt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("optimize", parents=[common], help="optimize one task")
    p.add_argument("--task-file", required=True)
    p.add_argument("--task-id", required=True, help="index or task id")
    p.add_argument("--init", default="standard", help="standard | mma | mma:<ckpt> | <ckpt>")
    p.add_argument("--unconditioned", action="store_true")
    p.add_argument("--out", default="run.csv")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bench", parents=[common], help="benchmark methods on a dataset (resumable)")
    p.add_argument("--tasks", required=True)
    p.add_argument("--method", action="append", metavar="NAME=INIT")
    p.add_argument("--limit", type=int)
    p.add_argument("--budget", type=int, help="iteration budget (default from config)")
    p.add_argument("--unconditioned", action="store_true")
    p.add_argument("--out", default="results.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("profile", parents=[common], help="performance profiles from a results table")
    p.add_argument("results")
    p.add_argument("--metric", default="iterations", choices=("iterations", "c_cont", "c_thresh"))
    p.add_argument("--threshold-stats", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("render", parents=[common], help="density field to PGM image")
    p.add_argument("input", help=".npy density grid or run-record CSV")
    p.add_argument("--nelx", type=int)
    p.add_argument("--nely", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("validate", parents=[common], help="post-adaptation loss of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--tasks", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("replay", help="re-run a command from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--into", help="output directory for the replay (default: fresh temp dir)")
    p.set_defaults(func=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        try:
            return cmd_replay(args)
        except (ConfigError, ValueError, KeyError, OSError) as exc:
            print(f"metato: error: bad manifest: {exc}", file=sys.stderr)
            return 2
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"metato: error: {exc}", file=sys.stderr)
        return 2
    except GenerationStallError as exc:
        print(f"metato: generation stalled: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("runtime failure", exc_info=True)
        print(f"metato: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
