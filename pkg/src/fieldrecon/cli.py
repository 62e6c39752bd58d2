"""Command line: ``fieldrecon <command> [options]``.

Commands
--------
generate     write a synthetic vortex-street dataset
train        train the transformer and write a checkpoint plus loss history
reconstruct  write reconstructed fields of the test snapshots as CSV
evaluate     score methods on the test snapshots (metrics.json, table.txt)
ablate       observation-density and noise sweeps (density.csv, noise.csv)
compare      merge existing metrics.json files into one table

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import harness
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import (DataError, Snapshot, atomic_write, load_dataset, sample_observations, save_dataset,
                   sequential_split, write_snapshot_csv)
from .metrics import EvalReport, format_table
from .rformer.checkpoint import CheckpointError, load_checkpoint
from .rformer.training import deterministic
from .tensor import DomainError
from .vortex import generate_vortex_street

log = logging.getLogger("fieldrecon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class Refusal(ConfigError):
    """The command would overwrite existing output without ``--force``."""


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--strict-deterministic", action="store_true",
                        help="single-threaded BLAS for bit-reproducible results")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fieldrecon", description=__doc__.split("\n")[0],
                                epilog="Options go after the command, e.g. fieldrecon train --seed 1.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train the transformer")
    t.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    r = sub.add_parser("reconstruct", parents=[common], help="write reconstructed test fields")
    r.add_argument("--method", default="rformer", choices=harness.METHODS)
    r.add_argument("--checkpoint", type=Path)
    e = sub.add_parser("evaluate", parents=[common], help="score methods on the test split")
    e.add_argument("--methods", help="comma-separated list (overrides [eval] methods)")
    e.add_argument("--checkpoint", type=Path)
    a = sub.add_parser("ablate", parents=[common], help="density and noise sweeps")
    a.add_argument("--axis", choices=["density", "noise", "both"], default="both")
    a.add_argument("--checkpoint", type=Path)
    c = sub.add_parser("compare", parents=[common], help="merge metrics files into one table")
    c.add_argument("metrics", nargs="*", type=Path, help="metrics.json files (default: <out>/eval)")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.out = str(args.out)
    if args.strict_deterministic:
        cfg.run.strict = True
    return cfg


def _splits(cfg: RunConfig):
    ds = load_dataset(cfg.dataset_path)
    return ds, *sequential_split(ds, cfg.run.train_fraction)


def _checkpoint(cfg: RunConfig, path: Path | None):
    return load_checkpoint(path or cfg.out_dir / "train" / "checkpoint.bin")


def cmd_generate(cfg: RunConfig, args) -> int:
    out = cfg.dataset_path.parent
    if (out / "manifest.json").exists() and not args.force:
        raise Refusal(f"{out} already holds a dataset; pass --force to overwrite")
    gen = cfg.generate
    if args.seed is not None:
        gen = replace(gen, seed=cfg.run.seed)
    ds = generate_vortex_street(gen)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} snapshots x {ds[0].n_points} points (d_x={ds.d_x}, "
          f"components={','.join(ds.component_names)}) to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    _, train_set, _ = _splits(cfg)
    out = cfg.out_dir / "train"
    ckpt_path = out / "checkpoint.bin"
    resume = None
    if ckpt_path.exists():
        if args.resume:
            resume = load_checkpoint(ckpt_path)
        elif not args.force:
            raise Refusal(f"{ckpt_path} exists; pass --resume to continue or --force to restart")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.ini", cfg.to_ini())

    def write_history(epoch, ck):
        atomic_write(out / "loss_history.csv", _history_csv(ck.metadata))

    ck = harness.train_rformer(cfg, train_set, checkpoint_path=ckpt_path, resume=resume,
                               on_epoch=write_history)
    write_history(None, ck)
    hist = ck.metadata["loss_history"]
    print(f"trained to epoch {ck.metadata['epoch']}; final loss {hist[-1]:.5f}; checkpoint {ckpt_path}"
          if hist else f"nothing to do: checkpoint already at epoch {ck.metadata['epoch']}")
    return EXIT_OK


def _history_csv(meta: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss"])
    steps = max(1, int(meta.get("steps_per_epoch", 1)))
    for i, v in enumerate(meta["loss_history"]):
        w.writerow([i, i // steps, repr(float(v))])
    return buf.getvalue()


def _methods(cfg: RunConfig, names, train_set, checkpoint_arg):
    ckpt = _checkpoint(cfg, checkpoint_arg) if "rformer" in names else None
    return harness.fit_methods(names, cfg, train_set, ckpt)


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    ds, train_set, test_set = _splits(cfg)
    method = _methods(cfg, [args.method], train_set, args.checkpoint)[args.method]
    out = cfg.out_dir / "reconstruct" / args.method
    out.mkdir(parents=True, exist_ok=True)
    m = harness.observed_count(cfg.eval.obs_fraction, test_set[0].n_points)
    with deterministic(cfg.run.strict):
        for snap in test_set:
            split = sample_observations(snap, m, snap.snapshot_index)
            full = method.reconstruct(snap, split)
            write_snapshot_csv(out / f"snapshot_{snap.snapshot_index:05d}.csv",
                               Snapshot(snap.coords, full, snap.snapshot_index), ds.component_names)
    print(f"wrote {len(test_set)} reconstructed snapshots to {out}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    _, train_set, test_set = _splits(cfg)
    names = [s.strip() for s in args.methods.split(",")] if args.methods else list(cfg.eval.methods)
    for n in names:
        if n not in harness.METHODS:
            raise ConfigError(f"unknown method {n!r}; choose from {', '.join(harness.METHODS)}")
    out = cfg.out_dir / "eval"
    if (out / "metrics.json").exists() and not args.force:
        raise Refusal(f"{out / 'metrics.json'} exists; pass --force to overwrite")
    with deterministic(cfg.run.strict):
        methods = _methods(cfg, names, train_set, args.checkpoint)
        res = harness.evaluate(methods, test_set, cfg.eval.obs_fraction, spectrum=cfg.eval.spectrum,
                               spectrum_resolution=cfg.eval.spectrum_resolution, seed=cfg.run.seed)
    harness.write_reports(out, res, test_set.component_names)
    if cfg.eval.dump_fields:
        for name, fields in res.fields.items():
            d = out / "fields" / name
            d.mkdir(parents=True, exist_ok=True)
            for snap, f in zip(test_set, fields):
                write_snapshot_csv(d / f"snapshot_{snap.snapshot_index:05d}.csv",
                                   Snapshot(snap.coords, f, snap.snapshot_index), test_set.component_names)
    sys.stdout.write(format_table(res.reports))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    _, train_set, test_set = _splits(cfg)
    out = cfg.out_dir / "ablation"
    ckpt_file = args.checkpoint or cfg.out_dir / "train" / "checkpoint.bin"
    ckpt = load_checkpoint(ckpt_file) if ckpt_file.exists() else None
    axes = ["density", "noise"] if args.axis == "both" else [args.axis]
    with deterministic(cfg.run.strict):
        for axis in axes:
            grid = cfg.ablation.densities if axis == "density" else cfg.ablation.noise_scales
            retrain = cfg.ablation.retrain_density if axis == "density" else False
            rows = harness.run_ablation(axis, grid, cfg, train_set, test_set, ckpt, out / axis, retrain)
            sys.stdout.write(harness.ablation_csv(rows, test_set.component_names))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    files = args.metrics or [cfg.out_dir / "eval" / "metrics.json"]
    reports = []
    for f in files:
        if not Path(f).exists():
            raise DataError(f"{f}: metrics file not found")
        payload = json.loads(Path(f).read_text())
        for d in payload["methods"]:
            reports.append(EvalReport(d["method"], d["components"], [], d["mean"], d["std"]))
    reports.sort(key=lambda r: r.mean["total"])
    text = format_table(reports)
    out = cfg.out_dir / "compare"
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "table.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "compare": cmd_compare}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("RECON_THREADS")
    try:
        cfg = _config(args)
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ConfigError("RECON_THREADS must be a positive integer")
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](cfg, args)
    except (FloatingPointError, DomainError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        return _fail(exc, EXIT_DATA)
    except ValueError as exc:
        return _fail(exc, EXIT_CONFIG)


def _fail(exc: Exception, code: int) -> int:
    print(f"fieldrecon: error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
