"""``drkf`` command line: data generation, training, distillation, re-parameterisation, evaluation.

Exit codes: 0 success, 1 unexpected failure, 2 bad configuration or usage,
3 missing file, 4 unreadable checkpoint, 5 bad dataset.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data_synth import DataError, DatasetSpec, PgmError, read_pairs, read_train_images, write_dataset
from .distill import TrainData, train_base, train_distilled
from .evalbench import (DEFAULT_THRESHOLDS, evaluate_model, rotation_sweep, timing_compare, write_curve_csv,
                        write_sweep_csv, write_timing_csv)
from .mofa import MofaTeacher
from .network import Model

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_CHECKPOINT, EXIT_DATA = 0, 1, 2, 3, 4, 5

ABLATION_VARIANTS = ("base", "rkf", "mofa", "dbase", "drkf")
CONDITIONS = ("upright", "rotated")


class UsageError(Exception):
    pass


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _train_data(cfg: RunConfig, root: Path) -> TrainData:
    images = read_train_images(_require(root, "dataset"))
    if not images:
        raise DataError(f"no training images in {root}")
    return TrainData(images, cfg.augment_config(), cfg.data.grid_stride, cfg.train.min_correspondences)


def _load_model(path: Path, rkf_mode: str = "fused"):
    model, meta = load_checkpoint(_require(path, "checkpoint"))
    model.rkf_mode = rkf_mode
    return model, meta


def _meta(cfg: RunConfig, extra: dict) -> dict:
    return {**extra, "config": cfg.to_ini()}


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args):
    d = cfg.data
    spec = DatasetSpec(d.n_train, d.n_eval, d.size, d.style, d.density, d.contrast, cfg.run.seed, d.grid_stride)
    paths = write_dataset(args.out, spec, cfg.augment_config())
    for name, p in paths.items():
        print(f"{name}: {p}")


def cmd_train_base(cfg: RunConfig, args):
    data = _train_data(cfg, Path(args.data))
    t = cfg.train
    model, report, meta = train_base(cfg.model_config(args.variant), data, t.iterations, t.lr, cfg.run.seed,
                                     t.momentum, log_every=cfg.run.log_every)
    save_checkpoint(args.out, model, _meta(cfg, meta))
    if args.report:
        report.write_csv(args.report)
    print(f"saved {args.variant} model to {args.out} ({len(report)} iterations)")
    return model


def cmd_distill(cfg: RunConfig, args):
    data = _train_data(cfg, Path(args.data))
    teacher_model, _ = _load_model(Path(args.teacher))
    teacher = MofaTeacher(teacher_model, cfg.distill.teacher_rotations)
    init = None
    if args.init:
        init, _ = _load_model(Path(args.init))
        if init.cfg.variant != args.student:
            raise UsageError(f"--init checkpoint is a {init.cfg.variant} model, student is {args.student}")
    student_cfg = init.cfg if init is not None else cfg.model_config(args.student)
    model, report, meta = train_distilled(student_cfg, teacher, data, cfg.distill_config(args.student), init,
                                          log_every=cfg.run.log_every)
    save_checkpoint(args.out, model, _meta(cfg, meta))
    if args.report:
        report.write_csv(args.report)
    print(f"saved {meta['name']} model to {args.out} ({len(report)} iterations)")


def cmd_reparam(cfg: RunConfig, args):
    model, meta = _load_model(Path(args.input))
    fused = model.reparameterized()
    meta = {**meta, "reparameterized_from": model.cfg.variant, "rkf_layers": "fused into plain convs"}
    save_checkpoint(args.output, fused, meta)
    print(f"wrote re-parameterised model to {args.output}")


def _forward_fn(model: Model, mofa: bool, cfg: RunConfig):
    return MofaTeacher(model, cfg.distill.teacher_rotations) if mofa else model


def sweep_angles(step_deg: float) -> list[float]:
    n = math.ceil(360.0 / step_deg)
    return [math.radians(i * step_deg) for i in range(n) if i * step_deg < 360.0]


def cmd_eval(cfg: RunConfig, args):
    model, _ = _load_model(Path(args.ckpt), args.rkf_mode)
    fn = _forward_fn(model, args.mofa, cfg)
    root = _require(Path(args.data), "dataset")
    if args.mode == "sweep":
        images = [p.image_a for p in read_pairs(root, "upright")[:cfg.eval.sweep_images]]
        rows = rotation_sweep(fn, images, sweep_angles(cfg.eval.sweep_step_deg), cfg.detector(), model.cfg.rate,
                              cfg.run.seed, cfg.data.grid_stride)
        write_sweep_csv(args.out, rows)
        for ang, v in rows:
            print(f"{ang:7.2f} deg  mma@5px {v:.4f}")
        return rows
    curve = evaluate_model(fn, read_pairs(root, args.mode), cfg.detector(), model.cfg.rate, DEFAULT_THRESHOLDS)
    write_curve_csv(args.out, curve)
    print(f"{args.mode}: " + " ".join(f"@{t}px={a:.4f}" for t, a in zip(curve.thresholds, curve.accuracy))
          + f" (pairs={curve.n_pairs}, empty={curve.n_empty})")
    return curve


def cmd_ablation(cfg: RunConfig, args):
    """Train base and RKF, distil DBase and DRKF from the MOFA(base) teacher, evaluate all five."""
    root = _require(Path(args.data), "dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _train_data(cfg, root)
    pairs = {c: read_pairs(root, c) for c in CONDITIONS}
    t, seed = cfg.train, cfg.run.seed
    models = {}
    for variant in ("base", "rkf"):
        _log(f"[ablation] training {variant} ({t.iterations} iterations)")
        m, rep, meta = train_base(cfg.model_config(variant), data, t.iterations, t.lr, seed, t.momentum,
                                  log_every=cfg.run.log_every)
        save_checkpoint(out / f"{variant}.ckpt", m, _meta(cfg, meta))
        rep.write_csv(out / f"{variant}_train.csv")
        models[variant] = m
    teacher = MofaTeacher(models["base"], cfg.distill.teacher_rotations)
    models["mofa"] = teacher
    # each student starts from the trained model of its own variant
    for name, variant in (("dbase", "base"), ("drkf", "rkf")):
        _log(f"[ablation] distilling {name} ({cfg.distill.iterations} iterations)")
        m, rep, meta = train_distilled(models[variant].cfg, teacher, data, cfg.distill_config(variant),
                                       init=models[variant], log_every=cfg.run.log_every)
        save_checkpoint(out / f"{name}.ckpt", m, _meta(cfg, meta))
        rep.write_csv(out / f"{name}_train.csv")
        models[name] = m

    rows = []
    for name in ABLATION_VARIANTS:
        for cond in CONDITIONS:
            curve = evaluate_model(models[name], pairs[cond], cfg.detector(), cfg.model.rate)
            rows.append((name, cond, curve))
            print(f"{name:6s} {cond:8s} mma@5px {curve.at(5):.4f}")
    path = Path(args.csv) if args.csv else out / "ablation.csv"
    write_ablation_csv(path, rows)
    print(f"wrote {path}")
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "condition", "n_pairs", "n_empty"] + [f"mma_{t}px" for t in DEFAULT_THRESHOLDS])
        for name, cond, c in rows:
            w.writerow([name, cond, c.n_pairs, c.n_empty] + [repr(float(a)) for a in c.accuracy])


def read_ablation_csv(path) -> dict:
    with open(path, newline="") as f:
        return {(r["variant"], r["condition"]): {k: float(v) for k, v in r.items() if k.startswith("mma_")}
                for r in csv.DictReader(f)}


def cmd_bench(cfg: RunConfig, args):
    base = _load_model(Path(args.base))[0] if args.base else Model(cfg.model_config("base"), seed=cfg.run.seed)
    rkf = _load_model(Path(args.rkf))[0] if args.rkf else Model(cfg.model_config("rkf"), seed=cfg.run.seed)
    branched = rkf.copy()
    branched.rkf_mode = "branched"
    variants = {
        "base": base,
        "rkf_fused": rkf.reparameterized(),
        "rkf_branched": branched,
        "mofa": MofaTeacher(base, cfg.distill.teacher_rotations),
    }
    # timings are always single-threaded so ratios do not depend on core count
    with threadpool_limits(1):
        rows = timing_compare(variants, cfg.eval.timing_sizes, cfg.eval.timing_repetitions, seed=cfg.run.seed)
    write_timing_csv(args.out, rows)
    for r in rows:
        print(f"{r.variant:13s} {r.size:4d}px  {r.median_ms:9.3f} ms  x{r.ratio_to_base:.3f}")
    return rows


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (see configs/example.ini)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS so outputs are byte-reproducible")
    common.add_argument("--quiet", action="store_true", help="do not echo the effective configuration")

    p = argparse.ArgumentParser(prog="drkf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus")
    s.add_argument("--out", required=True, help="dataset directory")

    s = sub.add_parser("train-base", parents=[common], help="train with the joint loss only")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--variant", choices=("base", "rkf"), default="base")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--report", help="per-iteration loss CSV")

    s = sub.add_parser("distill", parents=[common], help="distil a student from a MOFA teacher")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--teacher", required=True, help="checkpoint wrapped by the MOFA teacher")
    s.add_argument("--student", choices=("base", "rkf"), default="rkf", help="base gives DBase, rkf gives DRKF")
    s.add_argument("--init", help="start the student from this checkpoint instead of a fresh init")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--report", help="per-iteration loss CSV")

    s = sub.add_parser("reparam", parents=[common], help="fuse RKF branches into single kernels")
    s.add_argument("input", help="input checkpoint")
    s.add_argument("output", help="output checkpoint")

    s = sub.add_parser("eval", parents=[common], help="MMA on a dataset")
    s.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--mode", choices=("upright", "rotated", "sweep"), default="rotated")
    s.add_argument("--mofa", action="store_true", help="evaluate the MOFA ensemble of the checkpoint")
    s.add_argument("--rkf-mode", choices=("fused", "branched"), default="fused",
                   help="run RKF layers as one fused kernel or as N rotated branches")
    s.add_argument("--out", required=True, help="output CSV (mma_curve or sweep layout)")

    s = sub.add_parser("ablation", parents=[common], help="train and evaluate all five variants")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="directory for checkpoints and reports")
    s.add_argument("--csv", help="ablation CSV path (default OUT/ablation.csv)")

    s = sub.add_parser("bench", parents=[common], help="inference timing of base, fused, branched and MOFA")
    s.add_argument("--base", help="base checkpoint (default: fresh init)")
    s.add_argument("--rkf", help="RKF checkpoint (default: fresh init)")
    s.add_argument("--out", required=True, help="timing CSV")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train-base": cmd_train_base, "distill": cmd_distill, "reparam": cmd_reparam,
            "eval": cmd_eval, "ablation": cmd_ablation, "bench": cmd_bench}


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.deterministic:
        overrides.append("run.deterministic=true")
    if args.config:
        _require(Path(args.config), "config file")
    cfg = load_config(args.config, overrides)
    # surface invalid combinations before any work starts
    for variant in ("base", "rkf"):
        cfg.model_config(variant)
    cfg.augment_config()
    cfg.distill_config("rkf")
    if cfg.eval.sweep_step_deg <= 0:
        raise ConfigError("eval.sweep_step_deg must be positive")
    if cfg.eval.timing_repetitions < 10:
        raise ConfigError("eval.timing_repetitions must be at least 10")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except FileNotFoundError as e:
        _log(f"error: {e}")
        return EXIT_MISSING
    except (ConfigError, ValueError) as e:
        _log(f"config error: {e}")
        return EXIT_CONFIG
    if not args.quiet:
        print("# effective configuration")
        print(cfg.to_ini().rstrip())
    limit = threadpool_limits(1) if cfg.run.deterministic else contextlib.nullcontext()
    try:
        with limit:
            COMMANDS[args.command](cfg, args)
    except UsageError as e:
        _log(f"usage error: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        _log(f"missing file: {e}")
        return EXIT_MISSING
    except CheckpointError as e:
        _log(f"checkpoint error: {e}")
        return EXIT_CHECKPOINT
    except (DataError, PgmError) as e:
        _log(f"data error: {e}")
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        _log(f"failed: {type(e).__name__}: {e}")
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
