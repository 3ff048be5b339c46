"""Command-line entry point: ``c2vkd <command> [flags]``.

Exit status is 0 on success, 1 for invalid input or configuration, and 2
when training diverges."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import ablation, data as datamod
from .gradcheck import run_suite
from .metrics import report_csv, report_table
from .train import (
    ConfigError,
    DivergenceError,
    DistillConfig,
    build_student,
    build_teacher,
    distill,
    evaluate,
    load_checkpoint,
    load_config,
    load_data,
    save_checkpoint,
    train_teacher,
)

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage, which is reserved for divergence here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="seed for this command's randomness")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--lambda-g", type=float)
    p.add_argument("--lambda-p", type=float)
    p.add_argument("--lambda-l", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--no-lg", action="store_true", help="disable the global-wise feature loss")
    p.add_argument("--no-lp", action="store_true", help="disable the patch-wise feature loss")
    p.add_argument("--no-ll", action="store_true", help="disable the linguistic feature loss")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="c2vkd", description="CNN-to-ViT distillation for semantic segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train/val dataset containers")
    _common(p)

    p = sub.add_parser("train-teacher", help="pretrain the CNN teacher")
    _common(p)
    p.add_argument("--data", type=Path, help="directory holding train.c2vt / val.c2vt")
    p.add_argument("--resume", type=Path, help="continue from a teacher checkpoint")

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--baseline", action="store_true", help="cross-entropy student, no teacher signal")

    p = sub.add_parser("evaluate", help="print per-class IoU and mIoU of a checkpoint")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("ablate", help="loss-combination grid and alpha/beta sweep")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--teacher", type=Path, help="teacher checkpoint; trained first when omitted")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated student seeds")
    p.add_argument("--grid", choices=("full", "core"), default="full")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    _common(p)
    p.add_argument("--points", type=int, default=10)
    return parser


def make_config(args) -> DistillConfig:
    if args.config is not None and not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    overrides = {
        "lambda_g": args.lambda_g,
        "lambda_p": args.lambda_p,
        "lambda_l": args.lambda_l,
        "alpha": args.alpha,
        "beta": args.beta,
    }
    if args.no_lg:
        overrides["use_lg"] = False
    if args.no_lp:
        overrides["use_lp"] = False
    if args.no_ll:
        overrides["use_ll"] = False
    if args.seed is not None:
        key = {"gen-data": "data_seed", "train-teacher": "teacher_seed"}.get(args.command, "seed")
        overrides[key] = args.seed
    if args.command == "distill" and args.baseline:
        overrides.update(use_ld=False, use_lg=False, use_lp=False, use_ll=False)
    return load_config(args.config, **overrides)


def _datasets(args, cfg):
    if getattr(args, "data", None) is None:
        return load_data(cfg)
    train = datamod.load_dataset(args.data / "train.c2vt")
    val = datamod.load_dataset(args.data / "val.c2vt")
    return train, val


def _thread_limit():
    raw = os.environ.get("C2V_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"C2V_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def cmd_gen_data(args, cfg) -> int:
    train, val = load_data(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    datamod.save_dataset(args.out / "train.c2vt", train)
    datamod.save_dataset(args.out / "val.c2vt", val)
    print(f"wrote {len(train)} train / {len(val)} val samples to {args.out}")
    return 0


def cmd_train_teacher(args, cfg) -> int:
    train, val = _datasets(args, cfg)
    if args.resume is not None:
        datamod.load_container(args.resume)  # fail early on a bad checkpoint
    args.out.mkdir(parents=True, exist_ok=True)
    out = args.out / "teacher.c2vt"
    teacher, metrics = train_teacher(cfg, train, val, out=out, resume=args.resume)
    if args.resume is not None and not metrics.rows:
        if args.resume.resolve() != out.resolve():
            out.write_bytes(args.resume.read_bytes())
        print("teacher already fully trained; checkpoint unchanged")
        return 0
    metrics.write(args.out / "teacher_metrics.csv")
    print(f"teacher val mIoU {metrics.final_miou:.4f}; checkpoint {out}")
    return 0


def _load_teacher(path):
    net, meta = load_checkpoint(path)
    if meta["kind"] != "teacher":
        raise ConfigError(f"{path} holds a {meta['kind']} checkpoint, expected a teacher")
    return net


def cmd_distill(args, cfg) -> int:
    teacher = _load_teacher(args.teacher)
    train, val = _datasets(args, cfg)
    student, metrics = distill(cfg, teacher, train, val)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "student.c2vt", student, "student", cfg, cfg.max_iters, {"val_miou": metrics.final_miou})
    metrics.write(args.out / "metrics.csv")
    print(f"student val mIoU {metrics.final_miou:.4f}; checkpoint {args.out / 'student.c2vt'}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    _, val = _datasets(args, cfg)
    K = meta["config"]["num_classes"]
    iou, m, _ = evaluate(net, val, K)
    print(report_table(iou, m))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.csv").write_text(report_csv(iou, m))
    return 0


def cmd_ablate(args, cfg) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    train, val = _datasets(args, cfg)
    if args.teacher is not None:
        _load_teacher(args.teacher)
    args.out.mkdir(parents=True, exist_ok=True)
    teacher_path = args.teacher
    if teacher_path is None:
        teacher_path = args.out / "teacher.c2vt"
        train_teacher(cfg, train, val, out=teacher_path)
    cells = ablation.core_cells() if args.grid == "core" else ablation.loss_grid() + ablation.alpha_beta_sweep()
    rows = ablation.run_cells(cells, cfg, seeds, teacher_path, train, val, jobs=args.jobs)
    (args.out / "ablation.csv").write_text(ablation.to_csv(rows))
    print(f"{'group':<11} {'cell':<22} median mIoU")
    for (group, name), med in ablation.medians(rows).items():
        print(f"{group:<11} {name:<22} {med:.4f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    if args.points < 1:
        raise ConfigError("--points must be >= 1")
    start = args.seed if args.seed is not None else 0
    worst = run_suite(range(start, start + args.points))
    ok = True
    for name, err in worst.items():
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        ok &= err < GRADCHECK_TOL
        print(f"{name:<6} max rel err {err:.3e}  {status}")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = make_config(args)
        print(f"# c2vkd {args.command}")
        for line in cfg.describe().splitlines():
            print(f"# {line}")
        if args.command in ("train-teacher", "distill", "ablate"):
            nt, ns = build_teacher(cfg).num_parameters(), build_student(cfg).num_parameters()
            print(f"# parameters: teacher {nt:,}, student {ns:,}")
        with _thread_limit():
            return COMMANDS[args.command](args, cfg)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, datamod.ContainerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
