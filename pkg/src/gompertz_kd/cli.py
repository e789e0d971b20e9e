"""Command-line entry point.

Subcommands: train-teacher, distill, sweep, report, plot-schedule,
validate-config. Exit codes: 0 success, 1 runtime failure (with
coordinates where applicable), 2 config parse/validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from gompertz_kd.config import (
    experiment_from_dict,
    load_config_dict,
    schedule_from_dict,
    snapshot_yaml,
    validate_config_dict,
)
from gompertz_kd.data import download_dataset
from gompertz_kd.errors import ConfigurationError, GkdError, TrainingAbort
from gompertz_kd.report import build_table, load_run_summaries, render_curve, write_report
from gompertz_kd.trainer import train, train_teacher

logger = logging.getLogger(__name__)


def _add_common(sub: argparse.ArgumentParser, needs_out: bool = True) -> None:
    sub.add_argument("--config", required=True, help="YAML config file")
    if needs_out:
        sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. trainer.epochs=5 (repeatable)",
    )
    sub.add_argument("--seed", type=int, default=None, help="override trainer.seed")
    sub.add_argument(
        "--allow-download",
        action="store_true",
        help="fetch missing CIFAR archives (checksum-verified)",
    )
    sub.add_argument("-v", "--verbose", action="store_true")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gompertz-kd",
        description="dynamic-weight knowledge distillation experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train-teacher", help="cross-entropy train the teacher")
    _add_common(p)

    p = subs.add_parser("distill", help="run one distillation experiment")
    _add_common(p)

    p = subs.add_parser("sweep", help="run the mode x seed grid for one cell")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")

    p = subs.add_parser("report", help="build table + radar charts from runs")
    p.add_argument("--runs", required=True, help="directory tree of run outputs")
    p.add_argument("--out", default=None, help="report directory (default: RUNS/report)")
    p.add_argument("--strict", action="store_true", help="fail on incomplete cells")
    p.add_argument("-v", "--verbose", action="store_true")

    p = subs.add_parser("plot-schedule", help="emit (t, beta) CSV + SVG curve")
    _add_common(p)

    p = subs.add_parser("validate-config", help="check a config without running")
    _add_common(p, needs_out=False)
    return parser


def _resolve_config(args) -> dict:
    cfg = load_config_dict(args.config, args.overrides)
    if args.seed is not None:
        cfg["trainer"]["seed"] = int(args.seed)
    return cfg


def _maybe_download(cfg: dict, allow_download: bool) -> None:
    name = cfg["dataset"].get("name")
    if name not in ("cifar10", "cifar100") or not allow_download:
        return
    from gompertz_kd.data import DatasetSpec

    spec = DatasetSpec(name=name, root=cfg["dataset"].get("root"))
    root = spec.resolve_root()
    if root is None:
        raise ConfigurationError("dataset.root is required to download into")
    try:
        from gompertz_kd.data import _read_cifar_files

        _read_cifar_files(root, name, "train")
    except GkdError:
        logger.info("downloading %s into %s", name, root)
        download_dataset(name, root)


def _cmd_train_teacher(args) -> int:
    cfg = _resolve_config(args)
    _maybe_download(cfg, args.allow_download)
    config = experiment_from_dict(cfg)
    record = train_teacher(config, Path(args.out))
    print(f"teacher checkpoint: {record.checkpoint_path}")
    print(f"teacher test accuracy: {record.final_test_acc:.4f}")
    return 0


def _cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    _maybe_download(cfg, args.allow_download)
    config = experiment_from_dict(cfg)
    record = train(config, Path(args.out))
    print(f"mode={record.mode} seed={record.seed} "
          f"final test accuracy: {record.final_test_acc:.4f}")
    return 0


def _sweep_cell(cfg: dict, out_dir: str) -> tuple[str, float]:
    config = experiment_from_dict(cfg)
    record = train(config, out_dir)
    return out_dir, record.final_test_acc


def _cmd_sweep(args) -> int:
    import copy

    cfg = _resolve_config(args)
    _maybe_download(cfg, args.allow_download)
    violations = validate_config_dict(cfg)
    if violations:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(violations))
    out = Path(args.out)
    sweep = cfg["sweep"]

    teacher_ckpt = cfg["models"].get("teacher_checkpoint")
    modes = list(sweep["modes"])
    needs_teacher = any(m != "student_only" for m in modes)
    if needs_teacher and not teacher_ckpt:
        teacher_cfg = copy.deepcopy(cfg)
        teacher_cfg["trainer"]["mode"] = "student_only"
        if sweep.get("teacher_epochs"):
            teacher_cfg["trainer"]["epochs"] = int(sweep["teacher_epochs"])
        teacher_cfg["trainer"]["seed"] = int(sweep.get("teacher_seed", 0))
        record = train_teacher(experiment_from_dict(teacher_cfg), out / "teacher")
        teacher_ckpt = record.checkpoint_path
        print(f"teacher trained: acc={record.final_test_acc:.4f} -> {teacher_ckpt}")

    cells = []
    dataset = cfg["dataset"]["name"]
    teacher_id = cfg["models"]["teacher"]
    student_id = cfg["models"]["student"]
    for mode in modes:
        for seed in sweep["seeds"]:
            run_cfg = copy.deepcopy(cfg)
            run_cfg["trainer"]["mode"] = mode
            run_cfg["trainer"]["seed"] = int(seed)
            run_cfg["models"]["teacher_checkpoint"] = teacher_ckpt
            run_dir = out / dataset / f"{teacher_id}__{student_id}" / mode / f"seed{seed}"
            cells.append((run_cfg, str(run_dir)))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_cell, c, d) for c, d in cells]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_cell(c, d) for c, d in cells]
    for run_dir, acc in results:
        print(f"{run_dir}: final test accuracy {acc:.4f}")
    print(f"sweep complete: {len(results)} runs under {out}")
    return 0


def _cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    out = Path(args.out) if args.out else runs_dir / "report"
    summaries = load_run_summaries(runs_dir)
    if not summaries:
        raise GkdError(f"no run.json files found under {runs_dir}")
    table = build_table(summaries, strict=args.strict)
    summary = write_report(table, out)
    for dataset, entry in summary["datasets"].items():
        if "mean_improvement_points" in entry:
            print(f"{dataset}: mean improvement {entry['mean_improvement_display']}")
        else:
            print(f"{dataset}: incomplete ({entry['complete_cells']}/{entry['cells']} cells)")
    print(f"report written to {out}")
    return 0


def _cmd_plot_schedule(args) -> int:
    cfg = _resolve_config(args)
    violations = validate_config_dict(cfg)
    if violations:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(violations))
    epochs = int(cfg["trainer"]["epochs"])
    schedule = schedule_from_dict(cfg["schedule"], cfg["trainer"]["mode"])
    points = schedule.curve(epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_lines = ["t,beta"] + [f"{t!r},{beta!r}" for t, beta in points]
    (out / "schedule.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "schedule.svg").write_bytes(
        render_curve(points, "distillation weight schedule").encode()
    )
    print(f"schedule curve written to {out}/schedule.csv and {out}/schedule.svg")
    return 0


def _cmd_validate_config(args) -> int:
    cfg = _resolve_config(args)
    violations = validate_config_dict(cfg)
    if violations:
        print("invalid config:", file=sys.stderr)
        for v in violations:
            print(f"  {v}", file=sys.stderr)
        return 2
    print("config ok")
    print(snapshot_yaml(cfg), end="")
    return 0


_COMMANDS = {
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
    "plot-schedule": _cmd_plot_schedule,
    "validate-config": _cmd_validate_config,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except GkdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
