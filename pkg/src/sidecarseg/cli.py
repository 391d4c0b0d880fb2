"""Command-line harness for training, baselines, sweeps, and reports.

Exit codes: 0 success, 1 usage or configuration, 2 data, 3 training,
4 integrity (a frozen parameter or checkpoint failed verification).
The output root comes from --output-root, else $SIDECARSEG_OUTPUT_ROOT,
else ./runs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint
from .data import generate_dataset, save_labelmap_dataset
from .determinism import enable_deterministic_mode
from .errors import (
    ConfigurationError,
    DataError,
    EmptySupervisionError,
    FrozenViolationError,
    ScheduleError,
    SidecarSegError,
    TrainingDivergenceError,
    VerificationError,
)
from .experiment import (
    DEFAULT_TAU_GRID,
    default_config_text,
    load_datasets,
    load_experiment_config,
    run_ablation,
    run_base_step,
    run_incremental_step,
    run_protocol,
    run_tau_sweep,
    trajectory_from_manifest,
)
from .metrics import metrics_records, trajectory_report
from .reporting import (
    ablation_table,
    export_masks,
    plot_roc,
    plot_sweep,
    plot_trajectory,
    sweep_table,
    two_part_table,
)
from .routing import RoutingConfig
from .runs import RunLock, load_manifest, resolve_run, verify_checkpoint_reference

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3
EXIT_INTEGRITY = 4


def _cmd_generate_data(args) -> int:
    config = load_experiment_config(args.config)
    out = Path(args.out)
    train_count = args.count or config.num_train
    train_ds = generate_dataset(config.scene, train_count)
    save_labelmap_dataset(train_ds, out / "train")
    from .data import evaluation_spec  # local to keep the import list short

    eval_ds = generate_dataset(evaluation_spec(config.scene), config.num_eval)
    save_labelmap_dataset(eval_ds, out / "eval")
    print(f"wrote {train_count} train and {config.num_eval} eval scenes under {out}")
    return EXIT_OK


def _cmd_train_base(args) -> int:
    config = load_experiment_config(args.config)
    from .experiment import create_or_resume_run

    paths, manifest = create_or_resume_run(config, args.method, args.run_id, args.output_root)
    with RunLock(paths.root):
        if 0 in manifest.completed_steps():
            print(f"run {manifest.run_id}: step 0 already complete")
        else:
            report = run_base_step(config, paths, manifest)
            print(f"run {manifest.run_id}: step 0 base mIoU {report.base_miou:.4f}")
    print(manifest.run_id)
    return EXIT_OK


def _cmd_train_incremental(args) -> int:
    paths = resolve_run(args.run, args.output_root)
    manifest = load_manifest(paths)
    if args.method and args.method != manifest.method:
        raise ConfigurationError(
            f"run {manifest.run_id} uses method {manifest.method!r}; pass a matching --method")
    config = _config_from_manifest(manifest)
    with RunLock(paths.root):
        steps = [args.step] if args.step is not None else [
            s for s in range(1, len(config.schedule().steps) + 1)
            if s not in manifest.completed_steps()
        ]
        for step in steps:
            report = run_incremental_step(config, paths, manifest, step)
            print(f"run {manifest.run_id}: step {step} overall mIoU {report.overall_miou:.4f} "
                  f"base mIoU {report.base_miou:.4f}")
    return EXIT_OK


def _cmd_run_protocol(args) -> int:
    config = load_experiment_config(args.config)
    paths, manifest = run_protocol(config, args.method, args.run_id, args.output_root)
    for entry in manifest.steps:
        rec, met = entry["record"], entry["metrics"]
        print(f"step {rec['step_index']}: overall {met['overall_miou']:.4f} "
              f"base {met['base_miou']:.4f}")
    print(manifest.run_id)
    return EXIT_OK


def _parse_grid(text: str | None):
    if not text:
        return DEFAULT_TAU_GRID
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise ConfigurationError(f"grid must be start:stop:step, got {text!r}") from exc
    if step <= 0 or stop < start:
        raise ConfigurationError(f"grid bounds do not form an increasing range: {text!r}")
    values, v = [], start
    while v <= stop + 1e-12:
        values.append(round(v, 6))
        v += step
    return values


def _cmd_sweep_tau(args) -> int:
    paths = resolve_run(args.run, args.output_root)
    manifest = load_manifest(paths)
    config = _config_from_manifest(manifest)
    with RunLock(paths.root):
        summary = run_tau_sweep(config, paths, manifest, step=args.step,
                                grid=_parse_grid(args.grid), fixed_tau=args.tau)
    table = sweep_table(summary)
    paths.reports.mkdir(parents=True, exist_ok=True)
    (paths.reports / f"sweep_step_{summary['step']}.txt").write_text(table)
    plot_sweep(summary, paths.reports / f"sweep_step_{summary['step']}.png")
    plot_roc(summary, paths.reports / f"roc_step_{summary['step']}.png")
    print(table, end="")
    return EXIT_OK


def _cmd_ablate_connection(args) -> int:
    config = load_experiment_config(args.config)
    rows = run_ablation(config, root=args.output_root, run_prefix=args.run_prefix)
    table = ablation_table(rows)
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
    print(table, end="")
    return EXIT_OK


def _cmd_report(args) -> int:
    paths = resolve_run(args.run, args.output_root)
    manifest = load_manifest(paths)
    trajectories = {manifest.method: trajectory_report(trajectory_from_manifest(manifest))}
    for other in args.baseline or []:
        other_paths = resolve_run(other, args.output_root)
        other_manifest = load_manifest(other_paths)
        trajectories[other_manifest.method] = trajectory_report(
            trajectory_from_manifest(other_manifest))
    table = two_part_table(trajectories)
    paths.reports.mkdir(parents=True, exist_ok=True)
    (paths.reports / "trajectory.txt").write_text(table)
    records = [line for report in trajectory_from_manifest(manifest)
               for line in metrics_records(report)]
    (paths.reports / "metrics_records.txt").write_text("\n".join(records) + "\n")
    plot_trajectory(trajectories, paths.reports / "trajectory.png")
    print(table, end="")

    if args.masks:
        entry = manifest.step_entry(manifest.completed_steps()[-1])
        ckpt = verify_checkpoint_reference(paths, entry)
        model, units, _ = load_checkpoint(ckpt)
        config = _config_from_manifest(manifest)
        _, eval_ds = load_datasets(config)
        tau = manifest.routing_tau if manifest.routing_tau is not None else config.routing.tau
        routing = RoutingConfig(tau=tau, arbitration=config.routing.arbitration)
        written = export_masks(model, units, eval_ds.images, routing,
                               paths.reports / "masks", count=args.masks,
                               class_ids=range(config.universe_size))
        print(f"wrote {len(written)} mask images under {paths.reports / 'masks'}")
    return EXIT_OK


def _config_from_manifest(manifest):
    from .experiment import experiment_config_from_dict

    return experiment_config_from_dict(manifest.config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sidecarseg",
        description="Replay-free class-incremental segmentation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_output_root(p):
        p.add_argument("--output-root", default=None,
                       help="run directory root (default $SIDECARSEG_OUTPUT_ROOT or ./runs)")

    p = sub.add_parser("generate-data", help="render a synthetic dataset to disk")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None, help="override the train scene count")
    p.set_defaults(handler=_cmd_generate_data)

    p = sub.add_parser("train-base", help="run the base training phase")
    p.add_argument("--config", required=True)
    p.add_argument("--run-id", default=None)
    p.add_argument("--method", default="sidecar", choices=("sidecar", "finetune", "joint"))
    add_output_root(p)
    p.set_defaults(handler=_cmd_train_base)

    p = sub.add_parser("train-incremental", help="run one (or all remaining) scheduled steps")
    p.add_argument("--run", required=True, help="run id or run directory")
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--method", default=None, choices=("sidecar", "finetune", "joint"))
    add_output_root(p)
    p.set_defaults(handler=_cmd_train_incremental)

    p = sub.add_parser("run-protocol", help="base phase plus every scheduled step")
    p.add_argument("--config", required=True)
    p.add_argument("--method", default="sidecar", choices=("sidecar", "finetune", "joint"))
    p.add_argument("--run-id", default=None)
    add_output_root(p)
    p.set_defaults(handler=_cmd_run_protocol)

    p = sub.add_parser("sweep-tau", help="threshold sweep and ROC for a trained unit")
    p.add_argument("--run", required=True)
    p.add_argument("--step", type=int, default=None, help="default: latest trained step")
    p.add_argument("--grid", default=None, help="start:stop:step (default 0.05:0.95:0.05)")
    p.add_argument("--tau", type=float, default=None,
                   help="record this threshold instead of the swept tau*")
    add_output_root(p)
    p.set_defaults(handler=_cmd_sweep_tau)

    p = sub.add_parser("ablate-connection", help="compare the three connection points")
    p.add_argument("--config", required=True)
    p.add_argument("--run-prefix", default="ablate")
    p.add_argument("--out", default=None, help="also write the table to this file")
    add_output_root(p)
    p.set_defaults(handler=_cmd_ablate_connection)

    p = sub.add_parser("report", help="tables and plots from run manifests")
    p.add_argument("--run", required=True)
    p.add_argument("--baseline", action="append", default=None,
                   help="additional run ids to include as comparison curves")
    p.add_argument("--masks", type=int, default=0,
                   help="export this many routed mask images (runs the model)")
    add_output_root(p)
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("init-config", help="print the default experiment config")
    p.set_defaults(handler=lambda args: (print(default_config_text(), end=""), EXIT_OK)[1])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    enable_deterministic_mode()
    try:
        return args.handler(args)
    except (FrozenViolationError, VerificationError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingDivergenceError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DataError, EmptySupervisionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigurationError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SidecarSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
