"""Experiment orchestration: config files, protocol runs, sweeps, ablation.

One INI-style config drives model, data, schedule, training, and routing;
command-line flags override individual values. Runs are resumable: every
step derives its randomness from (seed, step), so re-running a partially
complete run continues from the manifest and lands on identical numbers.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

from .checkpoint import file_sha256, load_checkpoint
from .data import (
    SceneSpec,
    SegmentationDataset,
    TaskSchedule,
    build_schedule,
    evaluation_spec,
    filter_for_step,
    generate_dataset,
    load_labelmap_dataset,
    restrict_labels,
)
from .errors import ConfigurationError, DataError
from .evaluation import evaluate_argmax, evaluate_routed, novel_class_scores
from .metrics import MetricsReport
from .model import ModelConfig, build_incremental_unit, build_model
from .routing import RoutingConfig, roc_and_auc, sweep_threshold
from .runs import (
    RunLock,
    RunManifest,
    RunPaths,
    load_manifest,
    output_root,
    save_manifest,
    verify_checkpoint_reference,
)
from .training import (
    TrainConfig,
    train_base,
    train_finetune_baseline,
    train_incremental,
    train_joint_baseline,
)

METHODS = ("sidecar", "finetune", "joint")
DEFAULT_TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    scene: SceneSpec
    num_train: int
    num_eval: int
    dataset_dir: str | None
    protocol: str
    universe_size: int
    train: TrainConfig
    incremental_learning_rate: float
    incremental_epochs: int
    routing: RoutingConfig

    def schedule(self) -> TaskSchedule:
        return build_schedule(range(self.universe_size), self.protocol)

    def incremental_train_config(self) -> TrainConfig:
        return replace(self.train, learning_rate=self.incremental_learning_rate,
                       epochs=self.incremental_epochs)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": {
                "height": self.scene.height,
                "width": self.scene.width,
                "min_objects": self.scene.min_objects,
                "max_objects": self.scene.max_objects,
                "region_probability": self.scene.region_probability,
                "noise_level": self.scene.noise_level,
                "background_class_id": self.scene.background_class_id,
                "seed": self.scene.seed,
                "num_train": self.num_train,
                "num_eval": self.num_eval,
                "dataset_dir": self.dataset_dir,
            },
            "schedule": {"protocol": self.protocol, "universe_size": self.universe_size},
            "train": {
                **self.train.to_dict(),
                "incremental_learning_rate": self.incremental_learning_rate,
                "incremental_epochs": self.incremental_epochs,
            },
            "routing": {"tau": self.routing.tau, "arbitration": self.routing.arbitration},
        }


DEFAULT_CONFIG = """\
[model]
stem_width = 16
branch_widths = 24,24,12
num_blocks_per_branch = 2
num_base_classes = 6
connection_point = boundary

[data]
height = 48
width = 48
min_objects = 2
max_objects = 4
region_probability = 0.65
noise_level = 0.03
background_class_id = 0
seed = 42
num_train = 96
num_eval = 32

[schedule]
protocol = 6-1
universe_size = 8

[train]
learning_rate = 0.1
momentum = 0.9
epochs = 100
batch_size = 8
poly_power = 0.9
seed = 7
incremental_learning_rate = 0.2
incremental_epochs = 60

[routing]
tau = 0.75
arbitration = max_confidence
"""


def default_config_text() -> str:
    return DEFAULT_CONFIG


_KNOWN_KEYS = {
    "model": {"stem_width", "branch_widths", "num_blocks_per_branch",
              "num_base_classes", "connection_point", "input_channels"},
    "data": {"height", "width", "min_objects", "max_objects", "region_probability",
             "noise_level", "background_class_id", "seed", "num_train", "num_eval",
             "dataset_dir"},
    "schedule": {"protocol", "universe_size"},
    "train": {"learning_rate", "momentum", "epochs", "batch_size", "poly_power", "seed",
              "incremental_learning_rate", "incremental_epochs"},
    "routing": {"tau", "arbitration"},
}


def parse_experiment_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config does not parse: {exc}") from exc
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigurationError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - _KNOWN_KEYS[section]
        if unknown:
            raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")

    defaults = configparser.ConfigParser()
    defaults.read_string(DEFAULT_CONFIG)
    for section in defaults.sections():
        if not parser.has_section(section):
            parser.add_section(section)
        for key, value in defaults[section].items():
            parser[section].setdefault(key, value)

    try:
        model = ModelConfig(
            input_channels=parser["model"].getint("input_channels", 3),
            stem_width=parser["model"].getint("stem_width"),
            branch_widths=tuple(
                int(w) for w in parser["model"]["branch_widths"].split(",")),
            num_blocks_per_branch=parser["model"].getint("num_blocks_per_branch"),
            num_base_classes=parser["model"].getint("num_base_classes"),
            connection_point=parser["model"]["connection_point"].strip(),
        )
        scene = SceneSpec(
            height=parser["data"].getint("height"),
            width=parser["data"].getint("width"),
            min_objects=parser["data"].getint("min_objects"),
            max_objects=parser["data"].getint("max_objects"),
            region_probability=parser["data"].getfloat("region_probability"),
            noise_level=parser["data"].getfloat("noise_level"),
            background_class_id=parser["data"].getint("background_class_id"),
            seed=parser["data"].getint("seed"),
        )
        train = TrainConfig(
            learning_rate=parser["train"].getfloat("learning_rate"),
            momentum=parser["train"].getfloat("momentum"),
            epochs=parser["train"].getint("epochs"),
            batch_size=parser["train"].getint("batch_size"),
            poly_power=parser["train"].getfloat("poly_power"),
            seed=parser["train"].getint("seed"),
        )
        config = ExperimentConfig(
            model=model,
            scene=scene,
            num_train=parser["data"].getint("num_train"),
            num_eval=parser["data"].getint("num_eval"),
            dataset_dir=parser["data"].get("dataset_dir", fallback=None),
            protocol=parser["schedule"]["protocol"].strip(),
            universe_size=parser["schedule"].getint("universe_size"),
            train=train,
            incremental_learning_rate=parser["train"].getfloat("incremental_learning_rate"),
            incremental_epochs=parser["train"].getint("incremental_epochs"),
            routing=RoutingConfig(
                tau=parser["routing"].getfloat("tau"),
                arbitration=parser["routing"]["arbitration"].strip(),
            ),
        )
    except (ValueError, KeyError) as exc:
        raise ConfigurationError(f"invalid config value: {exc}") from exc
    config.model.validate()
    config.scene.validate()
    config.train.validate()
    config.routing.validate()
    if config.num_train < 1 or config.num_eval < 1:
        raise ConfigurationError("num_train and num_eval must be >= 1")
    config.schedule()  # protocol must parse against the universe
    return config


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_experiment_config(path.read_text())


def experiment_config_from_dict(data: dict) -> ExperimentConfig:
    """Rebuild the config from a manifest snapshot (inverse of ``to_dict``)."""
    d = data["data"]
    config = ExperimentConfig(
        model=ModelConfig.from_dict(data["model"]),
        scene=SceneSpec(
            height=int(d["height"]), width=int(d["width"]),
            min_objects=int(d["min_objects"]), max_objects=int(d["max_objects"]),
            region_probability=float(d["region_probability"]),
            noise_level=float(d["noise_level"]),
            background_class_id=int(d["background_class_id"]), seed=int(d["seed"]),
        ),
        num_train=int(d["num_train"]),
        num_eval=int(d["num_eval"]),
        dataset_dir=d.get("dataset_dir"),
        protocol=str(data["schedule"]["protocol"]),
        universe_size=int(data["schedule"]["universe_size"]),
        train=TrainConfig.from_dict(data["train"]),
        incremental_learning_rate=float(data["train"]["incremental_learning_rate"]),
        incremental_epochs=int(data["train"]["incremental_epochs"]),
        routing=RoutingConfig(tau=float(data["routing"]["tau"]),
                              arbitration=str(data["routing"]["arbitration"])),
    )
    return config


def load_datasets(config: ExperimentConfig) -> tuple[SegmentationDataset, SegmentationDataset]:
    """Training and held-out splits, generated or ingested per the config."""
    universe = tuple(range(config.universe_size))
    if config.dataset_dir:
        base = Path(config.dataset_dir)
        if not base.is_dir():
            raise DataError(f"dataset_dir {base} does not exist")
        train_ds = load_labelmap_dataset(base / "train", universe)
        eval_ds = load_labelmap_dataset(base / "eval", universe)
        return train_ds, eval_ds
    train_ds = generate_dataset(config.scene, config.num_train)
    eval_ds = generate_dataset(evaluation_spec(config.scene), config.num_eval)
    return train_ds, eval_ds


def _routing_config(config: ExperimentConfig, manifest: RunManifest) -> RoutingConfig:
    tau = manifest.routing_tau if manifest.routing_tau is not None else config.routing.tau
    return RoutingConfig(tau=tau, arbitration=config.routing.arbitration)


def _run_relative(paths: RunPaths, artifact: str | Path | None) -> str | None:
    """Manifests reference artifacts relative to their run directory."""
    if artifact is None:
        return None
    return str(Path(artifact).resolve().relative_to(paths.root.resolve()))


def create_or_resume_run(config: ExperimentConfig, method: str, run_id: str | None,
                         root: str | None) -> tuple[RunPaths, RunManifest]:
    if method not in METHODS:
        raise ConfigurationError(f"method must be one of {METHODS}, got {method!r}")
    run_id = run_id or f"{method}-{config.protocol}-seed{config.train.seed}"
    paths = RunPaths(output_root(root) / run_id)
    if paths.manifest.is_file():
        manifest = load_manifest(paths)
        if manifest.method != method:
            raise ConfigurationError(
                f"run {run_id} was created with method {manifest.method!r}, not {method!r}")
        if manifest.config != config.to_dict():
            raise ConfigurationError(
                f"run {run_id} exists with a different config; pick a new run id")
        return paths, manifest
    manifest = RunManifest(run_id=run_id, method=method, config=config.to_dict(),
                           schedule=config.schedule().to_dict())
    paths.root.mkdir(parents=True, exist_ok=True)
    save_manifest(paths, manifest)
    return paths, manifest


def run_base_step(config: ExperimentConfig, paths: RunPaths,
                  manifest: RunManifest) -> MetricsReport:
    """Step 0: train on base classes, evaluate, checkpoint, record."""
    schedule = config.schedule()
    train_ds, eval_ds = load_datasets(config)
    base_train = restrict_labels(train_ds, schedule.base_classes)
    model = build_model(config.model, config.train.seed)
    record = train_base(model, base_train, config.train,
                        checkpoint_path=paths.checkpoint(0), log_path=paths.log(0))
    report = evaluate_argmax(model, eval_ds, schedule.base_classes, (), 0)
    manifest.append_step(record.to_dict() | {"checkpoint": _run_relative(paths, record.checkpoint)},
                         report.to_dict(), _run_relative(paths, record.checkpoint),
                         file_sha256(record.checkpoint))
    save_manifest(paths, manifest)
    return report


def _load_step_state(paths: RunPaths, manifest: RunManifest, step: int):
    entry = manifest.step_entry(step)
    ckpt = verify_checkpoint_reference(paths, entry)
    return load_checkpoint(ckpt)


def run_incremental_step(config: ExperimentConfig, paths: RunPaths, manifest: RunManifest,
                         step: int) -> MetricsReport:
    """Execute one scheduled step with the manifest's method and record it."""
    schedule = config.schedule()
    if step < 1 or step > len(schedule.steps):
        raise ConfigurationError(f"step {step} outside schedule of {len(schedule.steps)} steps")
    done = manifest.completed_steps()
    if step in done:
        raise ConfigurationError(f"step {step} already recorded for run {manifest.run_id}")
    if sorted(range(step)) != [s for s in done if s < step] or (step - 1) not in done:
        raise ConfigurationError(f"prior steps incomplete for step {step}: have {done}")

    train_ds, eval_ds = load_datasets(config)
    novel_now = schedule.novel_ids(step)
    known = schedule.classes_through(step)
    novel_so_far = tuple(c for c in known if c not in schedule.base_classes)
    inc_config = config.incremental_train_config()

    if manifest.method == "sidecar":
        model, units, _ = _load_step_state(paths, manifest, step - 1)
        step_data = filter_for_step(train_ds, schedule, step)
        unit = build_incremental_unit(config.model, novel_now, step, config.train.seed,
                                      existing_units=tuple(units))
        record = train_incremental(model, unit, step_data, inc_config,
                                   prior_units=tuple(units),
                                   checkpoint_path=paths.checkpoint(step),
                                   log_path=paths.log(step),
                                   digest_path=paths.digest(step))
        units = [*units, unit]
        report = evaluate_routed(model, units, eval_ds, schedule.base_classes,
                                 novel_so_far, step, _routing_config(config, manifest))
        digest_ref = str(paths.digest(step))
    elif manifest.method == "finetune":
        model, _, _ = _load_step_state(paths, manifest, step - 1)
        step_data = filter_for_step(train_ds, schedule, step)
        record = train_finetune_baseline(model, step_data, inc_config, novel_now,
                                         checkpoint_path=paths.checkpoint(step),
                                         log_path=paths.log(step))
        report = evaluate_argmax(model, eval_ds, schedule.base_classes, novel_so_far, step)
        digest_ref = None
    else:  # joint: retrain from scratch on everything annotated so far
        accumulated = restrict_labels(train_ds, known)
        model, record = train_joint_baseline(config.model, [accumulated], config.train,
                                             checkpoint_path=paths.checkpoint(step),
                                             log_path=paths.log(step))
        record.step_index = step
        record.classes_added = tuple(novel_now)
        report = evaluate_argmax(model, eval_ds, schedule.base_classes, novel_so_far, step)
        digest_ref = None

    checkpoint_ref = _run_relative(paths, record.checkpoint)
    manifest.append_step(record.to_dict() | {"checkpoint": checkpoint_ref},
                         report.to_dict(), checkpoint_ref,
                         file_sha256(record.checkpoint),
                         _run_relative(paths, digest_ref))
    save_manifest(paths, manifest)
    return report


def run_protocol(config: ExperimentConfig, method: str, run_id: str | None = None,
                 root: str | None = None) -> tuple[RunPaths, RunManifest]:
    """Base phase plus every scheduled step, resuming past completed work."""
    paths, manifest = create_or_resume_run(config, method, run_id, root)
    with RunLock(paths.root):
        done = manifest.completed_steps()
        if 0 not in done:
            run_base_step(config, paths, manifest)
        for step in range(1, len(config.schedule().steps) + 1):
            if step not in manifest.completed_steps():
                run_incremental_step(config, paths, manifest, step)
    return paths, manifest


def run_tau_sweep(config: ExperimentConfig, paths: RunPaths, manifest: RunManifest,
                  step: int | None = None, grid=DEFAULT_TAU_GRID,
                  fixed_tau: float | None = None) -> dict:
    """Sweep thresholds for a trained unit, record tau* (or the forced tau).

    Returns the sweep summary that was stored in the manifest.
    """
    if manifest.method != "sidecar":
        raise ConfigurationError("tau sweeps require a sidecar run with trained units")
    done = [s for s in manifest.completed_steps() if s >= 1]
    if not done:
        raise ConfigurationError("no trained incremental unit; run at least one step first")
    step = done[-1] if step is None else step
    if step not in done:
        raise ConfigurationError(f"run has no completed incremental step {step}")

    model, units, _ = _load_step_state(paths, manifest, step)
    unit = next(u for u in units if u.step_index == step)
    _, eval_ds = load_datasets(config)
    class_id = unit.novel_class_ids[0]
    scores, gt = novel_class_scores(model, unit, eval_ds, class_id)
    points, tau_star = sweep_threshold(scores, gt, grid)
    roc, auc = roc_and_auc(scores, gt)

    chosen = float(fixed_tau) if fixed_tau is not None else float(tau_star)
    summary = {
        "step": step,
        "class_id": int(class_id),
        "grid": [p.tau for p in points],
        "iou": [p.iou for p in points],
        "precision": [p.precision for p in points],
        "recall": [p.recall for p in points],
        "f1": [p.f1 for p in points],
        "tau_star": float(tau_star),
        "chosen_tau": chosen,
        "auc": float(auc),
        "roc": [[float(a), float(b)] for a, b in roc],
    }
    manifest.sweeps[str(step)] = summary
    manifest.routing_tau = chosen
    save_manifest(paths, manifest)
    return summary


def run_ablation(config: ExperimentConfig, root: str | None = None,
                 run_prefix: str = "ablate") -> list[dict]:
    """Train the protocol once per connection point; return table rows.

    The base phase does not depend on the connection point, so all three
    runs share an identical frozen base and step-0 metrics.
    """
    rows = []
    for connection in ("detail", "context", "boundary"):
        variant = replace(config, model=replace(config.model, connection_point=connection))
        paths, manifest = run_protocol(variant, "sidecar",
                                       run_id=f"{run_prefix}-{connection}", root=root)
        step0 = manifest.step_entry(0)["metrics"]
        final = manifest.step_entry(manifest.completed_steps()[-1])["metrics"]
        rows.append({
            "connection_point": connection,
            "baseline_miou": step0["overall_miou"],
            "base_miou": final["base_miou"],
            "overall_miou": final["overall_miou"],
            "run_id": manifest.run_id,
        })
    return rows


def trajectory_from_manifest(manifest: RunManifest) -> list[MetricsReport]:
    return [MetricsReport.from_dict(entry["metrics"]) for entry in manifest.steps]
