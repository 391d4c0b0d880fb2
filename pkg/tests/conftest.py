"""Shared fixtures: deterministic mode and the synthetic benchmark run."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

import sidecarseg as ss
from sidecarseg.experiment import default_config_text, parse_experiment_config


@pytest.fixture(scope="session", autouse=True)
def _deterministic():
    ss.enable_deterministic_mode()


FAST_CONFIG = """\
[data]
num_train = 32
num_eval = 12

[train]
epochs = 10
incremental_epochs = 8
"""


@pytest.fixture(scope="session")
def fast_config_text() -> str:
    return FAST_CONFIG


@dataclass
class BenchmarkState:
    """One full run of the 6-base + 2-step benchmark with instrumentation."""

    config: object
    schedule: object
    train_ds: object
    eval_ds: object
    model: object
    units: list
    step_reports: list  # MetricsReport for steps 0, 1, 2 (routed)
    step_records: list  # StepRecord for steps 1, 2
    grad_samples: list  # per-batch max-abs frozen gradient, both steps
    base_logits_before: np.ndarray
    base_logits_after_step1: np.ndarray
    base_logits_final: np.ndarray
    step1_seconds: float
    total_seconds: float
    ft_reports: list  # MetricsReport for steps 0, 1, 2 (argmax)
    sweeps: dict  # step -> {points, tau_star, auc, class_id}
    frozen_verified: tuple  # (ok, first-mismatch) after step 1, vs pre-step digest


@pytest.fixture(scope="session")
def bench(tmp_path_factory) -> BenchmarkState:
    """Train the default benchmark once; most acceptance criteria read it."""
    work = tmp_path_factory.mktemp("bench")
    config = parse_experiment_config(default_config_text())
    schedule = config.schedule()
    train_ds = ss.generate_dataset(config.scene, config.num_train)
    eval_ds = ss.generate_dataset(ss.evaluation_spec(config.scene), config.num_eval)

    started = time.perf_counter()
    model = ss.build_model(config.model, config.train.seed)
    base_train = ss.restrict_labels(train_ds, schedule.base_classes)
    ss.train_base(model, base_train, config.train,
                  checkpoint_path=work / "base.ckpt")
    step_reports = [ss.evaluate_argmax(model, eval_ds, schedule.base_classes, (), 0)]

    held_out = eval_ds.images[:16]
    logits_before = np.stack([ss.forward_base(model, im)[0] for im in held_out])

    grad_samples: list[float] = []
    units: list = []
    step_records = []
    sweeps = {}
    grid = [round(0.05 * i, 2) for i in range(1, 20)]
    step1_seconds = 0.0
    inc_config = config.incremental_train_config()
    frozen_verified = (False, "never checked")
    for step in (1, 2):
        step_data = ss.filter_for_step(train_ds, schedule, step)
        unit = ss.build_incremental_unit(config.model, schedule.novel_ids(step), step,
                                         config.train.seed, existing_units=tuple(units))
        if step == 1:
            partition = ss.freeze_base(model, (*units, unit))
            pre_step_digest = ss.snapshot_frozen(model, (*units, unit), partition)
        t0 = time.perf_counter()
        record = ss.train_incremental(model, unit, step_data, inc_config,
                                      prior_units=tuple(units),
                                      grad_observer=grad_samples.append)
        if step == 1:
            step1_seconds = time.perf_counter() - t0
            frozen_verified = ss.verify_frozen(model, (unit,), partition, pre_step_digest)
            logits_after_step1 = np.stack(
                [ss.forward_base(model, im)[0] for im in held_out])
        units.append(unit)
        step_records.append(record)
        novel_so_far = tuple(c for c in schedule.classes_through(step)
                             if c not in schedule.base_classes)
        step_reports.append(
            ss.evaluate_routed(model, units, eval_ds, schedule.base_classes,
                               novel_so_far, step, config.routing))
        class_id = schedule.novel_ids(step)[0]
        scores, gt = ss.novel_class_scores(model, unit, eval_ds, class_id)
        points, tau_star = ss.sweep_threshold(scores, gt, grid)
        _, auc = ss.roc_and_auc(scores, gt)
        sweeps[step] = {"points": points, "tau_star": tau_star, "auc": auc,
                        "class_id": class_id}

    logits_final = np.stack([ss.forward_base(model, im)[0] for im in held_out])

    # fine-tuning baseline from the identical frozen starting point
    ft_model, _, _ = ss.load_checkpoint(work / "base.ckpt")
    ft_reports = [ss.evaluate_argmax(ft_model, eval_ds, schedule.base_classes, (), 0)]
    for step in (1, 2):
        step_data = ss.filter_for_step(train_ds, schedule, step)
        ss.train_finetune_baseline(ft_model, step_data, inc_config,
                                   schedule.novel_ids(step))
        novel_so_far = tuple(c for c in schedule.classes_through(step)
                             if c not in schedule.base_classes)
        ft_reports.append(ss.evaluate_argmax(ft_model, eval_ds, schedule.base_classes,
                                             novel_so_far, step))
    total_seconds = time.perf_counter() - started

    return BenchmarkState(
        config=config,
        schedule=schedule,
        train_ds=train_ds,
        eval_ds=eval_ds,
        model=model,
        units=units,
        step_reports=step_reports,
        step_records=step_records,
        grad_samples=grad_samples,
        base_logits_before=logits_before,
        base_logits_after_step1=logits_after_step1,
        base_logits_final=logits_final,
        step1_seconds=step1_seconds,
        total_seconds=total_seconds,
        ft_reports=ft_reports,
        sweeps=sweeps,
        frozen_verified=frozen_verified,
    )
