"""Multi-run experiments: cross-model transfer, class-incremental replay and ablation grids."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import models as M
from ..augment import CurriculumConfig, ctl_bounds, write_schedule_csv
from ..data import ClassIncrementalSchedule, LabeledImageSet
from .artifacts import ExperimentReport, SyntheticDataset
from .posttrain import PostTrainRecipe, posttrain, relabel
from .recover import RecoveryConfig, recover

ABLATIONS = ("ctl", "rcl", "scheduler", "batch_size", "lower_bound")


def distill_and_evaluate(
    teacher: M.ModelCheckpoint,
    rcfg: RecoveryConfig,
    spec: M.ModelSpec,
    recipe: PostTrainRecipe,
    seed: int,
    val_set: LabeledImageSet,
    run_id: str,
    synth: SyntheticDataset | None = None,
) -> tuple[SyntheticDataset, ExperimentReport]:
    """recover -> relabel -> posttrain for one seed; ``synth`` skips the recovery."""
    if synth is None:
        synth = recover(teacher, rcfg, seed)
    soft = relabel(teacher, synth, recipe, seed)
    _, report = posttrain(synth, soft, spec, recipe, seed, val_set, teacher=teacher, run_id=run_id)
    if synth.trace is not None:
        for b, trace in enumerate(synth.trace):
            report.add(run_id, seed, f"recover_loss_first_b{b}", 0, trace[0, 0])
            report.add(run_id, seed, f"recover_loss_last_b{b}", len(trace) - 1, trace[-1, 0])
    return synth, report


# ---------------------------------------------------------------------------
# Cross-model transfer
# ---------------------------------------------------------------------------


def cross_model_matrix(
    synths: dict[str, tuple[SyntheticDataset, M.ModelCheckpoint]],
    specs: dict[str, M.ModelSpec],
    recipe: PostTrainRecipe,
    seeds: Sequence[int],
    val_set: LabeledImageSet,
) -> ExperimentReport:
    """Post-train every validation architecture on every recovered set.

    ``synths`` maps a recovery-model label to its distilled set and the model
    used to relabel it. The summary holds the mean/std matrix.
    """
    if not synths:
        raise ValueError("cross_model_matrix: need at least one synthetic set")
    if len(specs) < 2:
        raise ValueError("cross_model_matrix: need at least two validation specs")
    report = ExperimentReport()
    matrix: dict[str, dict[str, dict]] = {}
    for rec_label, (synth, relabeler) in synths.items():
        matrix[rec_label] = {}
        for val_label, spec in specs.items():
            run_id = f"{rec_label}->{val_label}"
            for seed in seeds:
                soft = relabel(relabeler, synth, recipe, seed)
                _, rep = posttrain(synth, soft, spec, recipe, seed, val_set, run_id=run_id)
                report.extend(rep)
            vals = np.asarray(report.values("top1_final", run_id))
            matrix[rec_label][val_label] = {
                "mean": float(vals.mean()),
                "std": float(vals.std()),
                "runs": len(vals),
                "relabel_model": relabeler.spec.arch,
                "relabel_fingerprint": relabeler.fingerprint(),
            }
    report.summary = {"kind": "cross_model", "matrix": matrix, "seeds": list(seeds)}
    return report


def write_matrix_csv(path, report: ExperimentReport) -> None:
    matrix = report.summary["matrix"]
    cols = list(next(iter(matrix.values())))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recovery_model"] + cols + [f"relabel:{c}" for c in cols])
        for rec, row in matrix.items():
            cells = [f"{row[c]['mean']:.4f}+-{row[c]['std']:.4f}" for c in cols]
            writer.writerow([rec] + cells + [row[c]["relabel_model"] for c in cols])


# ---------------------------------------------------------------------------
# Class-incremental replay
# ---------------------------------------------------------------------------


def continual_run(
    memory: SyntheticDataset,
    schedule: ClassIncrementalSchedule,
    spec: M.ModelSpec,
    recipe: PostTrainRecipe,
    seeds: Sequence[int],
    val_set: LabeledImageSet,
    teacher: M.ModelCheckpoint,
    label: str = "distilled",
) -> ExperimentReport:
    """At step i train a fresh student on the replay memory of all classes seen so far.

    The memory is relabelled by ``teacher`` and accuracy is taken on the real
    validation images of the seen classes, predicting among those classes only.
    """
    scheduled = set(c for step in schedule.steps for c in step)
    missing = scheduled - set(memory.classes)
    if missing:
        raise ValueError(f"continual_run: memory lacks scheduled classes {sorted(missing)}")
    if max(scheduled) >= spec.num_classes:
        raise ValueError("continual_run: schedule references classes beyond the model head")
    report = ExperimentReport()
    for seed in seeds:
        for i in range(len(schedule)):
            seen = schedule.seen(i)
            mem = memory.restrict_classes(seen)
            soft = relabel(teacher, mem, recipe, seed)
            _, rep = posttrain(mem, soft, spec, recipe, seed, val_set, eval_classes=seen, run_id=label)
            top1 = rep.values("top1_final")[0]
            report.add(label, seed, "top1_step", i, top1)
            report.add(label, seed, "classes_seen", i, len(seen))
    report.summary = {"kind": "continual", "label": label, "cumulative_classes": schedule.cumulative_counts(), "seeds": list(seeds)}
    return report


def write_continual_csv(path, reports: Sequence[ExperimentReport]) -> None:
    """Per-step curves: one row per (memory kind, seed, step)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["memory", "seed", "step", "classes_seen", "top1"])
        for rep in reports:
            counts = {(r, seed, s): v for r, seed, m, s, v in rep.rows if m == "classes_seen"}
            for r, seed, m, s, v in rep.rows:
                if m == "top1_step":
                    writer.writerow([r, seed, s, int(counts[(r, seed, s)]), f"{v:.6f}"])


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass
class AblationBase:
    teacher: M.ModelCheckpoint
    recovery: RecoveryConfig
    recipe: PostTrainRecipe
    spec: M.ModelSpec
    val_set: LabeledImageSet


def _with_curriculum(rcfg: RecoveryConfig, **changes) -> RecoveryConfig:
    return replace(rcfg, curriculum=replace(rcfg.curriculum, **changes))


def ablation_points(kind: str, grid: Sequence, base: RecoveryConfig) -> list[tuple[str, RecoveryConfig, dict]]:
    """Expand a grid into (run id, recovery config, post-train overrides)."""
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
    if not grid:
        raise ValueError("ablation grid is empty")
    cur = base.curriculum
    points = []
    if kind == "ctl":
        for item in grid:
            mode, alpha = item if isinstance(item, (tuple, list)) else ("easy", item)
            lo, hi = ctl_bounds(mode, float(alpha), cur.beta_l, cur.beta_u)
            points.append((f"ctl_{mode}_{float(alpha):g}", _with_curriculum(base, scheduler="constant", beta_l=lo, beta_u=hi), {}))
    elif kind == "rcl":
        for m in grid:
            points.append((f"reverse_step_{float(m):g}", _with_curriculum(base, scheduler="reverse_step", milestone=float(m)), {}))
        points.append(("cosine_1", _with_curriculum(base, scheduler="cosine", milestone=1.0), {}))
    elif kind == "scheduler":
        for sched, m in grid:
            points.append((f"{sched}_{float(m):g}", _with_curriculum(base, scheduler=sched, milestone=float(m)), {}))
    elif kind == "lower_bound":
        for lo in grid:
            points.append((f"beta_l_{float(lo):g}", _with_curriculum(base, beta_l=float(lo)), {}))
    else:
        for bs in grid:
            points.append((f"batch_{int(bs)}", base, {"batch_size": int(bs)}))
    return points


def ablate(kind: str, grid: Sequence, base: AblationBase, seeds: Sequence[int], log=None) -> ExperimentReport:
    """Run recover + relabel + posttrain for every grid point and seed.

    Grid points sharing a recovery config (the batch-size sweep) reuse one
    synthetic set per seed. ``rcl`` always adds a cosine reference run.
    """
    points = ablation_points(kind, grid, base.recovery)
    report = ExperimentReport()
    cache: dict[tuple[str, int], SyntheticDataset] = {}
    curves: dict[str, CurriculumConfig] = {}
    for run_id, rcfg, overrides in points:
        curves[run_id] = rcfg.curriculum
        recipe = replace(base.recipe, **overrides)
        for seed in seeds:
            key = (repr(rcfg.to_json()), seed)
            synth, rep = distill_and_evaluate(base.teacher, rcfg, base.spec, recipe, seed, base.val_set, run_id, cache.get(key))
            cache[key] = synth
            report.extend(rep)
            if log is not None:
                log(f"ablate {kind} {run_id} seed {seed}: top1 {rep.values('top1_final')[0]:.4f}")
    agg = report.aggregate("top1_final")
    report.summary = {
        "kind": kind,
        "seeds": list(seeds),
        "cells": {r: {"mean": m, "std": s, "runs": n} for r, (m, s, n) in agg.items()},
        "curves": {r: c.to_json() for r, c in curves.items()},
    }
    return report


def write_grid_csv(path, report: ExperimentReport) -> None:
    """One row per (grid point, seed) with the final student top-1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "seed", "top1"])
        for r, seed, m, _, v in report.rows:
            if m == "top1_final":
                writer.writerow([r, seed, f"{v:.6f}"])


def write_ablation_outputs(directory, report: ExperimentReport) -> Path:
    d = Path(directory)
    report.save(d)
    write_grid_csv(d / "grid.csv", report)
    curves = {r: CurriculumConfig.from_json(c) for r, c in report.summary["curves"].items()}
    write_schedule_csv(d / "schedule_curves.csv", curves, every=max(1, next(iter(curves.values())).total_steps // 100))
    return d
