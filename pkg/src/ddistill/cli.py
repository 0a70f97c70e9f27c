"""``ddistill`` command line: one entry point per pipeline stage.

Artifacts land in ``<output_dir>/<stage>/<config hash>/`` next to a copy of
the resolved configuration and a ``DONE`` marker. Exit codes: 0 success,
1 invalid configuration or inputs, 2 failure while running a stage.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import models as M
from . import tensor as T
from .augment import write_schedule_csv
from .config import ConfigError, RunConfig, apply_overrides, build_run_config, load_run_config
from .data import incremental_split, random_real_subset
from .pipeline import experiments as X
from .pipeline.artifacts import ExperimentReport, SoftLabelSet, SyntheticDataset, read_report_csv
from .pipeline.common import evaluate
from .pipeline.posttrain import posttrain, relabel
from .pipeline.recover import recover
from .pipeline.squeeze import squeeze

STAGES = ("squeeze", "recover", "relabel", "posttrain", "eval", "continual", "ablate", "report")
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("ddistill")


class ValidationError(Exception):
    pass


class ArtifactDir:
    """Exclusive, content-addressed output directory of one stage run."""

    def __init__(self, path: Path, payload: dict):
        self.path = path
        self.payload = payload

    @property
    def done(self) -> bool:
        return (self.path / "DONE").exists()

    def check_collision(self) -> None:
        stored = self.path / "config.json"
        if stored.exists() and json.loads(stored.read_text()) != self.payload:
            raise ValidationError(f"{self.path}: existing artifacts were produced by a different configuration; refusing to overwrite")

    def begin(self, sections: dict) -> None:
        if self.path.exists():
            for child in self.path.iterdir():
                if child.is_dir():
                    shutil.rmtree(child)
                else:
                    child.unlink()
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {self.path}: {exc}") from None
        if not os.access(self.path, os.W_OK):
            raise ValidationError(f"output directory {self.path} is not writable")
        (self.path / "config.json").write_text(json.dumps(self.payload, indent=2, sort_keys=True) + "\n")
        with open(self.path / "config.ini", "w") as fh:
            for name, items in sections.items():
                fh.write(f"[{name}]\n")
                for k, v in items.items():
                    fh.write(f"{k} = {v}\n")
                fh.write("\n")

    def finish(self) -> None:
        (self.path / "DONE").write_text(time.strftime("%Y-%m-%dT%H:%M:%S") + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{what} not found: {path}")
    return path


def _resolve(cfg: RunConfig, value: str, stage: str, name: str, what: str) -> Path:
    path = cfg.stage_dir(stage) / name if value == "auto" else Path(value)
    return _require(path, what)


def _spec_for(cfg: RunConfig, train, arch: str | None = None) -> M.ModelSpec:
    return cfg.model_spec(train.shape, arch)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def validate_stage(stage: str, cfg: RunConfig) -> None:
    """Check every input file a stage will read before any work starts."""
    for p in cfg.data.required_paths():
        _require(Path(p) if p else Path("<unset>"), "dataset file")
    if stage == "recover":
        _resolve(cfg, cfg.teacher, "squeeze", "teacher.ckpt", "teacher checkpoint")
    elif stage == "relabel":
        _resolve(cfg, cfg.relabel_teacher, "squeeze", "teacher.ckpt", "teacher checkpoint")
        _resolve(cfg, cfg.synth, "recover", "synth", "synthetic dataset")
    elif stage == "posttrain":
        _resolve(cfg, cfg.synth, "recover", "synth", "synthetic dataset")
        _resolve(cfg, cfg.soft, "relabel", "soft", "soft-label set")
    elif stage == "eval":
        _resolve(cfg, cfg.checkpoint, "posttrain", "student.ckpt", "student checkpoint")
    elif stage in ("continual", "ablate"):
        _resolve(cfg, cfg.teacher, "squeeze", "teacher.ckpt", "teacher checkpoint")


def run_squeeze(cfg: RunConfig, out: Path) -> None:
    train, val = cfg.data.load()
    model = squeeze(cfg.squeeze, train, _spec_for(cfg, train), cfg.seed, val, log=log.info)
    M.save_checkpoint(model, out / "teacher.ckpt")
    rep = ExperimentReport(summary={"stage": "squeeze", "val_top1": model.meta.get("val_top1"), "fingerprint": model.fingerprint()})
    for e, v in enumerate(model.meta["train_loss"]):
        rep.add("teacher", cfg.seed, "train_loss", e, v)
    rep.add("teacher", cfg.seed, "top1_final", cfg.squeeze.epochs, model.meta["val_top1"])
    rep.save(out)


def run_recover(cfg: RunConfig, out: Path) -> None:
    teacher = M.load_checkpoint(_resolve(cfg, cfg.teacher, "squeeze", "teacher.ckpt", "teacher checkpoint"), expect=cfg.arch)
    synth = recover(teacher, cfg.recovery, cfg.seed, log=log.info)
    synth.config_hash = cfg.stage_hash("recover")
    synth.save(out / "synth")
    rep = ExperimentReport(summary={"stage": "recover", "digest": synth.digest(), "teacher": teacher.fingerprint()})
    for b, trace in enumerate(synth.trace):
        for s, (total, ce, reg) in enumerate(trace):
            rep.add(f"batch{b}", cfg.seed, "loss", s, total)
            rep.add(f"batch{b}", cfg.seed, "ce", s, ce)
            rep.add(f"batch{b}", cfg.seed, "r_reg", s, reg)
    rep.save(out)
    write_schedule_csv(out / "schedule_curve.csv", {cfg.recovery.curriculum.scheduler: cfg.recovery.curriculum})


def run_relabel(cfg: RunConfig, out: Path) -> None:
    teacher = M.load_checkpoint(_resolve(cfg, cfg.relabel_teacher, "squeeze", "teacher.ckpt", "teacher checkpoint"))
    synth = SyntheticDataset.load(_resolve(cfg, cfg.synth, "recover", "synth", "synthetic dataset"))
    relabel(teacher, synth, cfg.posttrain, cfg.seed).save(out / "soft")


def run_posttrain(cfg: RunConfig, out: Path) -> None:
    _, val = cfg.data.load()
    synth = SyntheticDataset.load(_resolve(cfg, cfg.synth, "recover", "synth", "synthetic dataset"))
    soft = SoftLabelSet.load(_resolve(cfg, cfg.soft, "relabel", "soft", "soft-label set"))
    teacher_path = cfg.stage_dir("squeeze") / "teacher.ckpt" if cfg.teacher == "auto" else Path(cfg.teacher)
    teacher = M.load_checkpoint(teacher_path) if teacher_path.exists() else None
    spec = M.ModelSpec(cfg.student_arch or cfg.arch, synth.shape, synth.num_classes, cfg.width)
    student, rep = posttrain(synth, soft, spec, cfg.posttrain, cfg.seed, val, teacher=teacher, log=log.info)
    M.save_checkpoint(student, out / "student.ckpt")
    rep.summary = {"stage": "posttrain", "top1": student.meta["top1"], "synth_digest": synth.digest()}
    rep.save(out)


def run_eval(cfg: RunConfig, out: Path) -> None:
    _, val = cfg.data.load()
    path = _resolve(cfg, cfg.checkpoint, "posttrain", "student.ckpt", "student checkpoint")
    model = M.load_checkpoint(path)
    top1 = evaluate(model, val)
    rep = ExperimentReport(summary={"stage": "eval", "checkpoint": str(path), "top1": top1})
    rep.add("eval", cfg.seed, "top1_final", 0, top1)
    rep.save(out)


def run_continual(cfg: RunConfig, out: Path) -> None:
    train, val = cfg.data.load()
    teacher = M.load_checkpoint(_resolve(cfg, cfg.teacher, "squeeze", "teacher.ckpt", "teacher checkpoint"))
    schedule = incremental_split(cfg.data.num_classes, cfg.continual.steps, cfg.continual.split_seed)
    spec = M.ModelSpec(cfg.student_arch or cfg.arch, train.shape, cfg.data.num_classes, cfg.width)
    reports = []
    memory = recover(teacher, cfg.recovery, cfg.seed, log=log.info)
    memory.save(out / "memory")
    reports.append(X.continual_run(memory, schedule, spec, cfg.posttrain, cfg.continual.seeds, val, teacher, "distilled"))
    if cfg.continual.baseline:
        real = SyntheticDataset.from_real(random_real_subset(train, cfg.recovery.ipc, cfg.seed), cfg.recovery.ipc)
        reports.append(X.continual_run(real, schedule, spec, cfg.posttrain, cfg.continual.seeds, val, teacher, "random_real"))
    merged = ExperimentReport(summary={"stage": "continual", "schedule": [list(s) for s in schedule.steps],
                                       "cumulative_classes": schedule.cumulative_counts()})
    for r in reports:
        merged.extend(r)
    merged.save(out)
    X.write_continual_csv(out / "continual_curves.csv", reports)


def run_ablate(cfg: RunConfig, out: Path, kind: str) -> None:
    train, val = cfg.data.load()
    teacher = M.load_checkpoint(_resolve(cfg, cfg.teacher, "squeeze", "teacher.ckpt", "teacher checkpoint"))
    spec = M.ModelSpec(cfg.student_arch or cfg.arch, train.shape, cfg.data.num_classes, cfg.width)
    base = X.AblationBase(teacher, cfg.recovery, cfg.posttrain, spec, val)
    report = X.ablate(kind, cfg.ablate.grid(kind), base, cfg.ablate.seeds, log=log.info)
    X.write_ablation_outputs(out, report)


def run_report(root: Path, out: Path) -> None:
    """Aggregate every stage report under ``root`` into summary tables; stage artifacts are only read."""
    rows = []
    cells: dict[tuple, list[float]] = defaultdict(list)
    curves = []
    for csv_path in sorted(root.glob("*/*/report.csv")):
        stage, digest = csv_path.parent.parent.name, csv_path.parent.name
        for run_id, seed, metric, step, value in read_report_csv(csv_path):
            if metric.startswith("top1_final") or metric in ("gap_top1", "gap_sup", "top1_step"):
                cells[(stage, digest, run_id, metric, step)].append(value)
        for sched in sorted(csv_path.parent.glob("schedule_curve*.csv")):
            curves.append((stage, digest, sched))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "config_hash", "run_id", "metric", "step", "mean", "std", "n"])
        for (stage, digest, run_id, metric, step), vals in sorted(cells.items()):
            arr = np.asarray(vals)
            writer.writerow([stage, digest, run_id, metric, step, f"{arr.mean():.6f}", f"{arr.std():.6f}", len(arr)])
            rows.append(1)
    with open(out / "schedule_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "config_hash", "curve", "step", "alpha"])
        for stage, digest, path in curves:
            with open(path, newline="") as src:
                reader = csv.reader(src)
                next(reader)
                for curve, step, alpha in reader:
                    writer.writerow([stage, digest, curve, step, alpha])
    log.info("report: %d summary rows, %d curve files", len(rows), len(curves))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ddistill", description="Dataset distillation: squeeze, recover, relabel, post-train.")
    ap.add_argument("stage", help=f"one of {', '.join(STAGES)}")
    ap.add_argument("kind", nargs="?", help="ablation kind for the ablate stage (ctl, rcl, scheduler, batch_size, lower_bound)")
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config value, e.g. --set recover.iterations=200 (repeatable)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--force", action="store_true", help="recompute even if the artifact directory is complete")
    ap.add_argument("--precision", choices=("f32", "f64"))
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        if args.stage not in STAGES:
            raise ValidationError(f"unknown stage {args.stage!r}; expected one of {', '.join(STAGES)}")
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.threads is not None:
            overrides.append(f"run.threads={args.threads}")
        if args.precision is not None:
            overrides.append(f"run.precision={args.precision}")
        if args.config is None and args.stage != "report":
            raise ValidationError("--config is required")
        if args.config is not None:
            cfg = load_run_config(args.config, overrides)
        else:
            cfg = build_run_config(apply_overrides({}, overrides))
        if os.environ.get("DDISTILL_OUT"):
            cfg.output_dir = os.environ["DDISTILL_OUT"]
        if args.stage == "ablate":
            if args.kind not in X.ABLATIONS:
                raise ValidationError(f"ablate needs a kind from {X.ABLATIONS}, got {args.kind!r}")
        elif args.kind is not None:
            raise ValidationError(f"stage {args.stage} takes no positional kind")
        if args.stage == "report":
            root = Path(cfg.output_dir)
            _require(root, "output root")
            with threadpool_limits(cfg.threads):
                run_report(root, root / "report")
            print(root / "report")
            return EXIT_OK
        validate_stage(args.stage, cfg)
        suffix = args.kind or ""
        art = ArtifactDir(cfg.stage_dir(args.stage, suffix), cfg.stage_payload(args.stage) | ({"kind": suffix} if suffix else {}))
        art.check_collision()
        if art.done and not args.force:
            print(f"{art.path} (up to date, skipped)")
            return EXIT_OK
        art.begin(cfg.sections)
    except (ValidationError, ConfigError, M.SpecMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    runners = {
        "squeeze": run_squeeze, "recover": run_recover, "relabel": run_relabel, "posttrain": run_posttrain,
        "eval": run_eval, "continual": run_continual,
    }
    try:
        with threadpool_limits(cfg.threads), T.precision(cfg.precision):
            if args.stage == "ablate":
                run_ablate(cfg, art.path, args.kind)
            else:
                runners[args.stage](cfg, art.path)
    except (ValidationError, M.SpecMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to the runtime exit code
        log.exception("stage %s failed", args.stage)
        print(f"error: {args.stage} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    art.finish()
    print(art.path)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
