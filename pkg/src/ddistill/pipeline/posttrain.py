"""Soft-label generation and student training on a distilled set."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .. import models as M
from .. import tensor as T
from ..augment import crop_resize, sample_crops
from ..data import LabeledImageSet
from ..optim import LRSchedule
from ..tensor import Tensor
from .artifacts import ExperimentReport, SoftLabelSet, SyntheticDataset
from .common import check_finite, evaluate, make_optimizer

ViewHook = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class PostTrainRecipe:
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-2
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    epochs: int = 300
    schedule: str = "cosine"
    crop_min: float = 0.08
    crop_max: float = 1.0
    flip: bool = True
    temperature: float = 1.0
    eval_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.crop_min <= self.crop_max <= 1:
            raise ValueError(f"need 0 < crop_min <= crop_max <= 1, got ({self.crop_min}, {self.crop_max})")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def relabel(teacher: M.ModelCheckpoint, synth: SyntheticDataset, recipe: PostTrainRecipe, seed: int, batch_size: int = 500) -> SoftLabelSet:
    """Pre-generate every epoch's crop boxes and the teacher's softmax on those exact views."""
    if synth.shape != teacher.spec.input_shape:
        raise ValueError(f"synthetic images {synth.shape} do not fit teacher input {teacher.spec.input_shape}")
    if len(synth) == 0:
        raise ValueError("relabel: empty synthetic set")
    _, H, W = synth.shape
    N = len(synth)
    dtype = T.get_dtype()
    crops = np.zeros((recipe.epochs, N, 5), dtype=np.int32)
    probs = np.zeros((recipe.epochs, N, teacher.spec.num_classes), dtype=np.float32)
    flip_prob = 0.5 if recipe.flip else 0.0
    for e in range(recipe.epochs):
        rng = np.random.default_rng([seed, 7, e])
        boxes = sample_crops(rng, N, recipe.crop_min, recipe.crop_max, (3 / 4, 4 / 3), (H, W), flip_prob)
        crops[e] = [b.as_box() for b in boxes]
        with T.no_grad():
            for i in range(0, N, batch_size):
                views = crop_resize(Tensor(synth.images[i : i + batch_size], dtype=dtype), boxes[i : i + batch_size], (H, W))
                logits, _ = M.forward(teacher, views, mode="eval")
                probs[e, i : i + batch_size] = T.softmax_np(logits.data.astype(np.float64) / recipe.temperature, axis=1)
    # renormalise after the float32 cast so rows sum to one to float32 precision
    probs /= probs.sum(axis=2, keepdims=True)
    return SoftLabelSet(
        crops, probs, teacher.fingerprint(), recipe.temperature, synth.digest(),
        {"seed": seed, "crop_min": recipe.crop_min, "crop_max": recipe.crop_max, "flip": recipe.flip},
    )


def generalization_gap(teacher: M.ModelCheckpoint, student: M.ModelCheckpoint, val_set: LabeledImageSet, classes=None) -> float:
    """Largest per-sample cross-entropy difference between teacher and student on the validation set."""
    if classes is not None:
        val_set = val_set.restrict_classes(classes)
    x = val_set.normalized()
    ce_t = M.per_sample_cross_entropy(M.predict(teacher, x).astype(np.float64), val_set.labels)
    ce_s = M.per_sample_cross_entropy(M.predict(student, x).astype(np.float64), val_set.labels)
    return float(np.max(np.abs(ce_t - ce_s)))


def posttrain(
    synth: SyntheticDataset,
    soft: SoftLabelSet,
    spec: M.ModelSpec,
    recipe: PostTrainRecipe,
    seed: int,
    val_set: LabeledImageSet,
    teacher: M.ModelCheckpoint | None = None,
    eval_classes: Sequence[int] | None = None,
    view_hook: ViewHook | None = None,
    run_id: str = "posttrain",
    log=None,
) -> tuple[M.ModelCheckpoint, ExperimentReport]:
    """Train a fresh student on the distilled images, replaying the stored crops and soft labels.

    Accuracy is measured on the real ``val_set`` (optionally only over
    ``eval_classes``). With a ``teacher`` the report also carries the
    accuracy gap and the largest per-sample loss gap against it.
    """
    if len(synth) == 0:
        raise ValueError("posttrain: empty synthetic set")
    if soft.epochs < recipe.epochs or soft.crops.shape[1] != len(synth):
        raise ValueError(f"soft labels cover {soft.epochs} epochs x {soft.crops.shape[1]} images, need {recipe.epochs} x {len(synth)}")
    if synth.shape != spec.input_shape:
        raise ValueError(f"synthetic images {synth.shape} do not fit student input {spec.input_shape}")
    if soft.probs.shape[2] != spec.num_classes:
        raise ValueError(f"soft labels have {soft.probs.shape[2]} classes, student has {spec.num_classes}")
    dtype = T.get_dtype()
    _, H, W = synth.shape
    N = len(synth)
    student = M.build(spec, seed)
    opt = make_optimizer(recipe.optimizer, student.parameters(), recipe.lr, recipe.weight_decay, recipe.momentum, recipe.betas)
    steps_per_epoch = -(-N // recipe.batch_size)
    lr_at = LRSchedule(recipe.lr, steps_per_epoch * recipe.epochs, recipe.schedule, step_size=max(1, steps_per_epoch * recipe.epochs // 3))
    report = ExperimentReport()
    history: list[float] = []
    t0 = time.perf_counter()
    step = 0
    for e in range(recipe.epochs):
        order = np.random.default_rng([seed, 11, e]).permutation(N)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
            boxes = soft.crop_params(e, idx)
            if view_hook is not None:
                view_hook(e, idx, np.asarray([p.as_box() for p in boxes], dtype=np.int32))
            views = crop_resize(Tensor(synth.images[idx], dtype=dtype), boxes, (H, W))
            logits, _ = M.forward(student, views, mode="train")
            loss = M.soft_cross_entropy(logits, soft.probs[e, idx].astype(dtype), recipe.temperature)
            check_finite("posttrain", loss.item(), history)
            student.zero_grad()
            loss.backward()
            opt.lr = lr_at(step)
            opt.step()
            running += loss.item() * len(idx)
            step += 1
        report.add(run_id, seed, "train_loss", e, running / N)
        if recipe.eval_every and (e + 1) % recipe.eval_every == 0 and e + 1 < recipe.epochs:
            report.add(run_id, seed, "top1", e, evaluate(student, val_set, eval_classes))
        if log is not None:
            log(f"posttrain epoch {e + 1}/{recipe.epochs} loss {running / N:.4f}")
    top1 = evaluate(student, val_set, eval_classes)
    report.add(run_id, seed, "top1", recipe.epochs - 1, top1)
    report.add(run_id, seed, "top1_final", recipe.epochs, top1)
    if teacher is not None:
        t_top1 = evaluate(teacher, val_set, eval_classes)
        report.add(run_id, seed, "top1_teacher", recipe.epochs, t_top1)
        report.add(run_id, seed, "gap_top1", recipe.epochs, t_top1 - top1)
        report.add(run_id, seed, "gap_sup", recipe.epochs, generalization_gap(teacher, student, val_set, eval_classes))
    report.add(run_id, seed, "wall_clock", recipe.epochs, time.perf_counter() - t0)
    student.meta.update({"stage": "posttrain", "seed": seed, "recipe": recipe.to_json(), "top1": top1, "synth_digest": synth.digest()})
    return student, report
