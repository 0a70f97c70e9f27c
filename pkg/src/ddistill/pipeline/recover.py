"""Image synthesis against a frozen teacher: classification loss plus BN-statistics matching."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .. import models as M
from .. import tensor as T
from ..augment import CurriculumConfig, crop_resize, min_crop_at, reverse_paste, sample_crops
from ..optim import AdamState, adam_step, cosine_lr
from ..tensor import Tensor
from .artifacts import SyntheticDataset
from .common import check_finite

GRAD_MODES = ("end_to_end", "paste_back")
TEACHER_NORMS = {"batch": "train", "running": "eval"}


@dataclass(frozen=True)
class RecoveryConfig:
    """Synthesis settings. ``curriculum.total_steps`` is kept equal to ``iterations``."""

    ipc: int = 10
    alpha_bn: float = 0.01
    lr: float = 0.25
    betas: tuple[float, float] = (0.5, 0.9)
    batch_size: int = 100
    iterations: int = 1000
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    classes: tuple[int, ...] | None = None
    init: str = "normal"
    grad_mode: str = "end_to_end"
    flip: bool = False
    teacher_norm: str = "running"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.classes is not None:
            object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if self.alpha_bn < 0:
            raise ValueError("alpha_bn must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1 or self.ipc < 1:
            raise ValueError("batch_size and ipc must be >= 1")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}")
        if self.teacher_norm not in TEACHER_NORMS:
            raise ValueError(f"teacher_norm must be one of {tuple(TEACHER_NORMS)}, got {self.teacher_norm!r}")
        if self.init != "normal":
            raise ValueError(f"unsupported init {self.init!r}; only 'normal' is implemented")
        if self.curriculum.total_steps != self.iterations:
            object.__setattr__(self, "curriculum", replace(self.curriculum, total_steps=self.iterations))

    def to_json(self) -> dict:
        return {
            "ipc": self.ipc,
            "alpha_bn": self.alpha_bn,
            "lr": self.lr,
            "betas": list(self.betas),
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "curriculum": self.curriculum.to_json(),
            "classes": None if self.classes is None else list(self.classes),
            "init": self.init,
            "grad_mode": self.grad_mode,
            "flip": self.flip,
            "teacher_norm": self.teacher_norm,
        }


def r_reg(snapshot: M.BatchStatsSnapshot, bn: list[M.BatchNormState]) -> Tensor:
    """Sum over BN layers of ||batch mean - running mean||_2 + ||batch var - running var||_2."""
    if len(snapshot) != len(bn):
        raise ValueError(f"r_reg: snapshot has {len(snapshot)} layers, model has {len(bn)} BN layers")
    total = None
    for mu, var, layer in zip(snapshot.means, snapshot.variances, bn):
        rm = Tensor(layer.running_mean, dtype=mu.dtype)
        rv = Tensor(layer.running_var, dtype=var.dtype)
        term = T.add(T.l2_norm(T.sub(mu, rm)), T.l2_norm(T.sub(var, rv)))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("r_reg: model has no BN layers")
    return total


def class_plan(num_classes: int, ipc: int, classes=None) -> np.ndarray:
    """Target labels in synthesis order: every class once per round, ``ipc`` rounds."""
    cls = np.arange(num_classes) if classes is None else np.asarray(classes, dtype=np.int64)
    if cls.size == 0 or cls.min() < 0 or cls.max() >= num_classes:
        raise ValueError(f"class plan {cls.tolist()} outside [0, {num_classes})")
    return np.tile(cls, ipc)


def recovery_loss(
    teacher: M.ModelCheckpoint, views: Tensor, targets: np.ndarray, alpha_bn: float, teacher_norm: str = "running"
):
    """Returns (total, ce, reg) for a batch of augmented views.

    ``teacher_norm="batch"`` normalizes the synthetic batch by its own statistics,
    ``"running"`` by the teacher's running statistics. The teacher is frozen
    either way, so no parameter or buffer changes.
    """
    mode = TEACHER_NORMS[teacher_norm]
    logits, snap = M.forward(teacher, views, mode=mode, capture_bn=True, frozen=True)
    ce = M.soft_cross_entropy(logits, targets)
    reg = r_reg(snap, teacher.bn)
    return T.add(ce, T.mul(reg, alpha_bn)), ce, reg


def _recover_batch(teacher, cfg: RecoveryConfig, labels: np.ndarray, seed: int, batch_idx: int):
    C, H, W = teacher.spec.input_shape
    dtype = T.get_dtype()
    rng = np.random.default_rng([seed, batch_idx])
    n = len(labels)
    x = Tensor(rng.standard_normal((n, C, H, W)).astype(dtype), requires_grad=True)
    targets = M.one_hot(labels, teacher.spec.num_classes, dtype)
    cur = cfg.curriculum
    S = cfg.iterations
    state = AdamState.zeros_like(x, cfg.betas)
    trace = np.zeros((S, 3))
    history: list[float] = []
    flip_prob = 0.5 if cfg.flip else 0.0
    for s in range(S):
        alpha = min_crop_at(cur, s)
        crops = sample_crops(rng, n, alpha, cur.beta_u, cur.aspect, (H, W), flip_prob)
        lr = cosine_lr(cfg.lr, s, S)
        if cfg.grad_mode == "end_to_end":
            views = crop_resize(x, crops, (H, W))
            leaf = x
        else:
            with T.no_grad():
                start = crop_resize(x, crops, (H, W)).data
            leaf = Tensor(start, requires_grad=True)
            views = leaf
        total, ce, reg = recovery_loss(teacher, views, targets, cfg.alpha_bn, cfg.teacher_norm)
        check_finite(f"recover batch {batch_idx} step {s}", total.item(), history)
        trace[s] = (total.item(), ce.item(), reg.item())
        total.backward()
        if cfg.grad_mode == "end_to_end":
            adam_step(x, state, lr)
            x.grad = None
        else:
            # the optimizer state follows the view grid, the pixels go back to their box
            adam_step(leaf, state, lr)
            x.data[...] = reverse_paste(x.data, leaf.data, crops)
    return x.data, trace


def recover(teacher: M.ModelCheckpoint, cfg: RecoveryConfig, seed: int, log=None) -> SyntheticDataset:
    """Synthesise ``ipc`` images per class.

    Batches of ``batch_size`` targets are optimised independently from
    N(0, 1) noise in normalised space; the teacher runs in eval mode with its
    parameters detached, so none of its buffers change.
    """
    mean = tuple(teacher.meta.get("mean", ()))
    std = tuple(teacher.meta.get("std", ()))
    if len(mean) != teacher.spec.input_shape[0] or len(std) != teacher.spec.input_shape[0]:
        raise ValueError("teacher checkpoint lacks per-channel mean/std in its metadata")
    plan = class_plan(teacher.spec.num_classes, cfg.ipc, cfg.classes)
    t0 = time.perf_counter()
    images, traces = [], []
    for b, start in enumerate(range(0, len(plan), cfg.batch_size)):
        labels = plan[start : start + cfg.batch_size]
        x, trace = _recover_batch(teacher, cfg, labels, seed, b)
        images.append(x)
        traces.append(trace)
        if log is not None:
            log(f"recover batch {b}: loss {trace[0, 0]:.4f} -> {trace[-1, 0]:.4f}")
    return SyntheticDataset(
        np.concatenate(images),
        plan,
        cfg.ipc,
        teacher.spec.num_classes,
        mean,
        std,
        teacher.fingerprint(),
        cfg.curriculum,
        meta={"seed": seed, "recovery": cfg.to_json(), "wall_clock": time.perf_counter() - t0},
        trace=np.stack(traces),
    )
