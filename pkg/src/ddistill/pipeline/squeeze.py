"""Teacher training on the full original dataset."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import models as M
from .. import tensor as T
from ..augment import crop_resize, cutout, sample_crops
from ..data import LabeledImageSet, normalize
from ..optim import LRSchedule
from ..tensor import Tensor
from .common import check_finite, evaluate, make_optimizer

AUGMENTATIONS = ("crop", "flip", "cutout", "rrc")


@dataclass(frozen=True)
class SqueezeRecipe:
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 200
    schedule: str = "cosine"
    step_size: int = 30
    gamma: float = 0.1
    label_smoothing: float = 0.0
    augment: tuple[str, ...] = ("crop", "flip")
    eval_batch_size: int = 500

    def __post_init__(self):
        object.__setattr__(self, "augment", tuple(self.augment))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        unknown = [a for a in self.augment if a not in AUGMENTATIONS]
        if unknown:
            raise ValueError(f"unsupported augmentations {unknown}; available: {AUGMENTATIONS}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d


def augment_batch(images: np.ndarray, augment, rng: np.random.Generator) -> np.ndarray:
    """Apply the recipe's augmentations to a batch of [0, 1] NCHW images."""
    x = images
    N, _, H, W = x.shape
    if "rrc" in augment:
        boxes = sample_crops(rng, N, 0.08, 1.0, (3 / 4, 4 / 3), (H, W))
        with T.no_grad():
            x = crop_resize(Tensor(x, dtype=x.dtype), boxes, (H, W)).data
    if "crop" in augment:
        p = max(1, H // 8)
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, 2 * p + 1, size=(N, 2))
        x = np.stack([padded[i, :, dy : dy + H, dx : dx + W] for i, (dy, dx) in enumerate(offs)])
    if "flip" in augment:
        flip = rng.random(N) < 0.5
        x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    if "cutout" in augment:
        x = cutout(x, rng, H // 2)
    return x


def squeeze(
    recipe: SqueezeRecipe,
    train_set: LabeledImageSet,
    spec: M.ModelSpec,
    seed: int,
    val_set: LabeledImageSet | None = None,
    log=None,
) -> M.ModelCheckpoint:
    """Train a teacher from scratch; the returned checkpoint records its real-val top-1 in ``meta``."""
    if train_set.shape != spec.input_shape:
        raise ValueError(f"dataset images {train_set.shape} do not match model input {spec.input_shape}")
    if train_set.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {train_set.num_classes} classes, model expects {spec.num_classes}")
    dtype = T.get_dtype()
    model = M.build(spec, seed)
    opt = make_optimizer(recipe.optimizer, model.parameters(), recipe.lr, recipe.weight_decay, recipe.momentum)
    n = len(train_set)
    steps_per_epoch = -(-n // recipe.batch_size)
    total = steps_per_epoch * recipe.epochs
    # step decay counts epochs in the recipe, iterations in the schedule
    lr_at = LRSchedule(recipe.lr, total, recipe.schedule, step_size=recipe.step_size * steps_per_epoch, gamma=recipe.gamma)
    targets = M.smooth_targets(train_set.labels, spec.num_classes, recipe.label_smoothing).astype(dtype)
    history: list[float] = []
    epoch_loss = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(recipe.epochs):
        rng = np.random.default_rng([seed, 1, epoch])
        order = rng.permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
            raw = augment_batch(train_set.images[idx], recipe.augment, rng)
            x = Tensor(normalize(raw, train_set.mean, train_set.std), dtype=dtype)
            logits, _ = M.forward(model, x, mode="train")
            loss = M.soft_cross_entropy(logits, targets[idx])
            check_finite("squeeze", loss.item(), history)
            model.zero_grad()
            loss.backward()
            opt.lr = lr_at(step)
            opt.step()
            running += loss.item() * len(idx)
            step += 1
        epoch_loss.append(running / n)
        if log is not None:
            log(f"squeeze epoch {epoch + 1}/{recipe.epochs} loss {epoch_loss[-1]:.4f}")
    model.meta.update(
        {
            "stage": "squeeze",
            "seed": seed,
            "recipe": recipe.to_json(),
            "dataset": train_set.name,
            "mean": list(train_set.mean),
            "std": list(train_set.std),
            "train_loss": epoch_loss,
            "wall_clock": time.perf_counter() - t0,
        }
    )
    if val_set is not None:
        model.meta["val_top1"] = evaluate(model, val_set, batch_size=recipe.eval_batch_size)
    return model
