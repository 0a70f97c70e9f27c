"""Helpers shared by the training stages."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import models as M
from ..data import LabeledImageSet
from ..optim import SGD, Adam


class DivergenceError(RuntimeError):
    """Raised when a loss turns non-finite; ``trace`` holds the most recent loss values."""

    def __init__(self, stage: str, trace: Sequence[float]):
        self.trace = [float(v) for v in trace]
        super().__init__(f"{stage}: non-finite loss; last {len(self.trace)} values: {self.trace}")


def check_finite(stage: str, value: float, history: list[float], keep: int = 10) -> None:
    history.append(float(value))
    if len(history) > keep:
        del history[0]
    if not np.isfinite(value):
        raise DivergenceError(stage, history)


def make_optimizer(kind: str, params, lr: float, weight_decay: float, momentum: float = 0.9, betas=(0.9, 0.999)):
    if kind == "sgd":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if kind in ("adam", "adamw"):
        return Adam(params, lr, betas=betas, weight_decay=weight_decay, decoupled=kind == "adamw")
    raise ValueError(f"unknown optimizer {kind!r}; expected sgd, adam or adamw")


def masked_argmax(logits: np.ndarray, classes: Sequence[int] | None) -> np.ndarray:
    """Argmax over all classes, or over ``classes`` only."""
    if classes is None:
        return logits.argmax(axis=1)
    allowed = np.asarray(sorted(classes))
    return allowed[logits[:, allowed].argmax(axis=1)]


def evaluate(model: M.ModelCheckpoint, dataset: LabeledImageSet, classes: Sequence[int] | None = None, batch_size: int = 500) -> float:
    """Top-1 accuracy of ``model`` on a real split, optionally restricted to ``classes``."""
    if classes is not None:
        dataset = dataset.restrict_classes(classes)
    if len(dataset) == 0:
        raise ValueError("evaluate: empty evaluation set")
    logits = M.predict(model, dataset.normalized(), batch_size)
    return float(np.mean(masked_argmax(logits, classes) == dataset.labels))
