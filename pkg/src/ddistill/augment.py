"""Crop-scale curricula and the resized-crop family of augmentations.

The curriculum only moves the lower bound of the crop-area fraction: early
iterations see large (easy) crops, later ones the full range down to
``beta_l``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCHEDULERS = ("step", "linear", "cosine", "constant", "reverse_step", "multistep")


@dataclass(frozen=True)
class CurriculumConfig:
    beta_l: float = 0.08
    beta_u: float = 1.0
    gamma: float = 0.92
    milestone: float = 1.0
    total_steps: int = 1000
    scheduler: str = "cosine"
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    weight: float = 1.0
    step_interval: int = 0
    step_factor: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "aspect", tuple(float(a) for a in self.aspect))
        if not 0 < self.beta_l <= self.beta_u <= 1:
            raise ValueError(f"need 0 < beta_l <= beta_u <= 1, got ({self.beta_l}, {self.beta_u})")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0 <= self.milestone <= 1:
            raise ValueError(f"milestone fraction must lie in [0, 1], got {self.milestone}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}; expected one of {SCHEDULERS}")
        if self.weight != 1.0:
            raise ValueError("only the unit curriculum weight is supported")

    @property
    def milestone_step(self) -> float:
        return self.milestone * self.total_steps

    def to_json(self) -> dict:
        d = asdict(self)
        d["aspect"] = list(self.aspect)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CurriculumConfig":
        d = dict(d)
        d["aspect"] = tuple(d.get("aspect", (3 / 4, 4 / 3)))
        return cls(**d)


def min_crop_at(cfg: CurriculumConfig, s: int) -> float:
    """Lower crop-area bound at recovery iteration ``s``.

    Before the milestone T: ``step`` keeps ``beta_u``; ``linear`` gives
    ``beta_l + gamma * (beta_u - s/T)``; ``cosine`` gives
    ``beta_l + gamma * (beta_u + cos(pi * s/T)) / 2``. After it every
    curriculum settles on ``beta_l``. ``reverse_step`` is the mirror image
    (``beta_l`` then ``beta_u``), ``constant`` always returns ``beta_l``.
    Results are clamped to [beta_l, beta_u]. ``s == total_steps`` is accepted
    as the schedule end point.
    """
    if not 0 <= s <= cfg.total_steps:
        raise ValueError(f"step {s} outside [0, {cfg.total_steps}]")
    lo, hi = cfg.beta_l, cfg.beta_u
    T_ = cfg.milestone_step
    kind = cfg.scheduler
    if kind == "constant":
        return lo
    before = T_ > 0 and s <= T_
    if kind == "reverse_step":
        return lo if before else hi
    if kind == "multistep":
        interval = cfg.step_interval or max(1, int(round(T_ / 4)))
        if not before:
            return lo
        return float(min(hi, max(lo, hi * cfg.step_factor ** (s // interval))))
    if not before:
        return lo
    if kind == "step":
        alpha = hi
    elif kind == "linear":
        alpha = lo + cfg.gamma * (hi - s / T_)
    else:
        alpha = lo + cfg.gamma * (hi + math.cos(math.pi * s / T_)) / 2.0
    return float(min(hi, max(lo, alpha)))


def schedule_curve(cfg: CurriculumConfig, every: int = 1) -> list[tuple[int, float]]:
    return [(s, min_crop_at(cfg, s)) for s in range(0, cfg.total_steps, every)]


def write_schedule_csv(path, curves: dict[str, CurriculumConfig], every: int = 1) -> None:
    """Long-format CSV of (curve label, step, alpha) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["curve", "step", "alpha"])
        for label, cfg in curves.items():
            for s, a in schedule_curve(cfg, every):
                writer.writerow([label, s, f"{a:.10g}"])


def ctl_bounds(mode: str, alpha: float, beta_l: float = 0.08, beta_u: float = 1.0) -> tuple[float, float]:
    """Constant-learning crop bounds: ``easy`` -> (alpha, beta_u), ``hard`` -> (beta_l, alpha)."""
    if mode == "easy":
        if not 0 < alpha <= beta_u:
            raise ValueError(f"alpha {alpha} outside (0, {beta_u}]")
        return alpha, beta_u
    if mode == "hard":
        if not beta_l <= alpha <= beta_u:
            raise ValueError(f"alpha {alpha} outside [{beta_l}, {beta_u}]")
        return beta_l, alpha
    raise ValueError(f"mode must be 'easy' or 'hard', got {mode!r}")


# ---------------------------------------------------------------------------
# Crop sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropParams:
    top: int
    left: int
    height: int
    width: int
    flip: bool = False

    def as_box(self) -> tuple[int, int, int, int, bool]:
        return (self.top, self.left, self.height, self.width, self.flip)

    def check(self, H: int, W: int) -> None:
        if self.height < 1 or self.width < 1 or self.top < 0 or self.left < 0 or self.top + self.height > H or self.left + self.width > W:
            raise ValueError(f"crop {self} outside a {H}x{W} image")


def sample_crop(
    rng: np.random.Generator,
    min_scale: float,
    max_scale: float,
    aspect: tuple[float, float] = (3 / 4, 4 / 3),
    src: tuple[int, int] = (32, 32),
    flip_prob: float = 0.0,
) -> CropParams:
    """RandomResizedCrop box: area fraction uniform in [min_scale, max_scale], log-uniform aspect.

    Ten rejection attempts, then a centred crop covering ``max_scale`` of the image.
    """
    if min_scale > max_scale:
        raise ValueError(f"min_scale {min_scale} > max_scale {max_scale}")
    H, W = src
    area = H * W
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    box = None
    for _ in range(10):
        target = area * rng.uniform(min_scale, max_scale)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            box = (top, left, h, w)
            break
    if box is None:
        side_h = min(H, max(1, int(round(math.sqrt(max_scale * area * H / W)))))
        side_w = min(W, max(1, int(round(math.sqrt(max_scale * area * W / H)))))
        box = ((H - side_h) // 2, (W - side_w) // 2, side_h, side_w)
    flip = bool(rng.random() < flip_prob) if flip_prob > 0 else False
    return CropParams(*box, flip)


def sample_crops(rng, n: int, min_scale: float, max_scale: float, aspect, src, flip_prob: float = 0.0) -> list[CropParams]:
    return [sample_crop(rng, min_scale, max_scale, aspect, src, flip_prob) for _ in range(n)]


def crop_resize(x, params: Sequence[CropParams], out_size: tuple[int, int]) -> Tensor:
    """Differentiable per-image crop + bilinear resize of an NCHW batch."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    H, W = x.shape[-2:]
    for p in params:
        p.check(H, W)
    return T.resized_crop(x, [p.as_box() for p in params], out_size)


def reverse_paste(x_s: np.ndarray, x_t: np.ndarray, params: Sequence[CropParams]) -> np.ndarray:
    """Resize each optimised view back to its crop box and write it into a copy of ``x_s``.

    Pixels outside each box are left bit-identical.
    """
    x_s = np.asarray(x_s)
    x_t = np.asarray(x_t)
    if x_s.ndim != 4 or x_t.ndim != 4 or len(x_s) != len(x_t) or len(params) != len(x_s) or x_s.shape[1] != x_t.shape[1]:
        raise ValueError(f"reverse_paste: inconsistent shapes {x_s.shape}, {x_t.shape} for {len(params)} crops")
    out = x_s.copy()
    H, W = x_s.shape[-2:]
    oh, ow = x_t.shape[-2:]
    for i, p in enumerate(params):
        p.check(H, W)
        view = x_t[i][..., ::-1] if p.flip else x_t[i]
        ry = T.resize_matrix(oh, p.height, x_t.dtype)
        rx = T.resize_matrix(ow, p.width, x_t.dtype)
        out[i, :, p.top : p.top + p.height, p.left : p.left + p.width] = ry @ view @ rx.T
    return out


def cutout(x, rng: np.random.Generator, hole_size: int):
    """Zero one square hole per image, centred uniformly at random and clipped at the borders."""
    is_tensor = isinstance(x, Tensor)
    data = x.data if is_tensor else np.asarray(x)
    if hole_size <= 0:
        return x
    N, _, H, W = data.shape
    mask = np.ones((N, 1, H, W), dtype=data.dtype)
    half = hole_size / 2.0
    for i in range(N):
        cy = int(rng.integers(0, H))
        cx = int(rng.integers(0, W))
        y0, y1 = max(0, int(math.floor(cy - half + 0.5))), min(H, int(math.floor(cy + half + 0.5)))
        x0, x1 = max(0, int(math.floor(cx - half + 0.5))), min(W, int(math.floor(cx + half + 0.5)))
        mask[i, :, y0:y1, x0:x1] = 0
    if is_tensor:
        return T.mul(x, Tensor(np.broadcast_to(mask, data.shape).copy(), dtype=data.dtype))
    return data * mask


def horizontal_flip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])
