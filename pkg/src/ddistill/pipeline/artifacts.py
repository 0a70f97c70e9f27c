"""On-disk artifacts: synthetic image sets, soft-label sets and experiment reports."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..augment import CropParams, CurriculumConfig
from ..data import LabeledImageSet, denormalize, normalize

SYNTH_FORMAT = "ddistill-synth/1"
SOFT_FORMAT = "ddistill-soft/1"


class ArtifactError(ValueError):
    pass


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _write_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) of a CHW image in [0, 1]; single-channel images are replicated to RGB."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise ValueError(f"write_ppm: expected 1 or 3 channels, got {img.shape[0]}")
    pixels = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ArtifactError(f"{path}: not an 8-bit P6 image")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    """Distilled images kept in normalised space, exactly ``ipc`` per class.

    ``images`` are unclipped; :meth:`exported` denormalises and clips to [0, 1].
    """

    images: np.ndarray
    labels: np.ndarray
    ipc: int
    num_classes: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    teacher_fingerprint: str = ""
    curriculum: CurriculumConfig | None = None
    config_hash: str = ""
    meta: dict = field(default_factory=dict)
    trace: np.ndarray | None = field(default=None, repr=False, compare=False)  # (batches, S, 3) loss/ce/reg, not persisted

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ArtifactError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        present = counts[counts > 0]
        if len(present) == 0 or np.any(present != self.ipc):
            raise ArtifactError(f"every present class must hold exactly ipc={self.ipc} images, got counts {counts.tolist()}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def exported(self) -> np.ndarray:
        return np.clip(denormalize(self.images, self.mean, self.std), 0.0, 1.0)

    def as_image_set(self) -> LabeledImageSet:
        return LabeledImageSet(self.exported(), self.labels, self.num_classes, self.mean, self.std, "synthetic")

    def restrict_classes(self, classes: Sequence[int]) -> "SyntheticDataset":
        keep = np.flatnonzero(np.isin(self.labels, list(classes)))
        return replace(self, images=self.images[keep], labels=self.labels[keep], trace=None)

    @classmethod
    def from_real(cls, real: LabeledImageSet, ipc: int) -> "SyntheticDataset":
        """Wrap a real subset (for replay baselines) in the synthetic container."""
        images = normalize(real.images.astype(np.float32), real.mean, real.std)
        return cls(images, real.labels, ipc, real.num_classes, tuple(real.mean), tuple(real.std), meta={"source": "real"})

    def digest(self) -> str:
        h = hashlib.sha256(self.images.astype("<f4").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()[:16]

    def save(self, directory, previews: bool = True) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_atomic(d / "images.f32", self.images.astype("<f4").tobytes())
        manifest = {
            "format": SYNTH_FORMAT,
            "shape": list(self.images.shape),
            "labels": self.labels.tolist(),
            "ipc": self.ipc,
            "num_classes": self.num_classes,
            "mean": list(self.mean),
            "std": list(self.std),
            "teacher_fingerprint": self.teacher_fingerprint,
            "curriculum": None if self.curriculum is None else self.curriculum.to_json(),
            "config_hash": self.config_hash,
            "digest": self.digest(),
            "meta": self.meta,
        }
        _write_json(d / "manifest.json", manifest)
        if previews:
            pdir = d / "previews"
            pdir.mkdir(exist_ok=True)
            exported = self.exported()
            for c in self.classes:
                strip = np.concatenate(list(exported[self.labels == c]), axis=2)
                write_ppm(pdir / f"class_{c:04d}.ppm", strip)
        return d

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except FileNotFoundError:
            raise ArtifactError(f"{d}: no manifest.json") from None
        if manifest.get("format") != SYNTH_FORMAT:
            raise ArtifactError(f"{d}: unexpected format {manifest.get('format')!r}")
        shape = tuple(manifest["shape"])
        raw = (d / "images.f32").read_bytes()
        if len(raw) != 4 * math.prod(shape):
            raise ArtifactError(f"{d}: image blob holds {len(raw)} bytes, expected {4 * math.prod(shape)}")
        images = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        curriculum = manifest["curriculum"]
        out = cls(
            images,
            np.asarray(manifest["labels"], dtype=np.int64),
            int(manifest["ipc"]),
            int(manifest["num_classes"]),
            tuple(manifest["mean"]),
            tuple(manifest["std"]),
            manifest["teacher_fingerprint"],
            None if curriculum is None else CurriculumConfig.from_json(curriculum),
            manifest["config_hash"],
            manifest.get("meta", {}),
        )
        if out.digest() != manifest["digest"]:
            raise ArtifactError(f"{d}: content digest mismatch")
        return out


# ---------------------------------------------------------------------------
# Soft labels
# ---------------------------------------------------------------------------


@dataclass
class SoftLabelSet:
    """Per-epoch crop boxes and the teacher's probabilities on exactly those views.

    ``crops`` has shape (epochs, N, 5) holding (top, left, height, width, flip);
    ``probs`` has shape (epochs, N, classes).
    """

    crops: np.ndarray
    probs: np.ndarray
    teacher_fingerprint: str
    temperature: float = 1.0
    synth_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.crops = np.ascontiguousarray(self.crops, dtype=np.int32)
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        if self.crops.ndim != 3 or self.crops.shape[2] != 5 or self.probs.shape[:2] != self.crops.shape[:2]:
            raise ArtifactError(f"crops {self.crops.shape} and probs {self.probs.shape} disagree")
        sums = self.probs.astype(np.float64).sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise ArtifactError(f"probability rows must sum to 1, worst deviation {np.abs(sums - 1.0).max():.3e}")

    @property
    def epochs(self) -> int:
        return self.crops.shape[0]

    def crop_params(self, epoch: int, index) -> list[CropParams]:
        rows = self.crops[epoch, np.atleast_1d(index)]
        return [CropParams(int(t), int(l), int(h), int(w), bool(f)) for t, l, h, w, f in rows]

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_atomic(d / "soft.bin", self.crops.astype("<i4").tobytes() + self.probs.astype("<f4").tobytes())
        _write_json(
            d / "soft.json",
            {
                "format": SOFT_FORMAT,
                "crops_shape": list(self.crops.shape),
                "probs_shape": list(self.probs.shape),
                "teacher_fingerprint": self.teacher_fingerprint,
                "temperature": self.temperature,
                "synth_digest": self.synth_digest,
                "meta": self.meta,
            },
        )
        return d

    @classmethod
    def load(cls, directory) -> "SoftLabelSet":
        d = Path(directory)
        manifest = json.loads((d / "soft.json").read_text())
        if manifest.get("format") != SOFT_FORMAT:
            raise ArtifactError(f"{d}: unexpected format {manifest.get('format')!r}")
        cshape, pshape = tuple(manifest["crops_shape"]), tuple(manifest["probs_shape"])
        raw = (d / "soft.bin").read_bytes()
        ncrop = 4 * math.prod(cshape)
        if len(raw) != ncrop + 4 * math.prod(pshape):
            raise ArtifactError(f"{d}: soft.bin has the wrong size")
        crops = np.frombuffer(raw, dtype="<i4", count=math.prod(cshape)).reshape(cshape)
        probs = np.frombuffer(raw, dtype="<f4", offset=ncrop).reshape(pshape)
        return cls(crops, probs, manifest["teacher_fingerprint"], manifest["temperature"], manifest["synth_digest"], manifest.get("meta", {}))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("run_id", "seed", "metric", "step", "value")


@dataclass
class ExperimentReport:
    """Long-format metric rows plus a free-form summary."""

    rows: list[tuple[str, int, str, int, float]] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, run_id: str, seed: int, metric: str, step: int, value: float) -> None:
        value = float(value)
        if metric.startswith("top1") and not 0.0 <= value <= 1.0:
            raise ValueError(f"{metric}={value} is not an accuracy in [0, 1]")
        self.rows.append((str(run_id), int(seed), metric, int(step), value))

    def extend(self, other: "ExperimentReport") -> None:
        self.rows.extend(other.rows)

    def values(self, metric: str, run_id: str | None = None, step: int | None = None) -> list[float]:
        return [
            v for r, _, m, s, v in self.rows if m == metric and (run_id is None or r == run_id) and (step is None or s == step)
        ]

    def by_seed(self, metric: str, run_id: str) -> dict[int, float]:
        return {seed: v for r, seed, m, _, v in self.rows if m == metric and r == run_id}

    def run_ids(self) -> list[str]:
        return list(dict.fromkeys(r for r, *_ in self.rows))

    def aggregate(self, metric: str) -> dict[str, tuple[float, float, int]]:
        """Mean, population std and count of ``metric`` per run id."""
        out = {}
        for run in self.run_ids():
            vals = np.asarray(self.values(metric, run), dtype=np.float64)
            if len(vals):
                out[run] = (float(vals.mean()), float(vals.std()), len(vals))
        return out

    def save(self, directory, name: str = "report") -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for r, seed, m, s, v in self.rows:
                writer.writerow([r, seed, m, s, repr(v)])
        _write_json(d / f"{name}.json", self.summary)
        return d

    @classmethod
    def load(cls, directory, name: str = "report") -> "ExperimentReport":
        d = Path(directory)
        rep = cls(summary=json.loads((d / f"{name}.json").read_text()))
        rep.rows = read_report_csv(d / f"{name}.csv")
        return rep


def read_report_csv(path) -> list[tuple[str, int, str, int, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise ArtifactError(f"{path}: unexpected header {header}")
        return [(r, int(seed), m, int(s), float(v)) for r, seed, m, s, v in reader]
