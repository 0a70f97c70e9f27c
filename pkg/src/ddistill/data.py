"""Dataset readers (IDX, CIFAR binary, raw shard manifests), normalisation and class splits."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN, CIFAR10_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN, CIFAR100_STD = (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)

MANIFEST_FORMAT = "ddistill-shards/1"


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    """Images in [0, 1] as float32 NCHW, integer labels and the normalisation constants."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels outside [0, {self.num_classes})")
        if len(self.mean) != self.images.shape[1] or len(self.std) != self.images.shape[1]:
            raise ValueError("mean/std must have one entry per channel")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalized(self, dtype=np.float32) -> np.ndarray:
        return normalize(self.images, self.mean, self.std).astype(dtype)

    def subset(self, index) -> "LabeledImageSet":
        index = np.asarray(index)
        return replace(self, images=self.images[index], labels=self.labels[index])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def restrict_classes(self, classes: Sequence[int]) -> "LabeledImageSet":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return ((images - m) / s).astype(images.dtype)


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (images * s + m).astype(images.dtype)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of the header's shape."""
    raw = _read_bytes(path)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise DatasetFormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[4 + 4 * ndim :]
    if len(payload) < count * dtype.itemsize:
        raise DatasetFormatError(f"{path}: truncated payload ({len(payload)} bytes, header needs {count * dtype.itemsize})")
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(np.int16): 0x0B, np.dtype(np.int32): 0x0C,
             np.dtype(np.float32): 0x0D, np.dtype(np.float64): 0x0E}
    array = np.asarray(array)
    code = codes[np.dtype(array.dtype).newbyteorder("=")]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    body = array.astype(array.dtype.newbyteorder(">")).tobytes()
    data = header + body
    path = Path(path)
    path.write_bytes(gzip.compress(data) if path.suffix == ".gz" else data)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train",
             mean=MNIST_MEAN, std=MNIST_STD, name: str = "mnist") -> LabeledImageSet:
    """MNIST-style IDX image/label pair; images scaled from bytes to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DatasetFormatError(f"{images_path}: expected 3 or 4 dims, got {images.ndim}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise DatasetFormatError(f"{labels_path}: {labels.shape} labels for {len(images)} images")
    if labels.max(initial=0) >= num_classes:
        raise DatasetFormatError(f"{labels_path}: label {labels.max()} out of range for {num_classes} classes")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    return LabeledImageSet(images.astype(np.float32) / scale, labels.astype(np.int64), num_classes, mean, std, split, name)


# ---------------------------------------------------------------------------
# CIFAR binary
# ---------------------------------------------------------------------------

_CIFAR_FILES = {
    ("c10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("c10", "val"): ["test_batch.bin"],
    ("c100", "train"): ["train.bin"],
    ("c100", "val"): ["test.bin"],
}


def parse_cifar_records(raw: bytes, variant: str, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    label_bytes = 1 if variant == "c10" else 2
    row = label_bytes + 3072
    if len(raw) % row:
        raise DatasetFormatError(f"{source}: size {len(raw)} is not a multiple of the {row}-byte record")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, row)
    labels = table[:, label_bytes - 1].astype(np.int64)
    images = table[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar_binary(path, variant: str = "c10", split: str = "train") -> LabeledImageSet:
    """CIFAR-10/100 binary release. ``path`` is one .bin file or the extracted directory."""
    if variant not in ("c10", "c100"):
        raise ValueError(f"variant must be 'c10' or 'c100', got {variant!r}")
    path = Path(path)
    files = [path] if path.is_file() else [path / f for f in _CIFAR_FILES[(variant, split)]]
    chunks, labels = [], []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"CIFAR file missing: {f}")
        imgs, labs = parse_cifar_records(_read_bytes(f), variant, str(f))
        chunks.append(imgs)
        labels.append(labs)
    num_classes = 10 if variant == "c10" else 100
    lab = np.concatenate(labels)
    if lab.max(initial=0) >= num_classes:
        raise DatasetFormatError(f"{path}: label {lab.max()} out of range for {num_classes} classes")
    mean, std = (CIFAR10_MEAN, CIFAR10_STD) if variant == "c10" else (CIFAR100_MEAN, CIFAR100_STD)
    images = np.concatenate(chunks).astype(np.float32) / 255.0
    return LabeledImageSet(images, lab, num_classes, mean, std, split, "cifar10" if variant == "c10" else "cifar100")


# ---------------------------------------------------------------------------
# Raw shard manifests
# ---------------------------------------------------------------------------


def save_manifest(directory, dataset: LabeledImageSet, shard_size: int = 10000) -> Path:
    """Write ``dataset`` as uint8 image shards + int32 label shards and a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards = []
    pixels = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    for k, start in enumerate(range(0, len(dataset), shard_size)):
        stop = min(start + shard_size, len(dataset))
        img_name, lab_name = f"images_{k:04d}.bin", f"labels_{k:04d}.bin"
        (directory / img_name).write_bytes(pixels[start:stop].tobytes())
        (directory / lab_name).write_bytes(dataset.labels[start:stop].astype("<i4").tobytes())
        shards.append({"images": img_name, "labels": lab_name, "count": stop - start})
    manifest = {
        "format": MANIFEST_FORMAT,
        "name": dataset.name,
        "split": dataset.split,
        "shape": list(dataset.shape),
        "num_classes": dataset.num_classes,
        "dtype": "uint8",
        "mean": list(dataset.mean),
        "std": list(dataset.std),
        "shards": shards,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path) -> LabeledImageSet:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetFormatError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    shape = tuple(manifest["shape"])
    dtype = np.dtype(manifest.get("dtype", "uint8")).newbyteorder("<")
    per_image = int(np.prod(shape)) * dtype.itemsize
    images, labels = [], []
    for shard in manifest["shards"]:
        raw = (path.parent / shard["images"]).read_bytes()
        lab = np.frombuffer((path.parent / shard["labels"]).read_bytes(), dtype="<i4")
        if len(raw) != shard["count"] * per_image or len(lab) != shard["count"]:
            raise DatasetFormatError(f"{path}: shard {shard['images']} does not hold {shard['count']} records")
        images.append(np.frombuffer(raw, dtype=dtype).reshape((-1,) + shape))
        labels.append(lab)
    imgs = np.concatenate(images).astype(np.float32)
    if dtype == np.uint8:
        imgs /= 255.0
    return LabeledImageSet(imgs, np.concatenate(labels).astype(np.int64), int(manifest["num_classes"]),
                           tuple(manifest["mean"]), tuple(manifest["std"]), manifest.get("split", "train"), manifest.get("name", ""))


# ---------------------------------------------------------------------------
# Sampling and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassIncrementalSchedule:
    steps: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = [c for s in self.steps for c in s]
        if len(flat) != len(set(flat)):
            raise ValueError("class-incremental steps must be disjoint")

    def __len__(self) -> int:
        return len(self.steps)

    def seen(self, step: int) -> tuple[int, ...]:
        """Classes introduced up to and including ``step`` (0-based)."""
        return tuple(c for s in self.steps[: step + 1] for c in s)

    def cumulative_counts(self) -> list[int]:
        return [len(self.seen(i)) for i in range(len(self.steps))]


def incremental_split(num_classes: int, steps: int, rng_seed: int) -> ClassIncrementalSchedule:
    """Seeded shuffle of class ids cut into equal groups; the last group absorbs any remainder."""
    if steps < 1 or steps > num_classes:
        raise ValueError(f"cannot split {num_classes} classes into {steps} steps")
    order = np.random.default_rng(rng_seed).permutation(num_classes)
    size = num_classes // steps
    groups = [tuple(int(c) for c in order[i * size : (i + 1) * size]) for i in range(steps - 1)]
    groups.append(tuple(int(c) for c in order[(steps - 1) * size :]))
    return ClassIncrementalSchedule(tuple(groups))


def random_real_subset(dataset: LabeledImageSet, ipc: int, rng_seed: int) -> LabeledImageSet:
    """Exactly ``ipc`` samples per class drawn without replacement."""
    counts = dataset.class_counts()
    if ipc < 1 or counts.min() < ipc:
        short = [int(c) for c in np.flatnonzero(counts < ipc)]
        raise ValueError(f"classes {short} have fewer than {ipc} samples")
    rng = np.random.default_rng(rng_seed)
    chosen = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        chosen.append(rng.choice(members, size=ipc, replace=False))
    index = rng.permutation(np.concatenate(chosen))
    return dataset.subset(index)


def stratified_split(dataset: LabeledImageSet, val_per_class: int, rng_seed: int) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Hold out ``val_per_class`` samples of every class as a validation split."""
    rng = np.random.default_rng(rng_seed)
    val_idx = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        val_idx.append(rng.choice(members, size=min(val_per_class, len(members)), replace=False))
    val_idx = np.sort(np.concatenate(val_idx))
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[val_idx] = False
    train = replace(dataset.subset(np.flatnonzero(train_mask)), split="train")
    val = replace(dataset.subset(val_idx), split="val")
    return train, val
