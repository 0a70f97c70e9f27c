"""Compact BN-bearing CNNs, soft cross-entropy and the checkpoint file format."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHITECTURES = ("convnet_bn_3", "resnet8_bn")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CKPT_MAGIC = b"DDCKPT1\0"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class SpecMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape[1:]) < 8:
            raise ValueError(f"input_shape must be (C, H, W) with H, W >= 8, got {self.input_shape}")
        if self.width <= 0:
            raise ValueError("width must be positive")

    def to_json(self) -> dict:
        return {"arch": self.arch, "input_shape": list(self.input_shape), "num_classes": self.num_classes, "width": self.width}

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["input_shape"]), int(d["num_classes"]), float(d.get("width", 1.0)))


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one BN layer."""

    name: str
    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


@dataclass
class BatchStatsSnapshot:
    """Differentiable per-channel batch mean / biased variance of each BN layer input."""

    means: list[Tensor]
    variances: list[Tensor]

    def __len__(self) -> int:
        return len(self.means)


@dataclass
class ModelCheckpoint:
    spec: ModelSpec
    params: dict[str, Tensor]
    bn: list[BatchNormState]
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        """All arrays in declaration order: parameters, then BN running statistics."""
        out = [(name, p.data) for name, p in self.params.items()]
        for layer in self.bn:
            out.append((f"{layer.name}.running_mean", layer.running_mean))
            out.append((f"{layer.name}.running_var", layer.running_var))
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_json(), sort_keys=True).encode())
        for name, arr in self.buffers():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _channels(base: int, width: float) -> int:
    return max(1, int(round(base * width)))


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.bn: list[BatchNormState] = []

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = False):
        fan_in = cin * k * k
        w = self.rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
        self.params[f"{name}.weight"] = Tensor(w.astype(self.dtype), requires_grad=True)
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True)

    def norm(self, name: str, channels: int):
        weight = Tensor(np.ones(channels, self.dtype), requires_grad=True)
        bias = Tensor(np.zeros(channels, self.dtype), requires_grad=True)
        self.params[f"{name}.weight"] = weight
        self.params[f"{name}.bias"] = bias
        self.bn.append(BatchNormState(name, weight, bias, np.zeros(channels, self.dtype), np.ones(channels, self.dtype)))

    def fc(self, name: str, fin: int, fout: int):
        bound = 1.0 / np.sqrt(fin)
        w = self.rng.standard_normal((fout, fin)) * np.sqrt(1.0 / fin)
        self.params[f"{name}.weight"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(self.rng.uniform(-bound, bound, fout).astype(self.dtype), requires_grad=True)


def _convnet_dims(spec: ModelSpec) -> tuple[int, int]:
    c = _channels(32, spec.width)
    h, w = spec.input_shape[1:]
    for _ in range(3):
        h, w = h // 2, w // 2
    return c, c * max(h, 1) * max(w, 1)


def _build_convnet(b: _Builder, spec: ModelSpec) -> None:
    cin = spec.input_shape[0]
    c, feat = _convnet_dims(spec)
    for i in range(3):
        b.conv(f"block{i}.conv", cin, c, 3)
        b.norm(f"block{i}.bn", c)
        cin = c
    b.fc("fc", feat, spec.num_classes)


def _resnet_widths(spec: ModelSpec) -> list[int]:
    return [_channels(16, spec.width), _channels(32, spec.width), _channels(64, spec.width)]


def _build_resnet8(b: _Builder, spec: ModelSpec) -> None:
    widths = _resnet_widths(spec)
    b.conv("stem.conv", spec.input_shape[0], widths[0], 3)
    b.norm("stem.bn", widths[0])
    cin = widths[0]
    for i, c in enumerate(widths):
        b.conv(f"stage{i}.conv1", cin, c, 3)
        b.norm(f"stage{i}.bn1", c)
        b.conv(f"stage{i}.conv2", c, c, 3)
        b.norm(f"stage{i}.bn2", c)
        if i > 0:
            b.conv(f"stage{i}.short", cin, c, 1)
            b.norm(f"stage{i}.short_bn", c)
        cin = c
    b.fc("fc", cin, spec.num_classes)


_BUILDERS = {"convnet_bn_3": _build_convnet, "resnet8_bn": _build_resnet8}


def build(spec: ModelSpec, rng_seed: int) -> ModelCheckpoint:
    """Freshly initialised model: He-normal conv weights, BN scale 1 / shift 0, running stats (0, 1)."""
    if spec.arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {spec.arch!r}")
    b = _Builder(np.random.default_rng(rng_seed), T.get_dtype())
    _BUILDERS[spec.arch](b, spec)
    return ModelCheckpoint(spec, b.params, b.bn, {})


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


class _Pass:
    def __init__(self, model: ModelCheckpoint, mode: str, capture: bool, frozen: bool):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.model = model
        self.mode = mode
        self.capture = capture
        self.frozen = frozen
        self.bn_index = 0
        self.means: list[Tensor] = []
        self.variances: list[Tensor] = []
        self._detached: dict[str, Tensor] = {}

    def p(self, name: str) -> Tensor:
        param = self.model.params[name]
        if not self.frozen:
            return param
        if name not in self._detached:
            self._detached[name] = param.detach()
        return self._detached[name]

    def conv(self, x: Tensor, name: str, stride: int = 1, padding: int = 1) -> Tensor:
        bias = self.model.params.get(f"{name}.bias")
        return T.conv2d(x, self.p(f"{name}.weight"), None if bias is None else self.p(f"{name}.bias"), stride, padding)

    def norm(self, x: Tensor) -> Tensor:
        layer = self.model.bn[self.bn_index]
        self.bn_index += 1
        weight, bias = self.p(f"{layer.name}.weight"), self.p(f"{layer.name}.bias")
        need_batch = self.mode == "train" or self.capture
        if need_batch:
            mu, var = T.channel_mean(x), T.channel_var(x)
            if self.capture:
                self.means.append(mu)
                self.variances.append(var)
        if self.mode == "train":
            if not self.frozen:
                n = x.shape[0] * x.shape[2] * x.shape[3]
                unbiased = var.data * (n / max(n - 1, 1))
                layer.running_mean *= 1.0 - layer.momentum
                layer.running_mean += (layer.momentum * mu.data).astype(layer.running_mean.dtype)
                layer.running_var *= 1.0 - layer.momentum
                layer.running_var += (layer.momentum * unbiased).astype(layer.running_var.dtype)
            return T.batchnorm2d(x, mu, var, weight, bias, layer.eps)
        rm = Tensor(layer.running_mean, dtype=x.dtype)
        rv = Tensor(layer.running_var, dtype=x.dtype)
        return T.batchnorm2d(x, rm, rv, weight, bias, layer.eps)

    def fc(self, x: Tensor) -> Tensor:
        return T.linear(x, self.p("fc.weight"), self.p("fc.bias"))


def _forward_convnet(run: _Pass, x: Tensor) -> Tensor:
    for i in range(3):
        x = run.conv(x, f"block{i}.conv")
        x = T.relu(run.norm(x))
        x = T.avgpool2d(x, 2)
    return run.fc(T.flatten(x))


def _forward_resnet8(run: _Pass, x: Tensor) -> Tensor:
    x = T.relu(run.norm(run.conv(x, "stem.conv")))
    for i in range(3):
        stride = 1 if i == 0 else 2
        out = T.relu(run.norm(run.conv(x, f"stage{i}.conv1", stride=stride)))
        out = run.norm(run.conv(out, f"stage{i}.conv2"))
        shortcut = x if i == 0 else run.norm(run.conv(x, f"stage{i}.short", stride=stride, padding=0))
        x = T.relu(out + shortcut)
    x = T.mean(x, axis=(2, 3))
    return run.fc(x)


_FORWARDS = {"convnet_bn_3": _forward_convnet, "resnet8_bn": _forward_resnet8}


def forward(
    model: ModelCheckpoint, x: Tensor, mode: str = "eval", capture_bn: bool = False, frozen: bool = False
) -> tuple[Tensor, BatchStatsSnapshot | None]:
    """Run the network on an NCHW batch.

    ``train`` normalises with batch statistics and updates running statistics by
    EMA unless ``frozen``; ``eval`` uses running statistics and never mutates
    them. ``frozen`` also detaches every parameter so no gradient reaches the
    model. With ``capture_bn`` the per-layer batch statistics are returned.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise ValueError(f"forward: input shape {x.shape} does not match model input (N, {model.spec.input_shape})")
    run = _Pass(model, mode, capture_bn, frozen)
    logits = _FORWARDS[model.spec.arch](run, x)
    snapshot = BatchStatsSnapshot(run.means, run.variances) if capture_bn else None
    return logits, snapshot


def predict(model: ModelCheckpoint, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits for a normalised image array, without graph recording."""
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = forward(model, Tensor(images[i : i + batch_size]), mode="eval")
            outs.append(logits.data)
    if not outs:
        return np.zeros((0, model.spec.num_classes), dtype=T.get_dtype())
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def soft_cross_entropy(logits: Tensor, target, temperature: float = 1.0) -> Tensor:
    """Batch mean of ``-sum(target * log_softmax(logits / temperature))``."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"soft_cross_entropy: target shape {target.shape} != logits shape {logits.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    row_sums = target.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5) or np.any(target < 0):
        raise ValueError("soft_cross_entropy: target rows must be probability vectors summing to 1")
    scaled = logits if temperature == 1.0 else logits * (1.0 / temperature)
    logp = T.log_softmax(scaled, axis=1)
    return T.mul(T.sum(T.mul(logp, Tensor(target))), -1.0 / logits.shape[0])


def one_hot(labels: np.ndarray, num_classes: int, dtype=None) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype or T.get_dtype())
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return out


def smooth_targets(labels: np.ndarray, num_classes: int, rho: float) -> np.ndarray:
    """Label smoothing: ``(1 - rho) * onehot + rho / C``."""
    return (1.0 - rho) * one_hot(labels, num_classes) + rho / num_classes


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelCheckpoint, path) -> None:
    """Write magic, version, a length-prefixed JSON header, then raw little-endian buffers."""
    buffers = model.buffers()
    header = {
        "spec": model.spec.to_json(),
        "buffers": [{"name": n, "shape": list(a.shape), "dtype": np.dtype(a.dtype).newbyteorder("<").str} for n, a in buffers],
        "bn": [{"name": l.name, "momentum": l.momentum, "eps": l.eps} for l in model.bn],
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in buffers:
            fh.write(np.ascontiguousarray(arr).astype(np.dtype(arr.dtype).newbyteorder("<"), copy=False).tobytes())
    tmp.replace(path)


def load_checkpoint(path, expect: ModelSpec | str | None = None) -> ModelCheckpoint:
    """Read a checkpoint; ``expect`` (spec or architecture id) guards against loading the wrong model."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 8 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    offset = len(CKPT_MAGIC) + 8
    if offset + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    header = json.loads(raw[offset : offset + hlen])
    offset += hlen
    spec = ModelSpec.from_json(header["spec"])
    if expect is not None:
        want_arch = expect if isinstance(expect, str) else expect.arch
        if spec.arch != want_arch or (isinstance(expect, ModelSpec) and spec != expect):
            raise SpecMismatchError(f"{path}: checkpoint holds {spec}, expected {expect}")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["buffers"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated payload at buffer {entry['name']}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    template = build(spec, 0)
    params = {}
    for name in template.params:
        if name not in arrays:
            raise CheckpointFormatError(f"{path}: missing buffer {name}")
        params[name] = Tensor(arrays[name], requires_grad=True, dtype=arrays[name].dtype)
    bn = []
    for layer, info in zip(template.bn, header["bn"]):
        bn.append(
            BatchNormState(
                layer.name,
                params[f"{layer.name}.weight"],
                params[f"{layer.name}.bias"],
                arrays[f"{layer.name}.running_mean"],
                arrays[f"{layer.name}.running_var"],
                info["momentum"],
                info["eps"],
            )
        )
    return ModelCheckpoint(spec, params, bn, header.get("meta", {}))


def clone(model: ModelCheckpoint) -> ModelCheckpoint:
    params = {n: Tensor(p.data.copy(), requires_grad=True, dtype=p.dtype) for n, p in model.params.items()}
    bn = [
        BatchNormState(l.name, params[f"{l.name}.weight"], params[f"{l.name}.bias"], l.running_mean.copy(), l.running_var.copy(), l.momentum, l.eps)
        for l in model.bn
    ]
    return ModelCheckpoint(model.spec, params, bn, json.loads(json.dumps(model.meta)))
