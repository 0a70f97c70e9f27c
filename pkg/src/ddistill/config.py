"""INI run configuration: parsing, overrides, typed stage settings and content hashes."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from . import data as D
from .augment import CurriculumConfig
from .models import ModelSpec
from .pipeline.posttrain import PostTrainRecipe
from .pipeline.recover import RecoveryConfig
from .pipeline.squeeze import SqueezeRecipe

SECTIONS = ("run", "data", "model", "squeeze", "recover", "relabel", "posttrain", "continual", "ablate", "report")

# which sections feed each stage's artifact hash
STAGE_SECTIONS = {
    "squeeze": ("data", "model", "squeeze"),
    "recover": ("data", "model", "squeeze", "recover"),
    "relabel": ("data", "model", "squeeze", "recover", "relabel", "posttrain"),
    "posttrain": ("data", "model", "squeeze", "recover", "relabel", "posttrain"),
    "eval": ("data", "model", "squeeze", "recover", "relabel", "posttrain"),
    "continual": ("data", "model", "squeeze", "recover", "posttrain", "continual"),
    "ablate": ("data", "model", "squeeze", "recover", "posttrain", "ablate"),
}


class ConfigError(ValueError):
    pass


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], (int, float)):
            return tuple(type(default[0])(float(t)) if isinstance(default[0], float) else int(t) for t in items)
        return tuple(items)
    if default is None:
        if text.lower() in ("", "none"):
            return None
        return tuple(int(t) for t in text.split(","))
    return text


def _build(cls, section: dict[str, str], prefix: str, **fixed):
    """Instantiate a dataclass from string values, typed after each field's default."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(fixed)
    for key, text in section.items():
        if key not in names or key in fixed:
            continue
        f = names[key]
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = ""
        try:
            kwargs[key] = _parse_value(text, default)
        except ValueError as exc:
            raise ConfigError(f"[{prefix}] {key} = {text!r}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{prefix}] {exc}") from None


def _check_keys(section: dict[str, str], allowed: Iterable[str], name: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"[{name}] unknown keys {unknown}")


@dataclass
class DataConfig:
    format: str = "idx"
    name: str = "mnist"
    num_classes: int = 10
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    path: str = ""
    variant: str = "c10"
    train_manifest: str = ""
    val_manifest: str = ""

    def required_paths(self) -> list[str]:
        if self.format == "idx":
            return [self.train_images, self.train_labels, self.val_images, self.val_labels]
        if self.format == "cifar":
            return [self.path]
        if self.format == "manifest":
            return [self.train_manifest, self.val_manifest]
        raise ConfigError(f"[data] unknown format {self.format!r}; expected idx, cifar or manifest")

    def load(self) -> tuple[D.LabeledImageSet, D.LabeledImageSet]:
        if self.format == "idx":
            train = D.load_idx(self.train_images, self.train_labels, self.num_classes, "train", name=self.name)
            val = D.load_idx(self.val_images, self.val_labels, self.num_classes, "val", name=self.name)
        elif self.format == "cifar":
            train = D.load_cifar_binary(self.path, self.variant, "train")
            val = D.load_cifar_binary(self.path, self.variant, "val")
        else:
            train, val = D.load_manifest(self.train_manifest), D.load_manifest(self.val_manifest)
        return train, val


@dataclass
class ContinualConfig:
    steps: int = 5
    seeds: tuple[int, ...] = (0, 1, 2)
    baseline: bool = True
    split_seed: int = 0


@dataclass
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    ctl: str = "easy:0.08,easy:0.2,easy:0.4,easy:0.6,easy:0.8,easy:1.0"
    rcl: str = "0.2,0.4,0.6,0.8"
    scheduler: str = "step,linear,cosine"
    milestones: str = "0.2,0.6,1.0"
    batch_size: str = "8,16,32,64,128"
    lower_bound: str = "0.08,0.2,0.4,0.6"

    def grid(self, kind: str) -> list:
        if kind == "ctl":
            out = []
            for item in self.ctl.split(","):
                mode, _, alpha = item.strip().partition(":")
                out.append((mode, float(alpha)) if alpha else ("easy", float(mode)))
            return out
        if kind == "scheduler":
            return [(s.strip(), float(m)) for s in self.scheduler.split(",") for m in self.milestones.split(",")]
        if kind == "batch_size":
            return [int(v) for v in self.batch_size.split(",")]
        if kind in ("rcl", "lower_bound"):
            return [float(v) for v in getattr(self, kind).split(",")]
        raise ConfigError(f"unknown ablation kind {kind!r}")


_CURRICULUM_KEYS = ("beta_l", "beta_u", "gamma", "milestone", "scheduler", "aspect", "step_interval", "step_factor")


@dataclass
class RunConfig:
    sections: dict[str, dict[str, str]]
    seed: int = 0
    output_dir: str = "out"
    threads: int = 1
    precision: str = "f32"
    data: DataConfig = field(default_factory=DataConfig)
    arch: str = "convnet_bn_3"
    width: float = 1.0
    student_arch: str = ""
    squeeze: SqueezeRecipe = field(default_factory=SqueezeRecipe)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    posttrain: PostTrainRecipe = field(default_factory=PostTrainRecipe)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    teacher: str = "auto"
    relabel_teacher: str = "auto"
    synth: str = "auto"
    soft: str = "auto"
    checkpoint: str = "auto"

    def model_spec(self, input_shape, arch: str | None = None) -> ModelSpec:
        return ModelSpec(arch or self.arch, tuple(input_shape), self.data.num_classes, self.width)

    def stage_payload(self, stage: str) -> dict:
        """Typed, canonical description of everything the stage's output depends on."""
        parts = {
            "data": dataclasses.asdict(self.data),
            "model": {"arch": self.arch, "width": self.width, "student_arch": self.student_arch or self.arch},
            "squeeze": self.squeeze.to_json(),
            "recover": {**self.recovery.to_json(), "teacher": self.teacher},
            "relabel": {"teacher": self.relabel_teacher, "synth": self.synth},
            "posttrain": self.posttrain.to_json(),
            "continual": dataclasses.asdict(self.continual),
            "ablate": dataclasses.asdict(self.ablate),
        }
        payload = {name: parts[name] for name in STAGE_SECTIONS[stage]}
        payload["seed"] = self.seed
        payload["precision"] = self.precision
        return json.loads(json.dumps(payload, sort_keys=True))

    def stage_hash(self, stage: str) -> str:
        return config_hash(self.stage_payload(stage))

    def stage_dir(self, stage: str, suffix: str = "") -> Path:
        name = stage if not suffix else f"{stage}_{suffix}"
        return Path(self.output_dir) / name / self.stage_hash(stage)


def config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def read_sections(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser.read(p)
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; expected a subset of {SECTIONS}")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def apply_overrides(sections: dict[str, dict[str, str]], overrides: Iterable[str]) -> dict[str, dict[str, str]]:
    """``section.key=value`` strings layered over the parsed file."""
    out = {k: dict(v) for k, v in sections.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        out.setdefault(section, {})[name] = value.strip()
    return out


def build_run_config(sections: dict[str, dict[str, str]]) -> RunConfig:
    run = sections.get("run", {})
    _check_keys(run, ("seed", "output_dir", "threads", "precision"), "run")
    model = sections.get("model", {})
    _check_keys(model, ("arch", "width", "student_arch"), "model")
    rec = dict(sections.get("recover", {}))
    cur_section = {k: rec.pop(k) for k in list(rec) if k in _CURRICULUM_KEYS}
    teacher = rec.pop("teacher", "auto")
    iterations = int(rec.get("iterations", RecoveryConfig.iterations))
    curriculum = _build(CurriculumConfig, cur_section, "recover", total_steps=iterations)
    _check_keys(rec, [f.name for f in dataclasses.fields(RecoveryConfig)], "recover")
    relabel = sections.get("relabel", {})
    _check_keys(relabel, ("teacher", "synth"), "relabel")
    post = dict(sections.get("posttrain", {}))
    soft = post.pop("soft", "auto")
    checkpoint = post.pop("checkpoint", "auto")
    for name, cls in (("squeeze", SqueezeRecipe), ("posttrain", PostTrainRecipe), ("data", DataConfig),
                      ("continual", ContinualConfig), ("ablate", AblateConfig)):
        section = post if name == "posttrain" else sections.get(name, {})
        _check_keys(section, [f.name for f in dataclasses.fields(cls)], name)
    precision = run.get("precision", "f32")
    if precision not in ("f32", "f64"):
        raise ConfigError(f"[run] precision must be f32 or f64, got {precision!r}")
    try:
        cfg = RunConfig(
            sections=sections,
            seed=int(run.get("seed", 0)),
            output_dir=run.get("output_dir", "out"),
            threads=int(run.get("threads", 1)),
            precision=precision,
            data=_build(DataConfig, sections.get("data", {}), "data"),
            arch=model.get("arch", "convnet_bn_3"),
            width=float(model.get("width", 1.0)),
            student_arch=model.get("student_arch", ""),
            squeeze=_build(SqueezeRecipe, sections.get("squeeze", {}), "squeeze"),
            recovery=_build(RecoveryConfig, rec, "recover", curriculum=curriculum),
            posttrain=_build(PostTrainRecipe, post, "posttrain"),
            continual=_build(ContinualConfig, sections.get("continual", {}), "continual"),
            ablate=_build(AblateConfig, sections.get("ablate", {}), "ablate"),
            teacher=teacher,
            relabel_teacher=relabel.get("teacher", "auto"),
            synth=relabel.get("synth", "auto"),
            soft=soft,
            checkpoint=checkpoint,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.threads < 1:
        raise ConfigError("[run] threads must be >= 1")
    return cfg


def load_run_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    return build_run_config(apply_overrides(read_sections(path), overrides))
