import hashlib
from pathlib import Path

import numpy as np
import pytest

from ddistill import cli
from ddistill.config import ConfigError, apply_overrides, build_run_config, config_hash, load_run_config, read_sections
from ddistill.data import write_idx
from ddistill.models import load_checkpoint

ROOT = Path(__file__).resolve().parents[1]

TINY = """\
[run]
seed = 0
output_dir = {out}

[data]
format = idx
name = toy
num_classes = 4
train_images = {d}/train-images.idx
train_labels = {d}/train-labels.idx
val_images = {d}/val-images.idx
val_labels = {d}/val-labels.idx

[model]
arch = convnet_bn_3
width = 0.25

[squeeze]
lr = 0.05
batch_size = 16
epochs = 1
augment = crop

[recover]
ipc = 2
iterations = 3
batch_size = 8
scheduler = cosine
milestone = 1.0

[posttrain]
batch_size = 4
epochs = 2
flip = false

[continual]
steps = 2
seeds = 0

[ablate]
seeds = 0
scheduler = step,cosine
milestones = 0.5,1.0
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 48), ("val", 16)):
        labels = np.arange(n) % 4
        images = (rng.random((n, 16, 16)) * 64 + labels[:, None, None] * 48).astype(np.uint8)
        write_idx(tmp_path / f"{split}-images.idx", images)
        write_idx(tmp_path / f"{split}-labels.idx", labels.astype(np.uint8))
    path = tmp_path / "tiny.ini"
    path.write_text(TINY.format(out=tmp_path / "out", d=tmp_path))
    return path


def _tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_full_pipeline_idempotent_and_report_read_only(tiny_cfg, capsys):
    for stage in ("squeeze", "recover", "relabel", "posttrain", "eval", "continual"):
        assert cli.main([stage, "--config", str(tiny_cfg)]) == 0, stage
    assert cli.main(["ablate", "scheduler", "--config", str(tiny_cfg)]) == 0
    out = tiny_cfg.parent / "out"
    stage_dirs = [d for d in out.glob("*/*") if d.parent.name != "report"]
    assert all((d / "DONE").exists() and (d / "config.json").exists() for d in stage_dirs)
    capsys.readouterr()
    assert cli.main(["recover", "--config", str(tiny_cfg)]) == 0
    assert "up to date" in capsys.readouterr().out
    before = _tree_digest(out)
    assert cli.main(["report", "--config", str(tiny_cfg)]) == 0
    after = _tree_digest(out)
    assert {k: v for k, v in after.items() if not k.startswith("report/")} == before
    summary = (out / "report" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("stage,config_hash,run_id,metric")
    assert any(line.startswith("ablate_scheduler,") for line in summary)
    grid = next(out.glob("ablate_scheduler/*/grid.csv")).read_text().splitlines()
    assert len(grid) == 1 + 4
    curves = next(out.glob("continual/*/continual_curves.csv")).read_text().splitlines()
    assert curves[0] == "memory,seed,step,classes_seen,top1" and len(curves) == 1 + 2 * 2


def test_force_recomputes_identically(tiny_cfg):
    assert cli.main(["squeeze", "--config", str(tiny_cfg)]) == 0
    ckpt = next((tiny_cfg.parent / "out" / "squeeze").glob("*/teacher.ckpt"))
    first = load_checkpoint(ckpt).fingerprint()
    assert cli.main(["squeeze", "--config", str(tiny_cfg), "--force"]) == 0
    assert load_checkpoint(ckpt).fingerprint() == first


def test_collision_with_foreign_artifacts_refused(tiny_cfg, capsys):
    assert cli.main(["squeeze", "--config", str(tiny_cfg)]) == 0
    cfg_json = next((tiny_cfg.parent / "out" / "squeeze").glob("*/config.json"))
    cfg_json.write_text('{"seed": 99}')
    assert cli.main(["squeeze", "--config", str(tiny_cfg)]) == 1
    assert "different configuration" in capsys.readouterr().err


@pytest.mark.parametrize("argv, message", [
    (["recover"], "teacher checkpoint not found"),
    (["relabel"], "not found"),
    (["ablate"], "ablate needs a kind"),
    (["ablate", "dropout"], "ablate needs a kind"),
    (["squeeze", "scheduler"], "takes no positional kind"),
    (["train"], "unknown stage"),
    (["squeeze", "--set", "recover.bogus=1"], "unknown keys"),
    (["squeeze", "--set", "nosuch.key=1"], "unknown section"),
    (["squeeze", "--set", "run.precision=f16"], "precision"),
])
def test_invalid_inputs_exit_one(tiny_cfg, capsys, argv, message):
    assert cli.main(argv[:1] + ["--config", str(tiny_cfg)] + argv[1:]) == 1
    assert message in capsys.readouterr().err


def test_missing_dataset_named(tiny_cfg, capsys):
    (tiny_cfg.parent / "val-labels.idx").unlink()
    assert cli.main(["squeeze", "--config", str(tiny_cfg)]) == 1
    assert "val-labels.idx" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exits_two(tiny_cfg, capsys):
    assert cli.main(["squeeze", "--config", str(tiny_cfg), "--set", "squeeze.lr=inf"]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_output_root_env_override(tiny_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("DDISTILL_OUT", str(tmp_path / "elsewhere"))
    assert cli.main(["squeeze", "--config", str(tiny_cfg)]) == 0
    assert list((tmp_path / "elsewhere" / "squeeze").glob("*/DONE"))


def test_hash_ignores_key_order_and_output_dir(tmp_path):
    a = tmp_path / "a.ini"
    b = tmp_path / "b.ini"
    a.write_text("[recover]\nipc = 5\nlr = 0.1\n[run]\noutput_dir = x\n")
    b.write_text("[run]\noutput_dir = y\n[recover]\nlr = 0.10\nipc = 5\n")
    assert load_run_config(a).stage_hash("recover") == load_run_config(b).stage_hash("recover")
    c = load_run_config(a, ["recover.ipc=6"])
    assert c.recovery.ipc == 6 and c.stage_hash("recover") != load_run_config(a).stage_hash("recover")


def test_hash_scoping_by_stage(tmp_path):
    base = build_run_config({})
    post = build_run_config(apply_overrides({}, ["posttrain.epochs=7"]))
    assert base.stage_hash("recover") == post.stage_hash("recover")
    assert base.stage_hash("posttrain") != post.stage_hash("posttrain")
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})


def test_override_syntax_errors():
    with pytest.raises(ConfigError, match="section.key=value"):
        apply_overrides({}, ["recover.ipc"])
    with pytest.raises(ConfigError, match="section.key=value"):
        apply_overrides({}, ["ipc=3"])


def test_typed_values_from_ini():
    cfg = build_run_config(apply_overrides({}, [
        "recover.betas=0.5,0.9", "recover.classes=1,2", "squeeze.augment=crop,cutout", "posttrain.flip=no",
        "recover.scheduler=linear", "recover.iterations=40",
    ]))
    assert cfg.recovery.betas == (0.5, 0.9) and cfg.recovery.classes == (1, 2)
    assert cfg.squeeze.augment == ("crop", "cutout") and cfg.posttrain.flip is False
    assert cfg.recovery.curriculum.scheduler == "linear" and cfg.recovery.curriculum.total_steps == 40
    with pytest.raises(ConfigError, match="boolean"):
        build_run_config(apply_overrides({}, ["posttrain.flip=maybe"]))


@pytest.mark.parametrize("preset", sorted((ROOT / "configs").glob("*.ini")), ids=lambda p: p.stem)
def test_presets_parse(preset):
    cfg = load_run_config(preset)
    assert set(read_sections(preset)) <= set(cfg.sections) | {"report"}
    assert len(cfg.stage_hash("recover")) == 16
