"""Run configuration: a key = value file with include support.

Every known key has a documented default below; unknown keys are
rejected with the file and line where they appear.  `include <path>`
pulls in another file (relative paths resolve against the including
file), with later assignments overriding earlier ones.
"""

from pathlib import Path

from .errors import ConfigError

# Defaults for every recognized key.  Training-table values (window size,
# learning rates, weight decays, epochs, loss weights, batch size,
# powerline frequency, class weight) double as the reference settings for
# the full-scale recipe; desk runs override sizes via config files.
DEFAULTS = {
    # global
    "seed": 0,
    "threads": 1,
    "precision": "float64",
    # synthetic generation
    "gen.bpm": 62.0,
    "gen.noise": "none",
    "gen.level": 0.0,
    "gen.duration": 30.0,
    "gen.subjects": 0,          # 0 = single record pair; >0 = graded corpus
    "gen.blocks_per_subject": 3,
    "gen.block_duration": 300.0,
    # encoder
    "model.layers": 2,
    "model.hidden": 512,
    "model.mlp": 256,
    "model.heads": 4,
    "model.window": 8,
    "model.patch_len": 60,
    "model.out_dim": 512,
    # quality scoring
    "sqi.ppg_weight": 0.5,
    "sqi.perfusion_ref": 0.05,
    "sqi.energy_z_threshold": 3.0,
    "sqi.sample_entropy_threshold": 1.5,
    "sqi.entropy_bins": 16,
    # pretraining
    "pretrain.input_length": 9000,
    "pretrain.sampling_rate": 300,
    "pretrain.batch_size": 512,
    "pretrain.lr": 1e-4,
    "pretrain.lr_scheduler": "cosine",
    "pretrain.optimizer": "adam",
    "pretrain.weight_decay": 0.04,
    "pretrain.epochs": 10,
    "pretrain.momentum": 0.7,  # Adam beta1
    "pretrain.lambda_phase": 0.5,
    "pretrain.lambda_amp": 0.5,
    "pretrain.student_temperature": 0.1,
    "pretrain.teacher_temperature": 0.04,
    "pretrain.momentum_start": 0.996,
    "pretrain.momentum_end": 1.0,
    "pretrain.steps": 0,  # 0 = derive from epochs
    # fine-tuning
    "finetune.input_length": 9000,
    "finetune.sampling_rate": 300,
    "finetune.batch_size": 512,
    "finetune.powerline_hz": 60,
    "finetune.lr": 1e-4,
    "finetune.optimizer": "adam",
    "finetune.weight_decay": 0.005,
    "finetune.epochs": 500,
    "finetune.class_weight": 3.54,
    "finetune.freeze_backbone": False,
    "finetune.steps": 0,
    # ablation harness (desk-scale sizes)
    "ablate.subjects": 8,
    "ablate.blocks_per_subject": 3,
    "ablate.block_duration": 300.0,
    "ablate.layers": 2,
    "ablate.hidden": 64,
    "ablate.heads": 4,
    "ablate.out_dim": 64,
    "ablate.steps": 200,
    "ablate.batch_size": 16,
    "ablate.max_pairs": 500,
}


def _parse_value(raw, line_no, path):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _read_file(path, out, seen):
    path = Path(path).resolve()
    if path in seen:
        raise ConfigError(f"circular include of {path}")
    seen.add(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("include "):
            target = stripped[len("include ") :].strip()
            _read_file(path.parent / target, out, seen)
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
        value = _parse_value(raw, line_no, path)
        expected = DEFAULTS[key]
        if isinstance(expected, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}:{line_no}: {key} expects true/false")
        elif isinstance(expected, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}:{line_no}: {key} expects a number")
        out[key] = value


def load_config(path=None, overrides=None):
    """Defaults, then the file (if any), then explicit overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        _read_file(path, cfg, set())
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    if cfg["precision"] not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {cfg['precision']!r}")
    return cfg


def write_default_config(path):
    """Write a fully commented config with every default value."""
    lines = ["# pulsedistill run configuration (all keys, default values)"]
    prev_section = None
    for key in DEFAULTS:
        section = key.split(".")[0] if "." in key else ""
        if section != prev_section:
            lines.append("")
            prev_section = section
        value = DEFAULTS[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
