"""Flat dotted-key run configuration with profile defaults and derived seeds."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

COMMON = {
    "seed": 0,
    "encoder.tsm_shift_fraction": 0.125,
    "encoder.tsm_enabled": True,
    "encoder.motion_enabled": True,
    "motion.softmax_temperature": 0.01,
    "motion.kernel_sigma": 5.0,
    "pretrain.corpus": "",
    "pretrain.temperature": 0.01,
    "pretrain.lr": 0.01,
    "pretrain.momentum": 0.9,
    "pretrain.weight_decay": 1e-4,
    "pretrain.key_momentum": 0.999,
    "pretrain.warmup_epochs": 5,
    "pretrain.K": 3,
    "pretrain.clip_len": 4,
    "pretrain.weight.intra": 1.0,
    "pretrain.weight.inter": 1.0,
    "pretrain.weight.segment": 1.0,
    "pretrain.weight.order": 1.0,
    "aug.p_scale": 1.0,
    "aug.scale_min": 0.5,
    "aug.p_jitter": 0.8,
    "aug.jitter_strength": 0.4,
    "aug.p_gray": 0.2,
    "aug.p_blur": 0.5,
    "aug.p_flip": 0.5,
    "finetune.corpus": "",
    "finetune.labels": "soft",
    "finetune.sigma": 3.0,
    "finetune.window": 5,
    "finetune.stride": 3,
    "finetune.candidate_stride": 3,
    "finetune.train_candidate_stride": 0,
    "finetune.include_candidate": False,
    "finetune.lr": 7.5e-4,
    "finetune.epochs": 8,
    "finetune.patience": 3,
    "finetune.dev_fraction": 0.125,
    "finetune.temporal": True,
    "finetune.linear_eval": False,
    "finetune.augment": True,
    "detect.threshold": 0.5,
    "detect.agg_window": 1.0,
    "detect.aggregation": "peaks",
    "eval.thresholds": "0.05:0.5:0.05",
    "eval.aggregation": "micro",
    "eval.matcher": "maximum",
    "workers": 1,
}

PROFILES = {
    "full": {
        "profile": "full",
        "encoder.variant": "full",
        "motion.radius": 7,
        "pretrain.batch_size": 8,
        "pretrain.queue_size": 8192,
        "pretrain.epochs": 400,
        "pretrain.steps": 0,
        "finetune.batch_size": 32,
        "finetune.hidden": 512,
        "finetune.steps_per_epoch": 0,
    },
    "desk": {
        "profile": "desk",
        "encoder.variant": "tiny",
        "motion.radius": 3,
        "pretrain.batch_size": 4,
        "pretrain.queue_size": 256,
        "pretrain.epochs": 0,
        "pretrain.steps": 200,
        "pretrain.lr": 0.001,
        "finetune.batch_size": 16,
        "finetune.hidden": 64,
        "finetune.steps_per_epoch": 300,
    },
}


class ConfigError(ValueError):
    pass


def defaults(profile: str = "desk") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = dict(COMMON)
    cfg.update(PROFILES[profile])
    return cfg


def _coerce(key: str, raw, reference):
    if isinstance(raw, str) and not isinstance(reference, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            if raw.lower() in ("true", "false"):
                raw = raw.lower() == "true"
    if reference is None:
        return raw
    if isinstance(reference, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw
    if isinstance(reference, (int, float)):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        if isinstance(reference, float):
            return float(raw)
        if not float(raw).is_integer():
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(raw)
    return str(raw)


def resolve(config_path=None, overrides=(), profile: str | None = None) -> dict:
    """Merge profile defaults, a JSON config file and ``key=value`` overrides.

    Unknown keys are rejected so typos fail loudly.
    """
    file_cfg = {}
    if config_path:
        file_cfg = json.loads(Path(config_path).read_text())
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{config_path}: expected a JSON object of dotted keys")
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    prof = profile or dict(pairs).get("profile") or file_cfg.get("profile", "desk")
    cfg = defaults(prof)
    for k, v in list(file_cfg.items()) + pairs:
        if k not in cfg:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v, cfg[k])
    return cfg


def stage_seed(root: int, stage: str) -> int:
    """Stable 31-bit seed for ``stage`` derived from the root seed."""
    digest = hashlib.sha256(f"{int(root)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def write_resolved(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return path


def subset(cfg: dict, prefix: str) -> dict:
    """Keys under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
