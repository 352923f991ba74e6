"""Line-oriented ``key=value`` config files.

Blank lines and lines starting with ``#`` are ignored.  Keys are unique.
Model keys are the ``ModelConfig`` field names; the rest configure a
training stage.
"""
from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

from .numerics import AdamWHyper, ScheduleConfig
from .pipeline import ModelConfig
from .trainer import StageConfig

SEED_ENV = "MIXPIPE_SEED"

STAGE_KEYS = {
    "steps", "peak_lr", "final_lr", "warmup_steps", "total_steps", "shape", "caption_items",
    "text_tokens", "text_seq_len", "samples", "seed", "global_only", "ablation", "beta1", "beta2",
    "eps", "weight_decay", "stage_tag", "captions", "text", "data", "init", "out", "trace",
}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in STAGE_KEYS | MODEL_KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text(), str(path))


def default_seed(fallback: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _flag(v: str) -> bool:
    if v.lower() in ("1", "true", "yes"):
        return True
    if v.lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def model_config(kv: dict[str, str]) -> ModelConfig:
    try:
        return ModelConfig.from_mapping({k: v for k, v in kv.items() if k in MODEL_KEYS})
    except ValueError as e:
        raise ConfigError(f"model config: {e}") from None


def stage_config(kv: dict[str, str], stage: str, seed: int | None = None) -> StageConfig:
    """Stage settings with toy-scale defaults (2000 steps, warmup 50, peak 3e-4)."""
    try:
        steps = int(kv.get("steps", 2000))
        sched = ScheduleConfig(float(kv.get("peak_lr", 3e-4)), float(kv.get("final_lr", 3e-5)),
                               int(kv.get("warmup_steps", 50)), int(kv.get("total_steps", steps)),
                               kv.get("shape", "linear-warmup-cosine"))
        hyper = AdamWHyper(beta1=float(kv.get("beta1", 0.9)), beta2=float(kv.get("beta2", 0.95)),
                           eps=float(kv.get("eps", 1e-8)), weight_decay=float(kv.get("weight_decay", 0.1)))
        if seed is None:
            seed = int(kv["seed"]) if "seed" in kv else default_seed()
        return StageConfig(stage, sched, hyper,
                           caption_items=int(kv.get("caption_items", 8)),
                           text_tokens=int(kv.get("text_tokens", 256)),
                           text_seq_len=int(kv.get("text_seq_len", 64)),
                           samples=int(kv.get("samples", 16)), seed=seed,
                           global_only=_flag(kv.get("global_only", "0")),
                           ablation=_flag(kv.get("ablation", "0")),
                           stage_tag=kv.get("stage_tag", ""))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{stage} config: {e}") from None
