"""
Run configuration: dataset presets, `key = value` config files, and the
resolution order settings defaults < preset < config file < flags.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from django.conf import settings

from .action_net import ModelConfig
from .errors import ConfigError
from .feature_io import AugmentPolicy
from .trainer import Schedule

logger = logging.getLogger(__name__)

# Windows (dynamic/static), batch size, epochs and step-decay epochs per dataset.
# Gymnastics routines decay in their last 100 and last 50 epochs.
PRESETS: Dict[str, Dict[str, object]] = {
    "mit": {"window_dynamic": 48, "window_static": 150, "batch_size": 16, "epochs": 200, "decay_epochs": (150, 180)},
    "rg-ball": {"window_dynamic": 26, "window_static": 80, "batch_size": 32, "epochs": 400, "decay_epochs": (300, 350)},
    "rg-clubs": {"window_dynamic": 26, "window_static": 80, "batch_size": 32, "epochs": 300, "decay_epochs": (200, 250)},
    "rg-hoop": {"window_dynamic": 26, "window_static": 80, "batch_size": 32, "epochs": 500, "decay_epochs": (400, 450)},
    "rg-ribbon": {"window_dynamic": 26, "window_static": 80, "batch_size": 32, "epochs": 300, "decay_epochs": (200, 250)},
    "synthetic": {"window_dynamic": 26, "window_static": 80, "batch_size": 8, "epochs": 300, "decay_epochs": ()},
    "custom": {},
}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "custom"
    manifest: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""
    seed: int = 0
    streams: str = "ts"
    attention: str = "caa"
    attention_norm: str = "softmax"
    adjacency_grad: bool = False
    kernel_scale: float = 1.0
    dropout: float = 0.5
    window_dynamic: int = 26
    window_static: int = 80
    window_mode: str = "random-shift"
    batch_size: int = 32
    epochs: int = 100
    decay_epochs: Tuple[int, ...] = ()
    decay_rate: float = 0.1
    lr_attention: float = 0.01
    lr_prediction: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    workers: int = 1
    split: str = "test"
    video_ids: Tuple[str, ...] = ()
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    n_videos: int = 40
    n_test: int = 10
    n_dynamic: int = 26
    n_static: int = 80
    key_count: int = 4
    noise_sigma: float = 0.02

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            streams=self.streams,
            attention=self.attention,
            kernel_scale=self.kernel_scale,
            dropout=self.dropout,
            seed=self.seed,
            attention_norm=self.attention_norm,
            adjacency_grad=self.adjacency_grad,
        )

    def schedule(self) -> Schedule:
        return Schedule(
            total_epochs=self.epochs,
            decay_epochs=self.decay_epochs,
            decay_rate=self.decay_rate,
            batch_size=self.batch_size,
        )

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(
            window_dynamic=self.window_dynamic,
            window_static=self.window_static,
            mode=self.window_mode,
        )

    def optimizer(self) -> Dict[str, float]:
        return {
            "lr_attention": self.lr_attention,
            "lr_prediction": self.lr_prediction,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
        }


CONFIG_KEYS = tuple(item.name for item in fields(RunConfig))


def settings_defaults() -> Dict[str, object]:
    defaults = dict(getattr(settings, "ACTIONNET_DEFAULTS", {}))
    defaults["workers"] = getattr(settings, "ACTIONNET_WORKERS", 1)
    return {key: value for key, value in defaults.items() if key in CONFIG_KEYS}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse UTF-8 `key = value` lines; '#' starts a comment."""
    values: Dict[str, str] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}:{line_number}: expected 'key = value'", code="bad_config_line")
        key, value = (part.strip() for part in content.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{line_number}: unknown key '{key}'", code="unknown_key")
        values[key] = value
    return values


def parse_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", code="not_found") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config file is not UTF-8: {path}", code="bad_encoding") from None
    except OSError as exc:
        raise ConfigError(f"config file is unreadable: {path} ({exc.strerror})", code="unreadable") from None
    return parse_config_text(text, source=str(path))


def resolve_run_config(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """Merge defaults, preset, config file and flags, then validate."""
    from .serializers import RunConfigSerializer

    explicit: Dict[str, object] = {}
    if config_path:
        explicit.update(parse_config_file(config_path))
    explicit.update({key: value for key, value in (overrides or {}).items() if value is not None})

    preset = str(explicit.get("preset") or "custom").strip().lower()
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}'; choose from {', '.join(PRESETS)}", code="unknown_preset")

    merged: Dict[str, object] = asdict(RunConfig())
    merged.update(settings_defaults())
    merged.update(PRESETS[preset])
    merged.update(explicit)
    merged["preset"] = preset

    serializer = RunConfigSerializer(data=merged)
    serializer.is_valid(raise_exception=True)
    return serializer.save()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: RunConfig) -> str:
    lines = ["# Resolved run configuration; replay with --config."]
    for key in CONFIG_KEYS:
        lines.append(f"{key} = {_format_value(getattr(config, key))}")
    return "\n".join(lines) + "\n"


def write_config_snapshot(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_config(config), encoding="utf-8")
    return path
