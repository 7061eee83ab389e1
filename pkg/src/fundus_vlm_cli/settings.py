"""Structured configuration loader using TOML."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import dpath

from .config import DEFAULT_CONFIG_FILE, EvalSettings, ForgeSettings, ModelConfig, TrainConfig
from .errors import ValidationError

try:  # Python 3.11+
    import tomllib  # type: ignore
except Exception:  # pragma: no cover - fallback for Python 3.10
    import tomli as tomllib  # type: ignore
import tomli_w  # type: ignore

logger = logging.getLogger(__name__)

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "forge": ForgeSettings,
    "eval": EvalSettings,
}


@dataclass
class AppSettings:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forge: ForgeSettings = field(default_factory=ForgeSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def problems(self) -> List[Tuple[str, str]]:
        found = self.model.problems() + self.train.problems()
        if self.train.max_tokens != self.model.max_tokens:
            found.append(("train/max_tokens", f"differs from model/max_tokens ({self.model.max_tokens})"))
        if not 0.0 < self.eval.confidence < 1.0:
            found.append(("eval/confidence", "must lie in (0, 1)"))
        if self.eval.resamples < 1:
            found.append(("eval/resamples", "must be >= 1"))
        if not 0.0 <= self.forge.modality_threshold <= 1.0:
            found.append(("forge/modality_threshold", "must lie in [0, 1]"))
        if self.forge.records < 0:
            found.append(("forge/records", "must be >= 0"))
        return found


def _coerce(value: Any, default: Any, path: str, problems: List[Tuple[str, str]]) -> Any:
    """Convert a TOML value to the type of the dataclass default; record a problem on mismatch."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, tuple):
        if isinstance(value, list) and all(isinstance(v, (int, float)) for v in value):
            return tuple(float(v) for v in value)
    elif isinstance(default, list):
        if isinstance(value, list):
            return [str(v).strip() for v in value if str(v).strip()]
    elif isinstance(default, str) or default is None:
        if isinstance(value, str):
            return value.strip() or None if default is None else value.strip()
    problems.append((path, f"unexpected value {value!r}"))
    return default


def _build_section(data: Dict[str, Any], section: str, problems: List[Tuple[str, str]]):
    cls = _SECTIONS[section]
    instance = cls()
    raw_section = dpath.get(data, section, default={})
    if not isinstance(raw_section, dict):
        problems.append((section, "must be a table"))
        return instance
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw_section:
        if key not in known:
            problems.append((f"{section}/{key}", "unknown field"))
    for f in dataclasses.fields(cls):
        path = f"{section}/{f.name}"
        value = dpath.get(data, path, default=None)
        if value is None:
            continue
        setattr(instance, f.name, _coerce(value, getattr(instance, f.name), path, problems))
    return instance


def load_app_settings(config_file: Optional[Path], overrides: Optional[Dict[str, Any]] = None) -> AppSettings:
    """
    Load application settings from a TOML file. Missing file yields defaults.
    ``overrides`` maps slash paths (``train/seed``) to values applied after the file.
    All problems are collected and raised together as one ValidationError.
    """
    data = load_config_data(resolve_config_path(config_file)) if config_file is not None else {}
    for path, value in (overrides or {}).items():
        if value is not None:
            dpath.new(data, path, value)

    problems: List[Tuple[str, str]] = []
    for key in data:
        if key not in _SECTIONS:
            problems.append((key, "unknown section"))
    settings = AppSettings(
        model=_build_section(data, "model", problems),
        train=_build_section(data, "train", problems),
        forge=_build_section(data, "forge", problems),
        eval=_build_section(data, "eval", problems),
    )
    problems.extend(settings.problems())
    if problems:
        raise ValidationError(problems)
    return settings


def resolve_config_path(config_file: Optional[Path]) -> Path:
    cfg_path = config_file or DEFAULT_CONFIG_FILE
    return cfg_path if cfg_path.is_absolute() else Path.cwd() / cfg_path


def load_config_data(config_path: Path) -> Dict:
    if not config_path.exists():
        logger.warning("Config file %s not found; using defaults.", config_path)
        return {}
    try:
        with config_path.open("rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError([(str(config_path), f"invalid TOML ({exc})")]) from exc


def snapshot(settings: AppSettings) -> Dict[str, Any]:
    """Effective configuration as plain TOML-serialisable data (None values dropped)."""
    out: Dict[str, Any] = {}
    for section in _SECTIONS:
        values = dataclasses.asdict(getattr(settings, section))
        out[section] = {
            k: list(v) if isinstance(v, tuple) else v for k, v in values.items() if v is not None
        }
    return out


def save_config_data(config_path: Path, data: Dict) -> None:
    config_path.parent.mkdir(parents=True, exist_ok=True)
    with config_path.open("wb") as f:
        tomli_w.dump(data, f)
