"""Run manifests: enough to repeat a command bit-for-bit from its output directory."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .errors import ValidationError
from .settings import load_config_data, save_config_data
from .utils import sha256_file

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.toml"
SNAPSHOT_NAME = "config.toml"


def manifest_path(out: Path) -> Path:
    """``<out>/manifest.toml`` for run directories, ``<stem>.manifest.toml`` beside file outputs."""
    if out.suffix:
        return out.with_name(f"{out.stem}.{MANIFEST_NAME}")
    return out / MANIFEST_NAME


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=utc_now)
    finished: Optional[str] = None
    outputs: List[str] = field(default_factory=list)

    def add_input(self, path: Path) -> None:
        if path.is_file():
            self.inputs[str(path)] = sha256_file(path)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "run": {
                "command": self.command,
                "argv": list(self.argv),
                "seed": self.seed,
                "started": self.started,
                "outputs": list(self.outputs),
            },
            "inputs": dict(self.inputs),
            "config": self.config,
        }
        if self.finished is not None:
            data["run"]["finished"] = self.finished
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        run = data.get("run")
        if not isinstance(run, dict) or "command" not in run or "argv" not in run:
            raise ValidationError([("run", "manifest needs a [run] table with command and argv")])
        return cls(
            command=str(run["command"]),
            argv=[str(a) for a in run["argv"]],
            seed=int(run.get("seed", 0)),
            config=dict(data.get("config", {})),
            inputs={str(k): str(v) for k, v in data.get("inputs", {}).items()},
            started=str(run.get("started", "")),
            finished=run.get("finished"),
            outputs=[str(o) for o in run.get("outputs", [])],
        )

    def write(self, path: Path) -> Path:
        save_config_data(path, self.to_dict())
        return path

    def finish(self, out: Path, outputs: Sequence[Path] = ()) -> Path:
        self.finished = utc_now()
        self.outputs = [str(p) for p in outputs]
        path = self.write(manifest_path(out))
        logger.info("Wrote run manifest %s (seed %d)", path, self.seed)
        return path


def read_manifest(path: Path) -> RunManifest:
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ValidationError([(str(path), "manifest not found")])
    return RunManifest.from_dict(load_config_data(path))


def changed_inputs(manifest: RunManifest) -> List[str]:
    """Inputs that are missing or whose SHA-256 no longer matches the manifest."""
    changed = []
    for name, digest in manifest.inputs.items():
        path = Path(name)
        if not path.is_file() or sha256_file(path) != digest:
            changed.append(name)
    return changed


def _option(argv: List[str], option: str) -> Optional[str]:
    if option in argv:
        i = argv.index(option)
        if i + 1 < len(argv):
            return argv[i + 1]
    return None


def _replace_option(argv: List[str], option: str, value: str) -> List[str]:
    out = list(argv)
    if option in out:
        i = out.index(option)
        if i + 1 < len(out):
            out[i + 1] = value
            return out
    return out + [option, value]


def replay_argv(manifest: RunManifest, out_dir: Path) -> List[str]:
    """The recorded argv pointed at ``out_dir`` and at a snapshot of the recorded config."""
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot_path = out_dir / SNAPSHOT_NAME
    save_config_data(snapshot_path, manifest.config)
    recorded = _option(manifest.argv, "--out")
    target = out_dir / Path(recorded).name if recorded and Path(recorded).suffix else out_dir
    argv = _replace_option(manifest.argv, "--out", str(target))
    argv = _replace_option(argv, "--config", str(snapshot_path))
    return _replace_option(argv, "--seed", str(manifest.seed))
