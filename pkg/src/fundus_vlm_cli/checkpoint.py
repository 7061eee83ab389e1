"""
Binary checkpoint format.

Layout (little-endian)::

    b"VUKP" | u32 version | u32 len + TOML config block
    u32 param count | per param: u16 len + name, u8 ndim, u32 dims..., f32 payload
    u8 has_state | [u64 step | per param: f32 m, f32 v]
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .config import ModelConfig
from .errors import CorruptionError, MigrationError
from .model import ModelParams, param_shapes
from .optim import OptimizerState

try:  # Python 3.11+
    import tomllib  # type: ignore
except Exception:  # pragma: no cover - fallback for Python 3.10
    import tomli as tomllib  # type: ignore
import tomli_w  # type: ignore

logger = logging.getLogger(__name__)

MAGIC = b"VUKP"
FORMAT_VERSION = 1
DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    params: ModelParams
    state: Optional[OptimizerState] = None
    meta: Dict[str, Any] = field(default_factory=dict)


def _f32(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def encode_checkpoint(params: ModelParams, state: Optional[OptimizerState] = None, meta: Optional[Dict[str, Any]] = None) -> bytes:
    header = {"model": dataclasses.asdict(params.config), "meta": dict(meta or {})}
    config_block = tomli_w.dumps(header).encode("utf-8")
    parts: List[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(config_block)), config_block]
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(_f32(tensor.data))
    if state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1) + struct.pack("<Q", state.step))
        for name, tensor in params.items():
            parts.append(_f32(state.m.get(name, np.zeros_like(tensor.data))))
            parts.append(_f32(state.v.get(name, np.zeros_like(tensor.data))))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: Path, params: ModelParams, state: Optional[OptimizerState] = None, meta: Optional[Dict[str, Any]] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(params, state, meta)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    logger.info("Saved checkpoint %s (%d bytes, %d arrays)", path, len(payload), len(params))
    return path


class _Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CorruptionError("checkpoint is truncated")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Verify magic, version and hash before anything is built."""
    if len(data) < len(MAGIC) + 4 + DIGEST_SIZE:
        raise CorruptionError("checkpoint is truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise MigrationError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint hash mismatch")

    reader = _Reader(body, offset=8)
    (config_len,) = reader.unpack("<I")
    try:
        header = tomllib.loads(reader.take(config_len).decode("utf-8"))
        config = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["model"].items()})
    except (UnicodeDecodeError, tomllib.TOMLDecodeError, KeyError, TypeError) as exc:
        raise CorruptionError(f"checkpoint config block is unreadable ({exc})") from exc

    expected = {name: shape for name, shape, _ in param_shapes(config)}
    (count,) = reader.unpack("<I")
    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = tuple(reader.unpack(f"<{ndim}I")) if ndim else ()
        if expected.get(name) != shape:
            raise CorruptionError(f"parameter {name} has shape {list(shape)}, config expects {expected.get(name)}")
        tensors[name] = Tensor(reader.floats(shape), requires_grad=True, name=name)
    missing = set(expected) - set(tensors)
    if missing:
        raise CorruptionError(f"checkpoint lacks parameters: {', '.join(sorted(missing))}")

    state: Optional[OptimizerState] = None
    (has_state,) = reader.unpack("<B")
    if has_state:
        (step,) = reader.unpack("<Q")
        state = OptimizerState(step=step)
        for name, tensor in tensors.items():
            state.m[name] = reader.floats(tensor.shape)
            state.v[name] = reader.floats(tensor.shape)
    if reader.offset != len(body):
        raise CorruptionError(f"{len(body) - reader.offset} trailing bytes after checkpoint records")

    params = ModelParams(config=config, tensors={name: tensors[name] for name in expected})
    return Checkpoint(params=params, state=state, meta=dict(header.get("meta", {})))


def load_checkpoint(path: Path) -> Checkpoint:
    checkpoint = decode_checkpoint(path.read_bytes())
    logger.info("Loaded checkpoint %s (%d parameters)", path, checkpoint.params.num_parameters)
    return checkpoint


def prune_checkpoints(directory: Path, keep: int, pattern: str = "epoch-*.vukp") -> List[Path]:
    """Delete all but the ``keep`` most recent matching checkpoints; returns removed paths."""
    found = sorted(directory.glob(pattern))
    removed = found[:-keep] if keep > 0 else found
    for path in removed:
        path.unlink()
        logger.debug("Removed old checkpoint %s", path)
    return removed
