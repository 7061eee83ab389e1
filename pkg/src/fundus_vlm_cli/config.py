"""Static configuration and defaults for the fundus VLM CLI."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

DEFAULT_CONFIG_FILE = Path("fundus_vlm.toml")

DEFAULT_SEED = 42

# Fixed slot order of the sign vector.
SIGN_NAMES: Tuple[str, ...] = ("Vascular", "Macular", "FBC", "OCD", "FHE", "Other")
OTHER_SIGN = SIGN_NAMES.index("Other")

# Optional remote dialogue generator; the offline template generator is used when unset.
DIALOGUE_URL_ENV = "FUNDUS_VLM_DIALOGUE_URL"
DEFAULT_DIALOGUE_URL = os.environ.get(DIALOGUE_URL_ENV)

MAX_TOKENS = 512
LN_EPS = 1e-5
INITIAL_LOGIT_SCALE = math.log(1 / 0.07)


@dataclass
class ModelConfig:
    """
    Sizes of the desk-scale model. Nothing here claims to match a published checkpoint.
    """

    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    encoder_layers: int = 2
    text_layers: int = 1
    decoder_layers: int = 2
    heads: int = 4
    ffn_hidden: int = 128
    vocab_size: int = 259
    max_tokens: int = MAX_TOKENS
    sign_count: int = len(SIGN_NAMES)
    sign_threshold: float = 0.5
    projector_mode: str = "patches"
    init_std: float = 0.02

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def problems(self) -> List[Tuple[str, str]]:
        found: List[Tuple[str, str]] = []
        for name in ("image_size", "patch_size", "embed_dim", "heads", "ffn_hidden", "vocab_size", "max_tokens"):
            if getattr(self, name) < 1:
                found.append((f"model/{name}", "must be >= 1"))
        for name in ("encoder_layers", "text_layers", "decoder_layers"):
            if getattr(self, name) < 0:
                found.append((f"model/{name}", "must be >= 0"))
        if self.patch_size >= 1 and self.image_size % self.patch_size:
            found.append(("model/image_size", f"{self.image_size} is not divisible by patch_size {self.patch_size}"))
        if self.heads >= 1 and self.embed_dim % self.heads:
            found.append(("model/embed_dim", f"{self.embed_dim} is not divisible by heads {self.heads}"))
        if self.sign_count != len(SIGN_NAMES):
            found.append(("model/sign_count", f"must be {len(SIGN_NAMES)}"))
        if not 0.0 <= self.sign_threshold <= 1.0:
            found.append(("model/sign_threshold", "must lie in [0, 1]"))
        if self.projector_mode not in ("patches", "pooled"):
            found.append(("model/projector_mode", "must be 'patches' or 'pooled'"))
        return found


@dataclass
class TrainConfig:
    """
    Optimizer, schedule and loss-weight settings for one pretrain or finetune run.
    """

    base_lr: float = 0.001
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.02
    adam_eps: float = 1e-8
    batch_size: int = 8
    pretrain_epochs: int = 10
    finetune_epochs: int = 30
    warmup_epochs: int = 1
    lr_floor: float = 0.0
    max_tokens: int = MAX_TOKENS
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    label_smoothing: float = 0.0
    sign_source: str = "target"
    contrast_factor: float = 1.3
    color_space: str = "rgb"
    keep_checkpoints: int = 2
    seed: int = DEFAULT_SEED

    @property
    def absolute_lr(self) -> float:
        from .optim import compute_absolute_lr

        return compute_absolute_lr(self.base_lr, self.batch_size)

    def problems(self) -> List[Tuple[str, str]]:
        found: List[Tuple[str, str]] = []
        if self.base_lr < 0:
            found.append(("train/base_lr", "must be >= 0"))
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            found.append(("train/betas", "expects two values in [0, 1)"))
        if self.weight_decay < 0:
            found.append(("train/weight_decay", "must be >= 0"))
        if self.batch_size < 1:
            found.append(("train/batch_size", "must be >= 1"))
        for name in ("pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) < 1:
                found.append((f"train/{name}", "must be >= 1"))
        if self.warmup_epochs < 0:
            found.append(("train/warmup_epochs", "must be >= 0"))
        if self.lr_floor != 0.0:
            found.append(("train/lr_floor", "the schedule decays to 0; other floors are not supported"))
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            found.append(("train/loss_weights", "expects three non-negative weights"))
        elif not any(self.loss_weights):
            found.append(("train/loss_weights", "at least one weight must be positive"))
        if not 0.0 <= self.label_smoothing < 1.0:
            found.append(("train/label_smoothing", "must lie in [0, 1)"))
        if self.sign_source not in ("target", "predicted"):
            found.append(("train/sign_source", "must be 'target' or 'predicted'"))
        if self.contrast_factor < 0:
            found.append(("train/contrast_factor", "must be >= 0"))
        if self.color_space not in ("rgb", "hsv"):
            found.append(("train/color_space", "must be 'rgb' or 'hsv'"))
        if self.keep_checkpoints < 1:
            found.append(("train/keep_checkpoints", "must be >= 1"))
        return found


@dataclass
class ForgeSettings:
    records: int = 100
    image_size: int = 32
    max_diseases: int = 2
    healthy_fraction: float = 0.2
    long_answer_words: int = 30
    max_answer_words: int = 200
    modality_threshold: float = 0.5
    workers: int = 1
    dialogue_url: Optional[str] = DEFAULT_DIALOGUE_URL
    dialogue_timeout: float = 60.0


@dataclass
class EvalSettings:
    confidence: float = 0.95
    resamples: int = 10_000
    reference_responder: Optional[str] = None
    mcq_cases: int = 2233
    responders: List[str] = field(default_factory=list)
