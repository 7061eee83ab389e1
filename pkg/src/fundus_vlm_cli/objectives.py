"""Contrastive, sign-classification and text-generation objectives and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, as_tensor, clip, log, log_softmax_row, matmul, sigmoid, take, transpose
from .errors import ContractError, DimensionError

CLS_EPS = 1e-12
UNIT_NORM_TOL = 1e-6
PRETRAIN_WEIGHTS: Tuple[float, float, float] = (0.0, 0.0, 1.0)

Scalar = Union[Tensor, float]


@dataclass
class ContrastiveBatch:
    img_embs: Tensor
    txt_embs: Tensor
    soft_labels: np.ndarray
    temperature: Scalar = 1.0


@dataclass
class SignBatch:
    logits: Tensor
    targets: np.ndarray


@dataclass
class SequenceBatch:
    """Per-sample logits (T_i x V) with targets and a loss mask aligned to logits rows."""

    logits: List[Tensor]
    targets: List[np.ndarray]
    masks: List[np.ndarray]


def soft_labels(n: int, smoothing: float = 0.0) -> np.ndarray:
    """One-hot diagonal targets, optionally label-smoothed; rows sum to 1."""
    if n < 1:
        raise ContractError("soft_labels needs n >= 1")
    return (1.0 - smoothing) * np.eye(n) + smoothing / n


def _soft_cross_entropy(scores: Tensor, labels: np.ndarray) -> Tensor:
    """-(1/N) sum_i t_i . log softmax(scores)[i]."""
    n = scores.shape[0]
    return (log_softmax_row(scores) * labels).sum() * (-1.0 / n)


def clip_loss(batch: ContrastiveBatch) -> Tensor:
    img, txt = batch.img_embs, batch.txt_embs
    if img.ndim != 2 or img.shape != txt.shape:
        raise DimensionError("clip_loss", img.shape, txt.shape)
    n = img.shape[0]
    if n < 1:
        raise ContractError("clip_loss needs at least one pair")
    labels = np.asarray(batch.soft_labels, dtype=np.float64)
    if labels.shape != (n, n):
        raise DimensionError("clip_loss labels", labels.shape, (n, n))
    if (labels < 0).any() or not np.allclose(labels.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise ContractError("soft label rows must be non-negative and sum to 1")
    for name, emb in (("img_embs", img), ("txt_embs", txt)):
        norms = np.linalg.norm(emb.data, axis=1)
        if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise ContractError(f"{name} rows must be unit-normalised (max |norm - 1| = {np.abs(norms - 1.0).max():.3e})")

    scores = matmul(img, transpose(txt)) * batch.temperature
    loss_img = _soft_cross_entropy(scores, labels)
    loss_text = _soft_cross_entropy(transpose(scores), labels.T)
    return (loss_img + loss_text) * 0.5


def _check_targets(targets: np.ndarray, logits: Tensor) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise DimensionError("cls_loss", logits.shape, targets.shape)
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ContractError("sign targets must be 0 or 1")
    return targets


def _bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    p = clip(sigmoid(logits), CLS_EPS, 1.0 - CLS_EPS)
    return -(log(p) * targets + log(1.0 - p) * (1.0 - targets))


def cls_loss(batch: SignBatch) -> Tensor:
    """Sum over sign categories of the per-category binary cross-entropy, mean over samples."""
    targets = _check_targets(batch.targets, batch.logits)
    n = batch.logits.shape[0]
    return _bce(batch.logits, targets).sum() * (1.0 / n)


def cls_loss_per_category(batch: SignBatch) -> List[float]:
    targets = _check_targets(batch.targets, batch.logits)
    n = batch.logits.shape[0]
    per_elem = _bce(batch.logits.detach(), targets).data
    return [float(per_elem[:, k].sum() / n) for k in range(per_elem.shape[1])]


def llm_loss(batch: SequenceBatch) -> Tensor:
    """-(1/N) sum_i sum_{j in mask_i} log softmax(logits_i[j])[t_ij]."""
    n = len(batch.logits)
    if n == 0 or not (n == len(batch.targets) == len(batch.masks)):
        raise ContractError("llm_loss needs matching, non-empty logits/targets/masks")
    total: Optional[Tensor] = None
    for i, (logits, targets, mask) in enumerate(zip(batch.logits, batch.targets, batch.masks)):
        mask = np.asarray(mask, dtype=bool)
        targets = np.asarray(targets, dtype=np.int64)
        if mask.shape != (logits.shape[0],) or targets.shape != mask.shape:
            raise DimensionError("llm_loss", logits.shape, targets.shape, mask.shape)
        positions = np.flatnonzero(mask)
        if positions.size == 0:
            raise ContractError(f"llm_loss: sample {i} has an empty loss mask")
        chosen = targets[positions]
        if (chosen < 0).any() or (chosen >= logits.shape[1]).any():
            raise ContractError(f"llm_loss: sample {i} has target ids outside [0, {logits.shape[1]})")
        picked = take(log_softmax_row(logits), (positions, chosen)).sum()
        total = picked if total is None else total + picked
    return total * (-1.0 / n)


def effective_weights(weights: Sequence[float], mode: str = "finetune") -> Tuple[float, float, float]:
    if mode == "pretrain":
        return PRETRAIN_WEIGHTS
    if len(weights) != 3:
        raise ContractError("loss weights need exactly three entries")
    return (float(weights[0]), float(weights[1]), float(weights[2]))


def combined_loss(
    clip_value: Optional[Scalar],
    cls_value: Optional[Scalar],
    llm_value: Optional[Scalar],
    weights: Sequence[float],
    mode: str = "finetune",
) -> Tensor:
    """w1 * clip + w2 * cls + w3 * llm; zero-weighted components are left out of the graph."""
    w = effective_weights(weights, mode)
    if any(x < 0 for x in w):
        raise ContractError("loss weights must be non-negative")
    if not any(w):
        raise ContractError("at least one loss weight must be positive")
    total: Optional[Tensor] = None
    for weight, value, name in zip(w, (clip_value, cls_value, llm_value), ("clip", "cls", "llm")):
        if weight == 0.0:
            continue
        if value is None:
            raise ContractError(f"{name} loss is required when its weight is {weight}")
        term = as_tensor(value) * weight
        total = term if total is None else total + term
    return total


def sign_accuracy(logits: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of samples whose thresholded sign vector equals the target exactly."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.size == 0:
        return 0.0
    probs = 1.0 / (1.0 + np.exp(-logits))
    predicted = probs >= threshold
    return float((predicted == targets.astype(bool)).all(axis=1).mean())
