"""Caption cleaning, modality handling and image preprocessing."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Union

import numpy as np
from matplotlib import colors as mcolors

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

CAPTION_NOISE_WORDS = (
    "arrow",
    "line",
    "star",
    "red",
    "yellow",
    "blue",
    "orange",
    "green",
    "purple",
    "violet",
    "black",
    "white",
    "gray",
)
_NOISE_RE = re.compile(r"\b(?:" + "|".join(CAPTION_NOISE_WORDS) + r")\b", re.IGNORECASE)
_SPACE_RE = re.compile(r"\s+")

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class Modality(str, Enum):
    CT = "CT"
    FA = "FA"
    FUNDUS = "Fundus"
    MRI = "MRI"
    OCT = "OCT"
    PATHOLOGY = "Pathology"
    PET = "PET"
    XRAY = "X-ray"
    TABLE_CHART = "TableChart"


@dataclass(frozen=True)
class PretrainPair:
    image_ref: str
    caption: str
    modality: Modality
    confidence: float

    @classmethod
    def from_dict(cls, row: dict) -> "PretrainPair":
        return cls(
            image_ref=str(row["image"]),
            caption=str(row["caption"]),
            modality=Modality(row["modality"]),
            confidence=float(row.get("confidence", 1.0)),
        )


def clean_caption(text: str) -> str:
    """Drop listed annotation words (whole word, any case) and collapse whitespace."""
    return _SPACE_RE.sub(" ", _NOISE_RE.sub(" ", text)).strip()


def prepend_modality(caption: str, modality: Union[Modality, str]) -> str:
    """Not idempotent: calling twice prefixes twice."""
    modality = Modality(modality)
    if modality is Modality.TABLE_CHART:
        raise ContractError("TableChart pairs are discarded before captioning")
    return f"This is a {modality.value} image. {caption}"


def filter_modality(pairs: Iterable[PretrainPair], threshold: float) -> List[PretrainPair]:
    if not 0.0 <= threshold <= 1.0:
        raise ContractError("modality threshold must lie in [0, 1]")
    kept = [p for p in pairs if p.modality is not Modality.TABLE_CHART and p.confidence >= threshold]
    return kept


def _check_rgb(image: np.ndarray, op: str) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DimensionError(op, image.shape, ("H", "W", 3))
    return image


def enhance_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    """
    Blend every pixel with the mean Rec.601 luminance g of the whole image:
    out = clip(g + factor * (px - g), 0, 1). Factor 1 returns the input unchanged.
    """
    if factor < 0:
        raise ContractError("contrast factor must be >= 0")
    image = _check_rgb(image, "enhance_contrast")
    if factor == 1.0:
        return image.copy()
    gray = float((image @ LUMA_WEIGHTS).mean())
    if factor == 0.0:
        return np.full_like(image, gray)
    return np.clip(gray + factor * (image - gray), 0.0, 1.0)


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """Hexcone conversion; H, S and V all in [0, 1]."""
    return mcolors.rgb_to_hsv(np.clip(_check_rgb(image, "rgb_to_hsv"), 0.0, 1.0))


def hsv_to_rgb(image: np.ndarray) -> np.ndarray:
    return mcolors.hsv_to_rgb(np.clip(_check_rgb(image, "hsv_to_rgb"), 0.0, 1.0))


def preprocess_image(image: np.ndarray, contrast_factor: float = 1.0, color_space: str = "rgb") -> np.ndarray:
    out = enhance_contrast(image, contrast_factor)
    if color_space == "hsv":
        out = rgb_to_hsv(out)
    elif color_space != "rgb":
        raise ContractError(f"unknown color space {color_space!r}")
    return out
