"""Image files (PPM/P6 via Pillow, raw .npy blobs) and the synthetic fundus renderer."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import SIGN_NAMES
from .errors import ContractError, DimensionError
from .utils import make_rng

logger = logging.getLogger(__name__)


def write_image(path: Path, image: np.ndarray) -> Path:
    """[0,1] float H x W x 3 -> binary PPM (P6), or a raw float blob for ``.npy`` paths."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DimensionError("write_image", image.shape, ("H", "W", 3))
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, image)
        return path
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")
    return path


def read_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        image = np.load(path).astype(np.float64)
    else:
        with Image.open(path) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DimensionError("read_image", image.shape, ("H", "W", 3))
    return image


def _disc(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, radius: float) -> np.ndarray:
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius**2


def _paint(image: np.ndarray, mask: np.ndarray, color: Sequence[float], alpha: float = 1.0) -> None:
    image[mask] = (1.0 - alpha) * image[mask] + alpha * np.asarray(color)


def synth_fundus_image(signs: Sequence[int], size: int = 32, seed: int = 0) -> np.ndarray:
    """
    Deterministic desk-scale fundus: retina disc, optic disc, macula and vessels.
    Each set sign slot adds its own visual cue so the sign head has something to learn.
    """
    if len(signs) != len(SIGN_NAMES):
        raise DimensionError("synth_fundus_image", (len(signs),), (len(SIGN_NAMES),))
    if size < 8:
        raise ContractError("synthetic fundus images need size >= 8")
    vascular, macular, fbc, ocd, fhe, other = (bool(s) for s in signs)
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    image = np.zeros((size, size, 3))

    retina = _disc(yy, xx, 0.5, 0.5, 0.47)
    radial = np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2) / 0.47
    base = np.stack([0.78 - 0.25 * radial, 0.36 - 0.15 * radial, 0.14 - 0.05 * radial], axis=-1)
    image[retina] = base[retina]

    if fbc:
        stripes = 0.5 + 0.5 * np.sin(14.0 * xx + 9.0 * yy + rng.uniform(0, np.pi))
        tint = np.stack([0.15 * stripes, 0.05 * stripes, 0.0 * stripes], axis=-1)
        image[retina] = np.clip(image[retina] - tint[retina], 0.0, 1.0)

    vessel_width = 0.035 if vascular else 0.018
    wiggle = 0.09 if vascular else 0.03
    for offset in (-0.18, 0.0, 0.18):
        curve = 0.5 + offset + wiggle * np.sin(10.0 * xx + rng.uniform(0, 2 * np.pi))
        vessel = retina & (np.abs(yy - curve) < vessel_width) & (xx < 0.75)
        _paint(image, vessel, (0.45, 0.05, 0.05) if vascular else (0.6, 0.12, 0.08), 0.8)

    disc_radius = 0.13 if ocd else 0.08
    _paint(image, _disc(yy, xx, 0.5, 0.75, disc_radius), (0.98, 0.9, 0.6))
    if ocd:
        _paint(image, _disc(yy, xx, 0.5, 0.75, 0.09), (1.0, 1.0, 0.92))

    _paint(image, _disc(yy, xx, 0.5, 0.35, 0.07), (0.35, 0.12, 0.05), 0.7)
    if macular:
        ring = _disc(yy, xx, 0.5, 0.35, 0.13) & ~_disc(yy, xx, 0.5, 0.35, 0.08)
        _paint(image, ring, (0.95, 0.85, 0.3), 0.8)

    if fhe:
        for _ in range(4):
            cy, cx = rng.uniform(0.25, 0.75, size=2)
            _paint(image, retina & _disc(yy, xx, cy, cx, 0.05), (0.3, 0.0, 0.0), 0.9)
        for _ in range(4):
            cy, cx = rng.uniform(0.25, 0.75, size=2)
            _paint(image, retina & _disc(yy, xx, cy, cx, 0.03), (1.0, 0.95, 0.5), 0.9)

    if other:
        _paint(image, retina, (0.6, 0.6, 0.6), 0.35)

    image += rng.normal(0.0, 0.01, size=image.shape) * retina[..., None]
    return np.clip(image, 0.0, 1.0)
