"""Grayscale image helpers shared by the generator, augmentation and CAM code."""
from __future__ import annotations
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap [0,1] values onto the k/255 grid so PNG save/load is pixel-exact."""
    return to_u8(image).astype(np.float32) / np.float32(255.0)


def save_gray_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_u8(image)).save(path, format="PNG")


def load_gray_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def save_mask_png(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8) > 127


def resize_bilinear(values: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    h, w = out_hw
    src = np.ascontiguousarray(values, dtype=np.float32)
    if src.shape == (h, w):
        return src.copy()
    im = Image.fromarray(src).resize((w, h), Image.Resampling.BILINEAR)
    return np.asarray(im, dtype=np.float32)


def resize_nearest(mask: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    h, w = out_hw
    im = Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).resize((w, h), Image.Resampling.NEAREST)
    return np.asarray(im) > 127


def gray_to_rgb(image: np.ndarray) -> np.ndarray:
    u8 = to_u8(image)
    return np.stack([u8, u8, u8], axis=-1)


def draw_box(rgb: np.ndarray, box: Sequence[float], caption: Optional[str] = None,
             color: Tuple[int, int, int] = (0, 255, 0)) -> np.ndarray:
    im = Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8))
    draw = ImageDraw.Draw(im)
    x1, y1, x2, y2 = (float(v) for v in box)
    # boxes are end-exclusive; PIL rectangles include the far edge
    draw.rectangle([x1, y1, max(x1, x2 - 1), max(y1, y2 - 1)], outline=color, width=1)
    if caption:
        draw.text((x1 + 1, max(0.0, y1 - 11)), caption, fill=color)
    return np.asarray(im)


def save_rgb_png(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")
