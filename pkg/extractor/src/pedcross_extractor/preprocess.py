"""Crop preprocessing: bbox squaring, 224x224 resize, ImageNet standardization."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

TARGET_SIZE = 224


def square_bbox(bbox, image_size):
    """Square box with side max(w, h), shifted inward at image edges."""
    x1, y1, x2, y2 = bbox
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate bbox {bbox}")
    img_w, img_h = image_size
    side = max(x2 - x1, y2 - y1)
    if side > min(img_w, img_h):
        side = float(min(img_w, img_h))
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    nx1 = min(max(cx - side / 2.0, 0.0), img_w - side)
    ny1 = min(max(cy - side / 2.0, 0.0), img_h - side)
    return nx1, ny1, nx1 + side, ny1 + side


def crop_pedestrian(image: np.ndarray, bbox) -> np.ndarray:
    """Integer-pixel square crop of an (H, W, 3) uint8 frame."""
    h, w = image.shape[:2]
    x1, y1, x2, y2 = square_bbox(bbox, (w, h))
    xi1, yi1 = int(round(x1)), int(round(y1))
    xi2, yi2 = int(round(x2)), int(round(y2))
    xi2, yi2 = min(xi2, w), min(yi2, h)
    crop = image[yi1:yi2, xi1:xi2]
    if crop.size == 0:
        raise ValueError(f"empty crop for bbox {bbox}")
    return crop


def preprocess_crop(crop: np.ndarray) -> torch.Tensor:
    """Resize an (H, W, 3) uint8 crop to 224x224 and standardize per channel."""
    if crop.size == 0:
        raise ValueError("empty crop")
    img = Image.fromarray(np.asarray(crop, dtype=np.uint8))
    resized = np.asarray(
        img.resize((TARGET_SIZE, TARGET_SIZE), Image.BILINEAR), dtype=np.float32
    )
    scaled = resized / 255.0
    standardized = (scaled - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(standardized.transpose(2, 0, 1).copy())
