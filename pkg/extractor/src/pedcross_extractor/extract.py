"""End-to-end feature dumping: tracks + frame images -> PCIFEAT1 store."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbones import LAYOUT_RAW, ExtractorSpec, FeatureBackbone
from .preprocess import crop_pedestrian, preprocess_crop
from .store import LAYOUT_POOLED as STORE_POOLED
from .store import LAYOUT_RAW as STORE_RAW
from .store import write_store


def read_tracks(path) -> list[dict]:
    """Minimal reader for the JSON-lines track format."""
    tracks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                tracks.append(json.loads(line))
    return tracks


def frame_image_path(images_dir, video_id: str, frame: int) -> Path:
    """Frame files live at <images>/<video_id>/<frame:05d>.png (or .jpg)."""
    base = Path(images_dir) / video_id
    for name in (f"{frame:05d}.png", f"{frame:05d}.jpg", f"{frame}.png", f"{frame}.jpg"):
        candidate = base / name
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no image for {video_id} frame {frame} under {base}")


def extract_tracks(
    tracks_path,
    images_dir,
    out_path,
    spec: ExtractorSpec,
    batch_size: int = 16,
) -> int:
    """One store row per (pedestrian, frame); returns the row count."""
    backbone = FeatureBackbone(spec)
    crops: list[torch.Tensor] = []
    keys: list[tuple[str, str, int]] = []
    for track in read_tracks(tracks_path):
        for frame in track["frames"]:
            image = np.asarray(
                Image.open(
                    frame_image_path(images_dir, track["video_id"], frame["frame"])
                ).convert("RGB")
            )
            crop = crop_pedestrian(image, frame["bbox"])
            crops.append(preprocess_crop(crop))
            keys.append((track["video_id"], track["pedestrian_id"], frame["frame"]))

    rows = extract_crops(crops, spec, backbone, batch_size)
    index = {key: i for i, key in enumerate(keys)}
    layout = STORE_RAW if spec.layout == LAYOUT_RAW else STORE_POOLED
    write_store(out_path, rows, index, layout=layout)
    return len(keys)


def extract_crops(
    crops: list[torch.Tensor],
    spec: ExtractorSpec,
    backbone: FeatureBackbone | None = None,
    batch_size: int = 16,
) -> np.ndarray:
    """Feature rows for preprocessed crops, deterministic in eval mode."""
    if backbone is None:
        backbone = FeatureBackbone(spec)
    if not crops:
        return np.zeros((0, spec.row_len), dtype=np.float32)
    out = []
    for start in range(0, len(crops), batch_size):
        batch = torch.stack(crops[start : start + batch_size])
        out.append(backbone(batch).numpy().astype(np.float32))
    return np.concatenate(out)
