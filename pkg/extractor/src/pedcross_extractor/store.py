"""PCIFEAT1 feature-store writer.

File layout: 8-byte magic "PCIFEAT1"; little-endian header (u32 row_count,
u32 row_len, u8 layout flag 0=pooled / 1=raw); payload of row_count x
row_len float32 LE values; JSON sidecar index mapping
"video|pedestrian|frame" -> row number.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCIFEAT1"
LAYOUT_POOLED = 0
LAYOUT_RAW = 1


def write_store(path, rows: np.ndarray, index: dict[tuple[str, str, int], int],
                layout: int = LAYOUT_POOLED) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError(f"rows must be 2-D, got shape {rows.shape}")
    if layout not in (LAYOUT_POOLED, LAYOUT_RAW):
        raise ValueError(f"unknown layout flag {layout}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIB", rows.shape[0], rows.shape[1], layout))
        fh.write(rows.tobytes())
    sidecar = {f"{v}|{p}|{f}": row for (v, p, f), row in index.items()}
    with open(path.with_suffix(path.suffix + ".index.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
