"""Image-feature storage, pooling, rescaling and categorical embeddings.

Per-frame CNN features are persisted in a binary store so the recurrent
classifier never has to run CNN inference. Categorical pedestrian
attributes get learned embeddings whose width follows
min(floor(cardinality/2) + 1, 50).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"PCIFEAT1"
LAYOUT_POOLED = 0
LAYOUT_RAW = 1

EMBED_DIM_CAP = 50

#: categorical variables in their fixed concatenation order, with cardinalities
CATEGORICAL_CARDINALITIES = {"looking": 2, "orientation": 4, "movement": 2}
#: all optional input variables, concatenation order [image | embeds... | center]
ALL_VARIABLES = ("looking", "orientation", "movement", "center")


class FeatureStoreError(ValueError):
    """Raised on malformed store files or unresolvable lookups."""


def embed_dim(cardinality: int) -> int:
    """Embedding width heuristic: min(floor(N_c / 2) + 1, 50)."""
    if cardinality < 2:
        raise ValueError(f"cardinality must be >= 2, got {cardinality}")
    return min(cardinality // 2 + 1, EMBED_DIM_CAP)


def avg_pool(feature_map: np.ndarray) -> np.ndarray:
    """Average a (C, 7, 7) feature map over its spatial grid -> (C,)."""
    fmap = np.asarray(feature_map)
    if fmap.ndim != 3 or fmap.shape[1:] != (7, 7):
        raise ValueError(f"expected a (C, 7, 7) feature map, got shape {fmap.shape}")
    return fmap.mean(axis=(1, 2))


def rescale_batch(seqs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Divide every image-feature entry by the single max over the batch.

    The max is taken over all sequences together; an all-zero batch is
    returned unchanged instead of dividing by zero.
    """
    if not seqs:
        raise ValueError("empty batch")
    peak = max(float(np.max(s)) for s in seqs)
    if peak == 0.0:
        return [np.array(s, copy=True) for s in seqs]
    return [np.asarray(s, dtype=np.float64) / peak for s in seqs]


@dataclass
class EmbeddingTable:
    cardinality: int
    weights: np.ndarray  # (cardinality, dim)

    @classmethod
    def init(cls, cardinality: int, rng: np.random.Generator) -> "EmbeddingTable":
        dim = embed_dim(cardinality)
        # small symmetric init, stored f32-representable for checkpoint round-trips
        w = rng.uniform(-0.05, 0.05, size=(cardinality, dim)).astype(np.float32)
        return cls(cardinality, w.astype(np.float64))

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def embed(table: EmbeddingTable, code: int) -> np.ndarray:
    """Look up the embedding row for a category code."""
    if not 0 <= code < table.cardinality:
        raise IndexError(f"code {code} out of range [0, {table.cardinality})")
    return table.weights[code]


def input_width(img_dim: int, variables: Sequence[str]) -> int:
    """Total per-frame input width for a variable subset."""
    width = img_dim
    for name in variables:
        if name == "center":
            width += 2
        elif name in CATEGORICAL_CARDINALITIES:
            width += embed_dim(CATEGORICAL_CARDINALITIES[name])
        else:
            raise ValueError(f"unknown variable '{name}'")
    return width


def assemble_input(
    img: np.ndarray,
    looking: int,
    orientation: int,
    movement: int,
    center: tuple[float, float],
    tables: dict[str, EmbeddingTable],
    variables: Sequence[str],
) -> np.ndarray:
    """Concatenate [image | looking | orientation | movement | center].

    Only the variables named in ``variables`` are appended; each categorical
    one must have an embedding table.
    """
    parts = [np.asarray(img, dtype=np.float64)]
    codes = {"looking": looking, "orientation": orientation, "movement": movement}
    for name in ("looking", "orientation", "movement"):
        if name not in variables:
            continue
        if name not in tables:
            raise ValueError(f"variable '{name}' enabled but no embedding table given")
        parts.append(embed(tables[name], codes[name]))
    if "center" in variables:
        parts.append(np.asarray(center, dtype=np.float64))
    return np.concatenate(parts)


def _index_key(video_id: str, pedestrian_id: str, frame: int) -> str:
    return f"{video_id}|{pedestrian_id}|{frame}"


def write_feature_store(
    path,
    rows: np.ndarray,
    index: dict[tuple[str, str, int], int],
    layout: int = LAYOUT_POOLED,
) -> None:
    """Write a PCIFEAT1 store plus its JSON sidecar index.

    ``rows`` is (row_count, row_len) float32; raw layout rows are flattened
    C*7*7 maps. The sidecar maps (video, pedestrian, frame) -> row number.
    """
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
    sidecar = {_index_key(*k): v for k, v in index.items()}
    with open(path.with_suffix(path.suffix + ".index.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)


class FeatureStore:
    """Read-only view of a PCIFEAT1 file; shareable across threads."""

    def __init__(self, path):
        path = Path(path)
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != MAGIC:
                raise FeatureStoreError(f"{path}: bad magic {magic!r}")
            row_count, row_len, layout = struct.unpack("<IIB", fh.read(9))
            payload = fh.read()
        if layout not in (LAYOUT_POOLED, LAYOUT_RAW):
            raise FeatureStoreError(f"{path}: unknown layout flag {layout}")
        expected = row_count * row_len * 4
        if len(payload) != expected:
            raise FeatureStoreError(
                f"{path}: payload is {len(payload)} bytes, header implies {expected}"
            )
        self.path = path
        self.layout = layout
        self.row_len = row_len
        self.rows = np.frombuffer(payload, dtype="<f4").reshape(row_count, row_len)
        index_path = path.with_suffix(path.suffix + ".index.json")
        try:
            with open(index_path, "r", encoding="utf-8") as fh:
                self.index = json.load(fh)
        except FileNotFoundError:
            raise FeatureStoreError(f"missing sidecar index {index_path}") from None

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def feature_dim(self) -> int:
        if self.layout == LAYOUT_RAW:
            return self.row_len // 49
        return self.row_len

    def get(self, video_id: str, pedestrian_id: str, frame: int) -> np.ndarray:
        """Pooled feature vector for one frame; raw rows are pooled on load."""
        key = _index_key(video_id, pedestrian_id, frame)
        try:
            row_no = self.index[key]
        except KeyError:
            raise FeatureStoreError(f"no feature row for {key}") from None
        row = self.rows[row_no]
        if self.layout == LAYOUT_RAW:
            return avg_pool(row.reshape(self.row_len // 49, 7, 7))
        return np.asarray(row, dtype=np.float64)


def attach_features(samples: Iterable, store: FeatureStore, max_misses: int = 10) -> None:
    """Fill each sample's image-feature sequence from the store, in place.

    Collects missing (video, pedestrian, frame) keys and reports the first
    ``max_misses`` of them instead of failing one at a time.
    """
    misses = []
    for sample in samples:
        video_id, pedestrian_id, _ = sample.source
        rows = []
        for frame in sample.frame_indices:
            try:
                rows.append(store.get(video_id, pedestrian_id, int(frame)))
            except FeatureStoreError:
                misses.append((video_id, pedestrian_id, int(frame)))
                rows.append(None)
        if not misses:
            sample.images = np.stack(rows).astype(np.float64)
    if misses:
        shown = ", ".join(f"{v}/{p}@{f}" for v, p, f in misses[:max_misses])
        raise FeatureStoreError(
            f"{len(misses)} referenced frames missing from the feature store "
            f"(first {min(len(misses), max_misses)}: {shown})"
        )
