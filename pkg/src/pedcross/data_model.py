"""Track ingestion, preprocessing and sliding-window dataset construction.

A pedestrian track of length P is cut into S = P - N - M windows: each
window observes frames t-N .. t and is labeled with the crossing value at
frame t+M, for t in [N, P-M-1].
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

Bbox = tuple[float, float, float, float]


class TrackParseError(ValueError):
    """Raised when a track file record is malformed."""


class Occlusion(IntEnum):
    NONE = 0
    PARTIAL = 1
    FULL = 2


#: orientation codes relative to the car: front, back, left, right
ORIENTATION_CODES = (0, 1, 2, 3)
#: movement codes: standing, moving
MOVEMENT_CODES = (0, 1)
BINARY_CODES = (0, 1)

#: default minimum bounding-box height (pixels) kept in the training split
MIN_TRAIN_HEIGHT = 50.0


@dataclass
class FrameRecord:
    frame_index: int
    bbox: Bbox
    occlusion: Occlusion
    looking: int
    orientation: int
    movement: int
    crossing: int
    image_size: tuple[int, int]

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not (x2 > x1 and y2 > y1):
            raise TrackParseError(f"frame {self.frame_index}: degenerate bbox {self.bbox}")
        if self.looking not in BINARY_CODES:
            raise TrackParseError(f"frame {self.frame_index}: unknown looking code {self.looking}")
        if self.orientation not in ORIENTATION_CODES:
            raise TrackParseError(
                f"frame {self.frame_index}: unknown orientation {self.orientation}"
            )
        if self.movement not in MOVEMENT_CODES:
            raise TrackParseError(f"frame {self.frame_index}: unknown movement {self.movement}")
        if self.crossing not in BINARY_CODES:
            raise TrackParseError(f"frame {self.frame_index}: unknown crossing {self.crossing}")

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]


@dataclass
class PedestrianTrack:
    video_id: str
    pedestrian_id: str
    frame_rate: int
    frames: list[FrameRecord]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class Sample:
    """One training/evaluation window.

    ``images`` stays None until per-frame image features are attached from a
    feature store; the categorical codes and normalized centers come straight
    from the track annotations.
    """

    looking: np.ndarray       # (N+1,) int
    orientation: np.ndarray   # (N+1,) int
    movement: np.ndarray      # (N+1,) int
    centers: np.ndarray       # (N+1, 2) float, in [0,1]^2
    label: np.ndarray         # (1,) or (H,) float
    source: tuple[str, str, int]
    frame_indices: np.ndarray = field(default=None)  # (N+1,) dataset frame numbers
    images: Optional[np.ndarray] = None              # (N+1, img_dim) float

    @property
    def seq_len(self) -> int:
        return len(self.looking)


def _get(obj: dict, key: str, line: int):
    try:
        return obj[key]
    except KeyError:
        raise TrackParseError(f"line {line}: missing field '{key}'") from None


def parse_tracks(path) -> list[PedestrianTrack]:
    """Parse a UTF-8 JSON-lines track file, one pedestrian per line."""
    tracks = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TrackParseError(f"line {lineno}: invalid JSON: {exc}") from None
            frames = []
            for fobj in _get(obj, "frames", lineno):
                try:
                    occ = Occlusion(_get(fobj, "occlusion", lineno))
                except ValueError:
                    raise TrackParseError(
                        f"line {lineno}: unknown occlusion code {fobj.get('occlusion')}"
                    ) from None
                try:
                    frames.append(
                        FrameRecord(
                            frame_index=_get(fobj, "frame", lineno),
                            bbox=tuple(float(v) for v in _get(fobj, "bbox", lineno)),
                            occlusion=occ,
                            looking=_get(fobj, "looking", lineno),
                            orientation=_get(fobj, "orientation", lineno),
                            movement=_get(fobj, "movement", lineno),
                            crossing=_get(fobj, "crossing", lineno),
                            image_size=tuple(_get(fobj, "image_size", lineno)),
                        )
                    )
                except TrackParseError as exc:
                    raise TrackParseError(f"line {lineno}: {exc}") from None
            tracks.append(
                PedestrianTrack(
                    video_id=_get(obj, "video_id", lineno),
                    pedestrian_id=_get(obj, "pedestrian_id", lineno),
                    frame_rate=int(_get(obj, "frame_rate", lineno)),
                    frames=frames,
                )
            )
    return tracks


def downsample_track(track: PedestrianTrack) -> PedestrianTrack:
    """Bring a 60 fps track down to 30 fps by keeping every second frame."""
    if track.frame_rate == 30:
        return track
    if track.frame_rate != 60:
        raise ValueError(f"unsupported frame rate {track.frame_rate}")
    kept = [
        FrameRecord(
            frame_index=f.frame_index // 2,
            bbox=f.bbox,
            occlusion=f.occlusion,
            looking=f.looking,
            orientation=f.orientation,
            movement=f.movement,
            crossing=f.crossing,
            image_size=f.image_size,
        )
        for f in track.frames[::2]
    ]
    return PedestrianTrack(track.video_id, track.pedestrian_id, 30, kept)


def filter_training_track(
    track: PedestrianTrack, min_height: float = MIN_TRAIN_HEIGHT
) -> PedestrianTrack:
    """Drop fully occluded frames and small boxes.

    Only the training split goes through this; validation and test tracks
    are used as-is.
    """
    if min_height <= 0:
        raise ValueError("min_height must be positive")
    kept = [
        f
        for f in track.frames
        if f.occlusion != Occlusion.FULL and f.height >= min_height
    ]
    return PedestrianTrack(track.video_id, track.pedestrian_id, track.frame_rate, kept)


def horizon_offsets(horizon: int, steps: int) -> list[int]:
    """Equispaced future-frame offsets over (0, horizon], nearest-int, min 1.

    For horizon=30 and steps=8 this gives 4, 8, 11, 15, 19, 23, 26, 30.
    """
    return [max(1, math.floor(horizon * h / steps + 0.5)) for h in range(1, steps + 1)]


def make_windows(
    track: PedestrianTrack,
    n_past: int,
    horizon: int,
    multi_horizon: bool = False,
    horizon_steps: int = 8,
) -> list[Sample]:
    """Cut a track into max(0, P-N-M) windows with future labels."""
    if n_past < 0:
        raise ValueError("n_past must be >= 0")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p = len(track.frames)
    count = max(0, p - n_past - horizon)
    if count == 0:
        return []
    offsets = horizon_offsets(horizon, horizon_steps) if multi_horizon else [horizon]

    samples = []
    for t in range(n_past, p - horizon):
        window = track.frames[t - n_past : t + 1]
        label = np.array(
            [float(track.frames[t + off].crossing) for off in offsets], dtype=np.float64
        )
        samples.append(
            Sample(
                looking=np.array([f.looking for f in window], dtype=np.int64),
                orientation=np.array([f.orientation for f in window], dtype=np.int64),
                movement=np.array([f.movement for f in window], dtype=np.int64),
                centers=np.array(
                    [normalize_center(f.bbox, f.image_size) for f in window],
                    dtype=np.float64,
                ),
                label=label,
                source=(track.video_id, track.pedestrian_id, t),
                frame_indices=np.array([f.frame_index for f in window], dtype=np.int64),
            )
        )
    assert len(samples) == count
    return samples


def square_bbox(bbox: Bbox, image_size: tuple[int, int]) -> tuple[Bbox, bool]:
    """Equalize bbox width and height without deforming the crop.

    The square keeps the original center and side max(w, h); when it sticks
    out of the image it is shifted inward, and only shrunk (flagged True)
    when the side exceeds an image dimension.
    """
    x1, y1, x2, y2 = bbox
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate bbox {bbox}")
    img_w, img_h = image_size
    side = max(x2 - x1, y2 - y1)
    shrunk = False
    if side > min(img_w, img_h):
        side = float(min(img_w, img_h))
        shrunk = True
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    nx1, ny1 = cx - side / 2.0, cy - side / 2.0
    # shift inward rather than clipping, so the side is preserved
    nx1 = min(max(nx1, 0.0), img_w - side)
    ny1 = min(max(ny1, 0.0), img_h - side)
    return (nx1, ny1, nx1 + side, ny1 + side), shrunk


def normalize_center(bbox: Bbox, image_size: tuple[int, int]) -> tuple[float, float]:
    """Bbox center divided element-wise by the image width and height."""
    img_w, img_h = image_size
    if img_w <= 0 or img_h <= 0:
        raise ValueError(f"invalid image size {image_size}")
    x1, y1, x2, y2 = bbox
    return ((x1 + x2) / 2.0 / img_w, (y1 + y2) / 2.0 / img_h)


def prepare_split(
    tracks: Sequence[PedestrianTrack],
    n_past: int,
    horizon: int,
    training: bool,
    min_height: float = MIN_TRAIN_HEIGHT,
    multi_horizon: bool = False,
    horizon_steps: int = 8,
) -> list[Sample]:
    """Downsample, (for training) filter, and window a list of tracks."""
    samples = []
    dropped = 0
    for track in tracks:
        track = downsample_track(track)
        if training:
            track = filter_training_track(track, min_height)
            if not track.frames:
                dropped += 1
                continue
        samples.extend(
            make_windows(track, n_past, horizon, multi_horizon, horizon_steps)
        )
    if dropped:
        log.info("dropped %d tracks emptied by training filters", dropped)
    return samples
