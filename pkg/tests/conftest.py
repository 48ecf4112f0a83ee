import json

import numpy as np
import pytest

from pedcross.data_model import Sample
from pedcross.features import write_feature_store
from pedcross.rnn_core import ModelConfig, init_model


def make_frame(i, bbox=(100.0, 100.0, 200.0, 300.0), occlusion=0, looking=0,
               orientation=0, movement=1, crossing=0, image_size=(1920, 1080)):
    return {
        "frame": i,
        "bbox": list(bbox),
        "occlusion": occlusion,
        "looking": looking,
        "orientation": orientation,
        "movement": movement,
        "crossing": crossing,
        "image_size": list(image_size),
    }


def make_track_obj(video_id="v01", pedestrian_id="ped1", frame_rate=30, length=20,
                   crossing_from=None, rng=None):
    frames = []
    for i in range(length):
        crossing = int(crossing_from is not None and i >= crossing_from)
        kw = {}
        if rng is not None:
            kw = {
                "looking": int(rng.integers(0, 2)),
                "orientation": int(rng.integers(0, 4)),
                "movement": int(rng.integers(0, 2)),
            }
        frames.append(make_frame(i, crossing=crossing, **kw))
    return {
        "video_id": video_id,
        "pedestrian_id": pedestrian_id,
        "frame_rate": frame_rate,
        "frames": frames,
    }


def write_track_file(path, track_objs):
    with open(path, "w", encoding="utf-8") as fh:
        for obj in track_objs:
            fh.write(json.dumps(obj) + "\n")
    return path


def write_store_for_tracks(path, track_objs, img_dim=6, seed=0, scale=1.0):
    """Non-negative random pooled rows covering every frame of every track."""
    rng = np.random.default_rng(seed)
    rows, index = [], {}
    for obj in track_objs:
        for frame in obj["frames"]:
            index[(obj["video_id"], obj["pedestrian_id"], frame["frame"])] = len(rows)
            rows.append(rng.random(img_dim) * scale)
    write_feature_store(path, np.array(rows, dtype=np.float32), index)
    return path


def random_sample(rng, seq_len=4, img_dim=5, out_dim=1, label=None):
    if label is None:
        label = rng.integers(0, 2, out_dim).astype(np.float64)
    return Sample(
        looking=rng.integers(0, 2, seq_len),
        orientation=rng.integers(0, 4, seq_len),
        movement=rng.integers(0, 2, seq_len),
        centers=rng.random((seq_len, 2)),
        label=np.atleast_1d(np.asarray(label, dtype=np.float64)),
        source=("v01", "ped1", seq_len - 1),
        frame_indices=np.arange(seq_len),
        images=rng.random((seq_len, img_dim)) if img_dim else None,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    cfg = ModelConfig(rnn_type="lstm", hidden_dim=3, img_dim=5, dropout=0.5,
                      variables=("looking", "orientation", "movement", "center"))
    return init_model(cfg, seed=7)


def separable_dataset(n=20, seq_len=5, img_dim=8, seed=3):
    """Linearly separable fixture: label follows the sign of channel 0."""
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        label = float(k % 2)
        images = rng.random((seq_len, img_dim)) * 0.1
        images[:, 0] = 1.0 if label else 0.0
        samples.append(
            Sample(
                looking=np.zeros(seq_len, dtype=np.int64),
                orientation=np.zeros(seq_len, dtype=np.int64),
                movement=np.zeros(seq_len, dtype=np.int64),
                centers=np.full((seq_len, 2), 0.5),
                label=np.array([label]),
                source=("v01", f"ped{k}", seq_len - 1),
                frame_indices=np.arange(seq_len),
                images=images,
            )
        )
    return samples
