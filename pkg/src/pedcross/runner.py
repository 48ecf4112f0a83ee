"""High-level pipeline runs: train, evaluate, predict.

These functions do the file I/O around the library modules and are what the
HTTP service (and therefore the CLI) calls. Every run writes a manifest so
artifacts can be traced back to their inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data_model, features, metrics, optim, rnn_core

HORIZON_STEPS = 8


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _split_tracks(tracks: Sequence, val_fraction: float):
    """Deterministic track-level split: every k-th track goes to validation."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    k = max(2, round(1.0 / val_fraction))
    train = [t for i, t in enumerate(tracks) if i % k != k - 1]
    val = [t for i, t in enumerate(tracks) if i % k == k - 1]
    if not train or not val:
        raise ValueError("too few tracks to split; provide a separate val file")
    return train, val


def load_split(
    tracks_path,
    feature_path,
    config: rnn_core.ModelConfig,
    training: bool,
    min_height: float = data_model.MIN_TRAIN_HEIGHT,
) -> list:
    """Parse, preprocess and window one split, attaching stored features."""
    tracks = data_model.parse_tracks(tracks_path)
    samples = data_model.prepare_split(
        tracks,
        config.n_past,
        config.horizon_frames,
        training=training,
        min_height=min_height,
        multi_horizon=config.horizons > 1,
        horizon_steps=config.horizons if config.horizons > 1 else HORIZON_STEPS,
    )
    _attach(samples, feature_path, config)
    return samples


def _attach(samples, feature_path, config: rnn_core.ModelConfig) -> None:
    if feature_path is None:
        if config.img_dim != 0:
            raise ValueError("a feature store is required unless img_dim is 0")
        return
    store = features.FeatureStore(feature_path)
    if store.feature_dim != config.img_dim:
        raise ValueError(
            f"feature store width {store.feature_dim} does not match img_dim "
            f"{config.img_dim}"
        )
    features.attach_features(samples, store)


def run_train(
    tracks_path,
    out_dir,
    feature_path=None,
    val_tracks_path=None,
    val_fraction: float = 0.2,
    config: Optional[rnn_core.ModelConfig] = None,
    train_cfg: Optional[optim.TrainConfig] = None,
    min_height: float = data_model.MIN_TRAIN_HEIGHT,
) -> dict:
    """Full training run; writes checkpoint, history log and manifest."""
    config = config or rnn_core.ModelConfig()
    train_cfg = train_cfg or optim.TrainConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    multi = config.horizons > 1
    if val_tracks_path is not None:
        train_tracks = data_model.parse_tracks(tracks_path)
        val_tracks = data_model.parse_tracks(val_tracks_path)
    else:
        train_tracks, val_tracks = _split_tracks(
            data_model.parse_tracks(tracks_path), val_fraction
        )

    def windows(tracks, training):
        return data_model.prepare_split(
            tracks,
            config.n_past,
            config.horizon_frames,
            training=training,
            min_height=min_height,
            multi_horizon=multi,
            horizon_steps=config.horizons if multi else HORIZON_STEPS,
        )

    train_set = windows(train_tracks, training=True)
    val_set = windows(val_tracks, training=False)
    if not train_set or not val_set:
        raise ValueError(
            f"not enough windows to train (train={len(train_set)}, val={len(val_set)}); "
            "tracks may be shorter than n_past + horizon"
        )
    _attach(train_set, feature_path, config)
    _attach(val_set, feature_path, config)

    optim.set_seed(train_cfg.seed)
    model, history = optim.train(train_set, val_set, config, train_cfg)

    checkpoint_path = out_dir / "model.pci"
    rnn_core.save_model(model, checkpoint_path)

    history_path = out_dir / "history.jsonl"
    with open(history_path, "w", encoding="utf-8") as fh:
        for rec in history.epochs:
            fh.write(
                json.dumps(
                    {
                        "epoch": rec.epoch,
                        "train_loss": rec.train_loss,
                        "val_loss": rec.val_loss,
                        "lr": train_cfg.lr,
                        "seed": train_cfg.seed,
                    },
                    sort_keys=True,
                )
                + "\n"
            )

    manifest = {
        "config": config.to_dict(),
        "train": dataclasses.asdict(train_cfg),
        "seed": train_cfg.seed,
        "inputs": {
            "tracks": {"path": str(tracks_path), "sha256": _sha256(tracks_path)},
            "features": (
                {"path": str(feature_path), "sha256": _sha256(feature_path)}
                if feature_path
                else None
            ),
            "val_tracks": (
                {"path": str(val_tracks_path), "sha256": _sha256(val_tracks_path)}
                if val_tracks_path
                else None
            ),
        },
        "outputs": {
            "checkpoint": str(checkpoint_path),
            "history": str(history_path),
        },
        "stop_reason": history.stop_reason,
        "best_epoch": history.best_epoch,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    return {
        "checkpoint": str(checkpoint_path),
        "history": str(history_path),
        "manifest": str(manifest_path),
        "epochs": len(history.epochs),
        "best_epoch": history.best_epoch,
        "stop_reason": history.stop_reason,
        "best_val_loss": min(r.val_loss for r in history.epochs),
    }


def run_evaluate(
    checkpoint_path,
    tracks_path,
    feature_path=None,
    threshold: float = 0.5,
    rescale: bool = False,
    batch_size: int = 64,
) -> metrics.Metrics:
    """Evaluate a checkpoint on a track file (no training-only filtering)."""
    model = rnn_core.load_model(checkpoint_path)
    dataset = load_split(tracks_path, feature_path, model.config, training=False)
    if not dataset:
        raise ValueError("evaluation split produced no windows")
    opts = metrics.EvalOptions(threshold=threshold, rescale=rescale, batch_size=batch_size)
    return metrics.evaluate(model, dataset, opts)


def run_predict(
    checkpoint_path,
    tracks_path,
    video_id: str,
    pedestrian_id: str,
    t: int,
    feature_path=None,
) -> list[tuple[int, float]]:
    """Multi-horizon probabilities for one window: (horizon_frames, prob) rows."""
    model = rnn_core.load_model(checkpoint_path)
    config = model.config
    if config.horizons <= 1:
        raise ValueError("prediction requires a multi-horizon checkpoint")
    tracks = [
        data_model.downsample_track(tr)
        for tr in data_model.parse_tracks(tracks_path)
        if tr.video_id == video_id and tr.pedestrian_id == pedestrian_id
    ]
    if not tracks:
        raise ValueError(f"no track for pedestrian {video_id}/{pedestrian_id}")
    track = tracks[0]
    p = len(track.frames)
    n, m = config.n_past, config.horizon_frames
    if not n <= t <= p - m - 1:
        raise ValueError(
            f"t={t} outside the valid window range [N, P-M-1] = [{n}, {p - m - 1}] "
            f"for track length P={p}"
        )
    samples = data_model.make_windows(
        track, n, m, multi_horizon=True, horizon_steps=config.horizons
    )
    sample = next(s for s in samples if s.source[2] == t)
    _attach([sample], feature_path, config)
    probs = rnn_core.model_forward(sample, model, mode="eval")
    offsets = data_model.horizon_offsets(m, config.horizons)
    return list(zip(offsets, (float(p) for p in probs)))
