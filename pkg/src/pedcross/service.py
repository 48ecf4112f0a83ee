"""HTTP service exposing the training/evaluation/prediction pipeline.

Domain errors map to 400, missing input files to 404; the CLI is a thin
client of these endpoints.
"""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, optim, rnn_core, runner
from .data_model import MIN_TRAIN_HEIGHT, TrackParseError
from .features import FeatureStoreError


class TrainRequest(BaseModel):
    tracks: str
    out_dir: str
    features: Optional[str] = None
    val_tracks: Optional[str] = None
    val_fraction: float = 0.2
    rnn: str = "lstm"
    hidden: int = 4
    dropout: float = 0.5
    img_dim: Optional[int] = None
    vars: list[str] = Field(default_factory=list)
    n_past: int = 15
    horizon: int = 30
    multi_horizon: bool = False
    rescale: bool = False
    min_height: float = MIN_TRAIN_HEIGHT
    lr: float = 1e-4
    batch: int = 64
    patience: int = 5
    max_epochs: int = 500
    seed: int = 0
    clip_norm: Optional[float] = None


class TrainResponse(BaseModel):
    checkpoint: str
    history: str
    manifest: str
    epochs: int
    best_epoch: int
    stop_reason: str
    best_val_loss: float


class EvaluateRequest(BaseModel):
    checkpoint: str
    tracks: str
    features: Optional[str] = None
    threshold: float = 0.5
    rescale: bool = False
    batch: int = 64


class MetricsResponse(BaseModel):
    accuracy: float
    precision: float
    recall: float
    ap: float
    threshold: float
    table: str


class PredictRequest(BaseModel):
    checkpoint: str
    tracks: str
    features: Optional[str] = None
    video_id: str
    pedestrian_id: str
    t: int


class HorizonPoint(BaseModel):
    horizon_frames: int
    probability: float


class PredictResponse(BaseModel):
    points: list[HorizonPoint]


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except (
        TrackParseError,
        FeatureStoreError,
        optim.TrainingDiverged,
        ValueError,
        IndexError,
    ) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="pedcross", version=__version__)

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        def run():
            img_dim = req.img_dim
            if img_dim is None:
                img_dim = _store_width(req.features)
            config = rnn_core.ModelConfig(
                rnn_type=req.rnn,
                hidden_dim=req.hidden,
                dropout=req.dropout,
                img_dim=img_dim,
                variables=tuple(req.vars),
                horizons=8 if req.multi_horizon else 1,
                n_past=req.n_past,
                horizon_frames=req.horizon,
            )
            train_cfg = optim.TrainConfig(
                lr=req.lr,
                batch_size=req.batch,
                patience=req.patience,
                max_epochs=req.max_epochs,
                seed=req.seed,
                rescale=req.rescale,
                clip_norm=req.clip_norm,
            )
            return runner.run_train(
                req.tracks,
                req.out_dir,
                feature_path=req.features,
                val_tracks_path=req.val_tracks,
                val_fraction=req.val_fraction,
                config=config,
                train_cfg=train_cfg,
                min_height=req.min_height,
            )

        return TrainResponse(**_guard(run))

    @app.post("/evaluate", response_model=MetricsResponse)
    def evaluate(req: EvaluateRequest):
        result = _guard(
            runner.run_evaluate,
            req.checkpoint,
            req.tracks,
            feature_path=req.features,
            threshold=req.threshold,
            rescale=req.rescale,
            batch_size=req.batch,
        )
        return MetricsResponse(**result.to_dict(), table=result.to_table())

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        rows = _guard(
            runner.run_predict,
            req.checkpoint,
            req.tracks,
            req.video_id,
            req.pedestrian_id,
            req.t,
            feature_path=req.features,
        )
        return PredictResponse(
            points=[HorizonPoint(horizon_frames=h, probability=p) for h, p in rows]
        )

    return app


def _store_width(feature_path: Optional[str]) -> int:
    if feature_path is None:
        return 0
    from .features import FeatureStore

    return FeatureStore(feature_path).feature_dim


app = create_app()
