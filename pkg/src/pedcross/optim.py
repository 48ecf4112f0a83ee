"""Loss, Adam optimizer, training loop with validation patience, and a
finite-difference gradient checker.

All randomness (init, shuffling, dropout) derives from one seed so that a
run is reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rnn_core
from .features import rescale_batch
from .rnn_core import Model, ModelConfig, init_model

P_CLAMP = 1e-7

_STREAMS = {"init": 0, "shuffle": 1, "dropout": 2}
_SEED = 0


def set_seed(seed: int) -> None:
    """Set the process-wide default seed for all derived RNG streams."""
    global _SEED
    _SEED = int(seed)


def get_seed() -> int:
    return _SEED


def rng_stream(name: str, seed: Optional[int] = None) -> np.random.Generator:
    """Independent, reproducible generator for one named purpose."""
    if seed is None:
        seed = _SEED
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_STREAMS[name],))
    )


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


def bce_loss(p, y) -> float:
    """Binary cross-entropy, mean over horizons; probabilities clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def backward(
    model: Model,
    batch: Sequence,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over the batch and its gradient for every parameter.

    Deterministic given the RNG state and batch order; raises on non-finite
    gradients, naming the offending parameter.
    """
    if not batch:
        raise ValueError("empty batch")
    total = {name: np.zeros(shape) for name, shape in rnn_core.param_shapes(model.config)}
    loss = 0.0
    for sample in batch:
        probs, cache = rnn_core.model_forward_cached(sample, model, mode, rng)
        loss += bce_loss(probs, sample.label)
        dz = (probs - sample.label) / model.config.out_dim
        for name, g in rnn_core.model_backward(dz, cache, model).items():
            total[name] += g
    n = len(batch)
    grads = {name: g / n for name, g in total.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
    return loss / n, grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, np.ndarray], lr: float = 1e-4) -> "AdamState":
        state = cls(lr=lr)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> dict[str, np.ndarray]:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads


class EarlyStopper:
    """Stop when validation loss fails to improve for `patience` epochs."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    seed: int = 0
    lr: float = 1e-4


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 500
    seed: int = 0
    rescale: bool = False
    clip_norm: Optional[float] = None


def _batches(samples: Sequence, order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield [samples[i] for i in order[start : start + size]]


def _maybe_rescale(batch: Sequence, enabled: bool) -> list:
    if not enabled or batch[0].images is None:
        return list(batch)
    scaled = rescale_batch([s.images for s in batch])
    return [dataclasses.replace(s, images=img) for s, img in zip(batch, scaled)]


def validation_loss(
    model: Model, val_set: Sequence, batch_size: int, rescale: bool
) -> float:
    total, count = 0.0, 0
    order = np.arange(len(val_set))
    for batch in _batches(val_set, order, batch_size):
        batch = _maybe_rescale(batch, rescale)
        loss, _ = backward(model, batch, mode="eval")
        total += loss * len(batch)
        count += len(batch)
    return total / count


def train(
    train_set: Sequence,
    val_set: Sequence,
    config: ModelConfig,
    train_cfg: Optional[TrainConfig] = None,
) -> tuple[Model, TrainHistory]:
    """Mini-batch Adam training with validation patience.

    Returns the parameters from the best-validation epoch. Identical
    (seed, data, config) inputs give a bit-identical history.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    cfg = train_cfg or TrainConfig()
    model = init_model(config, cfg.seed)
    adam = AdamState.init(model.params, cfg.lr)
    rng_shuffle = rng_stream("shuffle", cfg.seed)
    rng_dropout = rng_stream("dropout", cfg.seed)
    stopper = EarlyStopper(cfg.patience)
    history = TrainHistory(seed=cfg.seed, lr=cfg.lr)
    best_params = model.copy().params

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng_shuffle.permutation(len(train_set))
        total, count = 0.0, 0
        for batch in _batches(train_set, order, cfg.batch_size):
            batch = _maybe_rescale(batch, cfg.rescale)
            loss, grads = backward(model, batch, mode="train", rng=rng_dropout)
            if not np.isfinite(loss):
                history.stop_reason = "diverged"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
            if cfg.clip_norm:
                grads = clip_gradients(grads, cfg.clip_norm)
            adam_step(model.params, grads, adam)
            total += loss * len(batch)
            count += len(batch)
        val_loss = validation_loss(model, val_set, cfg.batch_size, cfg.rescale)
        if not np.isfinite(val_loss):
            history.stop_reason = "diverged"
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", history)
        history.epochs.append(EpochRecord(epoch, total / count, val_loss))
        improved_best = val_loss < stopper.best_loss
        if stopper.update(epoch, val_loss):
            history.stop_reason = "early_stopping"
            break
        if improved_best:
            best_params = model.copy().params
    else:
        history.stop_reason = "max_epochs"
        if history.epochs and history.epochs[-1].val_loss == stopper.best_loss:
            best_params = model.copy().params

    history.best_epoch = stopper.best_epoch
    model.params = best_params
    return model, history


@dataclass
class GradCheckReport:
    max_rel_error: float
    param: str
    index: tuple[int, ...]


def grad_check(model: Model, sample, eps: float = 1e-5) -> GradCheckReport:
    """Central finite differences vs analytic BPTT gradient, in eval mode.

    Relative error per coordinate uses the numeric value as reference with a
    1e-6 floor; coordinates where both sides are exactly zero count as 0.
    """
    _, analytic = backward(model, [sample], mode="eval")

    def loss_now() -> float:
        probs = rnn_core.model_forward(sample, model, mode="eval")
        return bce_loss(probs, sample.label)

    worst = GradCheckReport(0.0, "", ())
    for name in analytic:
        tensor = model.params[name]
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + eps
            up = loss_now()
            tensor[idx] = orig - eps
            down = loss_now()
            tensor[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name][idx]
            if a == numeric:
                err = 0.0
            else:
                err = abs(a - numeric) / max(abs(numeric), 1e-6)
            if err > worst.max_rel_error:
                worst = GradCheckReport(err, name, idx)
            it.iternext()
    return worst
