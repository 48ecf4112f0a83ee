"""Many-to-one recurrent classifier: LSTM/GRU cells, bidirectional wrappers
and the fully-connected + sigmoid head.

Everything is plain numpy in float64 so that analytic gradients can be
checked against central finite differences. Cells expose both a plain step
(public contract) and a cached step used by backpropagation through time.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .features import (
    ALL_VARIABLES,
    CATEGORICAL_CARDINALITIES,
    EmbeddingTable,
    embed_dim,
    input_width,
)

RNN_TYPES = ("lstm", "gru", "bdlstm", "bdgru")

CHECKPOINT_MAGIC = b"PCICKPT1"


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ModelConfig:
    rnn_type: str = "lstm"
    hidden_dim: int = 4
    num_layers: int = 1
    dropout: float = 0.5
    img_dim: int = 512
    variables: tuple[str, ...] = ()
    horizons: int = 1          # 1 = single label, 8 = multi-horizon
    n_past: int = 15
    horizon_frames: int = 30

    def __post_init__(self):
        if self.rnn_type not in RNN_TYPES:
            raise ValueError(f"unknown rnn type '{self.rnn_type}'")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.num_layers != 1:
            raise ValueError("only num_layers=1 is supported")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        unknown = set(self.variables) - set(ALL_VARIABLES)
        if unknown:
            raise ValueError(f"unknown variables {sorted(unknown)}")
        self.variables = tuple(v for v in ALL_VARIABLES if v in self.variables)

    @property
    def bidirectional(self) -> bool:
        return self.rnn_type.startswith("bd")

    @property
    def cell_kind(self) -> str:
        return "lstm" if "lstm" in self.rnn_type else "gru"

    @property
    def input_dim(self) -> int:
        return input_width(self.img_dim, self.variables)

    @property
    def readout_dim(self) -> int:
        return 2 * self.hidden_dim if self.bidirectional else self.hidden_dim

    @property
    def out_dim(self) -> int:
        return self.horizons

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variables"] = list(self.variables)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["variables"] = tuple(d.get("variables", ()))
        return cls(**d)


@dataclass
class CellParams:
    """Gate parameters for one direction; rows stack the gates
    (LSTM: i,f,g,o; GRU: z,r,n)."""

    W_x: np.ndarray  # (G*H, D)
    W_h: np.ndarray  # (G*H, H)
    b: np.ndarray    # (G*H,)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: Optional[int] = None

    def cell(self, direction: str) -> CellParams:
        return CellParams(
            self.params[f"{direction}.W_x"],
            self.params[f"{direction}.W_h"],
            self.params[f"{direction}.b"],
        )

    def embedding_tables(self) -> dict[str, EmbeddingTable]:
        tables = {}
        for name, card in CATEGORICAL_CARDINALITIES.items():
            if name in self.config.variables:
                tables[name] = EmbeddingTable(card, self.params[f"emb.{name}"])
        return tables

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in their fixed serialization order."""
    h, d = config.hidden_dim, config.input_dim
    gates = 4 if config.cell_kind == "lstm" else 3
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for name, card in CATEGORICAL_CARDINALITIES.items():
        if name in config.variables:
            shapes.append((f"emb.{name}", (card, embed_dim(card))))
    directions = ("fw", "bw") if config.bidirectional else ("fw",)
    for direction in directions:
        shapes.append((f"{direction}.W_x", (gates * h, d)))
        shapes.append((f"{direction}.W_h", (gates * h, h)))
        shapes.append((f"{direction}.b", (gates * h,)))
    shapes.append(("head.W", (config.out_dim, config.readout_dim)))
    shapes.append(("head.b", (config.out_dim,)))
    return shapes


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """Seeded init: U(-1/sqrt(H), 1/sqrt(H)) weights, U(-0.05, 0.05) embeddings.

    Values are rounded through float32 so checkpoints round-trip bit-exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    bound = 1.0 / np.sqrt(config.hidden_dim)
    params = {}
    for name, shape in param_shapes(config):
        if name.startswith("emb."):
            w = rng.uniform(-0.05, 0.05, size=shape)
        elif name.endswith(".b") or name == "head.b":
            w = np.zeros(shape)
        else:
            w = rng.uniform(-bound, bound, size=shape)
        params[name] = w.astype(np.float32).astype(np.float64)
    return Model(config, params, seed)


# --- cell steps -------------------------------------------------------------

def _lstm_step(x, h, c, p: CellParams):
    hdim = h.shape[0]
    a = p.W_x @ x + p.W_h @ h + p.b
    i = sigmoid(a[:hdim])
    f = sigmoid(a[hdim : 2 * hdim])
    g = np.tanh(a[2 * hdim : 3 * hdim])
    o = sigmoid(a[3 * hdim :])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    cache = (x, h, c, i, f, g, o, tc)
    return h2, c2, cache


def lstm_step(x, h, c, params: CellParams):
    """One LSTM step: i,f,o = sigmoid, g = tanh, c' = f*c + i*g, h' = o*tanh(c')."""
    h2, c2, _ = _lstm_step(
        np.asarray(x, dtype=np.float64),
        np.asarray(h, dtype=np.float64),
        np.asarray(c, dtype=np.float64),
        params,
    )
    return h2, c2


def _lstm_step_backward(dh, dc, cache, p: CellParams):
    x, h, c, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)]
    )
    grads = (np.outer(da, x), np.outer(da, h), da)
    dx = p.W_x.T @ da
    dh_prev = p.W_h.T @ da
    return dx, dh_prev, dc_prev, grads


def _gru_step(x, h, p: CellParams):
    hdim = h.shape[0]
    a = p.W_x @ x + p.b
    u = p.W_h @ h
    z = sigmoid(a[:hdim] + u[:hdim])
    r = sigmoid(a[hdim : 2 * hdim] + u[hdim : 2 * hdim])
    un = u[2 * hdim :]
    n = np.tanh(a[2 * hdim :] + r * un)
    h2 = (1.0 - z) * n + z * h
    cache = (x, h, z, r, n, un)
    return h2, cache


def gru_step(x, h, params: CellParams):
    """One GRU step: z,r = sigmoid, n = tanh(Wx + r*(Uh)), h' = (1-z)*n + z*h."""
    h2, _ = _gru_step(
        np.asarray(x, dtype=np.float64), np.asarray(h, dtype=np.float64), params
    )
    return h2


def _gru_step_backward(dh2, cache, p: CellParams):
    x, h, z, r, n, un = cache
    dz = dh2 * (h - n)
    dn = dh2 * (1.0 - z)
    dh_prev = dh2 * z
    dan = dn * (1.0 - n * n)
    dr = dan * un
    dun = dan * r
    daz = dz * z * (1 - z)
    dar = dr * r * (1 - r)
    da = np.concatenate([daz, dar, dan])
    du = np.concatenate([daz, dar, dun])
    grads = (np.outer(da, x), np.outer(du, h), da)
    dx = p.W_x.T @ da
    dh_prev = dh_prev + p.W_h.T @ du
    return dx, dh_prev, grads


# --- sequence forward/backward ----------------------------------------------

def _direction_forward(seq: np.ndarray, config: ModelConfig, p: CellParams):
    hdim = config.hidden_dim
    h = np.zeros(hdim)
    c = np.zeros(hdim)
    caches = []
    for x in seq:
        if config.cell_kind == "lstm":
            h, c, cache = _lstm_step(x, h, c, p)
        else:
            h, cache = _gru_step(x, h, p)
        caches.append(cache)
    return h, caches


def _direction_backward(dh_final, caches, config: ModelConfig, p: CellParams):
    hdim = config.hidden_dim
    dh = np.asarray(dh_final, dtype=np.float64)
    dc = np.zeros(hdim)
    dW_x = np.zeros_like(p.W_x)
    dW_h = np.zeros_like(p.W_h)
    db = np.zeros_like(p.b)
    d_seq = []
    for cache in reversed(caches):
        if config.cell_kind == "lstm":
            dx, dh, dc, (gWx, gWh, gb) = _lstm_step_backward(dh, dc, cache, p)
        else:
            dx, dh, (gWx, gWh, gb) = _gru_step_backward(dh, cache, p)
        dW_x += gWx
        dW_h += gWh
        db += gb
        d_seq.append(dx)
    d_seq.reverse()
    return np.stack(d_seq), {"W_x": dW_x, "W_h": dW_h, "b": db}


def rnn_forward(seq: np.ndarray, model: Model) -> np.ndarray:
    """Consume a (T, D) sequence from zero state and return the readout.

    Unidirectional: final hidden state. Bidirectional: [forward final |
    backward final], the backward pass reading the reversed sequence.
    """
    readout, _ = rnn_forward_cached(np.asarray(seq, dtype=np.float64), model)
    return readout


def rnn_forward_cached(seq: np.ndarray, model: Model):
    if len(seq) == 0:
        raise ValueError("empty input sequence")
    config = model.config
    h_fw, caches_fw = _direction_forward(seq, config, model.cell("fw"))
    if not config.bidirectional:
        return h_fw, (caches_fw, None)
    h_bw, caches_bw = _direction_forward(seq[::-1], config, model.cell("bw"))
    return np.concatenate([h_fw, h_bw]), (caches_fw, caches_bw)


def rnn_backward(d_readout: np.ndarray, cache, model: Model):
    """Backprop through time; returns (d_seq, grads keyed like model.params)."""
    config = model.config
    caches_fw, caches_bw = cache
    hdim = config.hidden_dim
    d_seq, g_fw = _direction_backward(
        d_readout[:hdim], caches_fw, config, model.cell("fw")
    )
    grads = {f"fw.{k}": v for k, v in g_fw.items()}
    if config.bidirectional:
        d_seq_bw, g_bw = _direction_backward(
            d_readout[hdim:], caches_bw, config, model.cell("bw")
        )
        grads.update({f"bw.{k}": v for k, v in g_bw.items()})
        d_seq = d_seq + d_seq_bw[::-1]
    return d_seq, grads


# --- head ---------------------------------------------------------------

def dropout_mask(
    config: ModelConfig, rng: Optional[np.random.Generator]
) -> Optional[np.ndarray]:
    """Inverted-dropout mask for the readout (training mode only)."""
    if config.dropout == 0.0:
        return None
    if rng is None:
        raise ValueError("training-mode dropout needs an RNG")
    keep = rng.random(config.readout_dim) >= config.dropout
    return keep.astype(np.float64) / (1.0 - config.dropout)


def head_forward(
    readout: np.ndarray,
    model: Model,
    mode: str = "eval",
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    probs, _ = head_forward_cached(readout, model, mode, mask)
    return probs


def head_forward_cached(readout, model, mode="eval", mask=None):
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode '{mode}'")
    dropped = readout
    if mode == "train" and mask is not None:
        dropped = readout * mask
    z = model.params["head.W"] @ dropped + model.params["head.b"]
    probs = sigmoid(z)
    return probs, (dropped, mask if mode == "train" else None)


def head_backward(dz: np.ndarray, cache, model: Model):
    dropped, mask = cache
    grads = {"head.W": np.outer(dz, dropped), "head.b": dz.copy()}
    d_dropped = model.params["head.W"].T @ dz
    d_readout = d_dropped if mask is None else d_dropped * mask
    return d_readout, grads


# --- full model ---------------------------------------------------------

def _variable_slices(config: ModelConfig) -> dict[str, slice]:
    """Position of each enabled variable inside the per-frame input vector."""
    offset = config.img_dim
    slices = {}
    for name in config.variables:
        width = 2 if name == "center" else embed_dim(CATEGORICAL_CARDINALITIES[name])
        slices[name] = slice(offset, offset + width)
        offset += width
    return slices


def assemble_sequence(sample, model: Model) -> np.ndarray:
    """Per-frame input matrix (T, D) for one sample."""
    config = model.config
    if sample.images is None:
        if config.img_dim != 0:
            raise ValueError("sample has no image features attached")
        images = np.zeros((sample.seq_len, 0))
    else:
        images = np.asarray(sample.images, dtype=np.float64)
        if images.shape[1] != config.img_dim:
            raise ValueError(
                f"feature width {images.shape[1]} does not match config img_dim "
                f"{config.img_dim}"
            )
    parts = [images]
    for name in config.variables:
        if name == "center":
            parts.append(np.asarray(sample.centers, dtype=np.float64))
        else:
            table = model.params[f"emb.{name}"]
            codes = getattr(sample, name)
            parts.append(table[codes])
    return np.concatenate(parts, axis=1)


def model_forward(
    sample,
    model: Model,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Full pipeline for one sample: assemble -> RNN -> head. Returns (out_dim,)."""
    probs, _ = model_forward_cached(sample, model, mode, rng)
    return probs


def model_forward_cached(sample, model, mode="eval", rng=None):
    seq = assemble_sequence(sample, model)
    readout, rnn_cache = rnn_forward_cached(seq, model)
    mask = dropout_mask(model.config, rng) if mode == "train" else None
    probs, head_cache = head_forward_cached(readout, model, mode, mask)
    return probs, (sample, rnn_cache, head_cache)


def model_backward(dz: np.ndarray, cache, model: Model) -> dict[str, np.ndarray]:
    """Gradients for every parameter, given d(loss)/d(head pre-activation)."""
    sample, rnn_cache, head_cache = cache
    d_readout, grads = head_backward(dz, head_cache, model)
    d_seq, rnn_grads = rnn_backward(d_readout, rnn_cache, model)
    grads.update(rnn_grads)
    slices = _variable_slices(model.config)
    for name in model.config.variables:
        if name == "center":
            continue
        g = np.zeros_like(model.params[f"emb.{name}"])
        codes = getattr(sample, name)
        np.add.at(g, codes, d_seq[:, slices[name]])
        grads[f"emb.{name}"] = g
    return grads


# --- checkpoints ----------------------------------------------------------

def save_model(model: Model, path) -> None:
    """Versioned header (JSON config) + float32 LE tensors in fixed order."""
    shapes = param_shapes(model.config)
    header = {
        "version": 1,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "params": [[name, list(shape)] for name, shape in shapes],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, shape in shapes:
            tensor = model.params[name]
            if tensor.shape != shape:
                raise ValueError(f"parameter {name} has shape {tensor.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        params = {}
        for name, shape in header["params"]:
            shape = tuple(shape)
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated tensor {name}")
            params[name] = (
                np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
            )
    return Model(config, params, header.get("seed"))
