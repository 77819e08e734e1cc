"""Dense autoencoder for ternary health vectors, trained with MSE and Adam.

Encoder: input -> relu hidden layers -> tanh latent. The decoder mirrors the
layer sizes in reverse with relu hidden layers and a tanh output, so the
reconstruction lives in (-1, 1) like the ternary targets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, to_float32_exact
from .optim import Adam

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (2000,)
DEFAULT_LATENT = 500


class TrainingDiverged(RuntimeError):
    pass


def default_dims(vocab_size: int) -> tuple[list[int], int]:
    """Hidden/latent sizes for a vocabulary.

    Large vocabularies get the reference |V| -> 2000 -> 500 stack; smaller
    demo lexicons are scaled down so every layer still shrinks.
    """
    if vocab_size > DEFAULT_HIDDEN[0]:
        return list(DEFAULT_HIDDEN), DEFAULT_LATENT
    hidden = max(vocab_size // 2, 4)
    latent = max(vocab_size // 5, 2)
    if not vocab_size > hidden > latent:
        raise ValueError(f"vocabulary of {vocab_size} concepts is too small for an autoencoder")
    return [hidden], latent


@dataclass
class AEParams:
    input_dim: int
    hidden_dims: list[int]
    latent_dim: int
    arrays: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.latent_dim]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def encoder_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.arrays[f"enc{i}.W"], self.arrays[f"enc{i}.b"]) for i in range(self.n_layers)]

    def decoder_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.arrays[f"dec{i}.W"], self.arrays[f"dec{i}.b"]) for i in range(self.n_layers)]

    def copy(self) -> "AEParams":
        return AEParams(
            self.input_dim,
            list(self.hidden_dims),
            self.latent_dim,
            {k: v.copy() for k, v in self.arrays.items()},
            self.seed,
            self.epoch,
        )


def init_ae(input_dim: int, hidden_dims, latent_dim: int, seed: int = 0) -> AEParams:
    hidden_dims = list(hidden_dims)
    dims = [input_dim, *hidden_dims, latent_dim]
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer sizes must be positive: {dims}")
    if any(a <= b for a, b in zip(dims, dims[1:])):
        raise ValueError(f"layer sizes must strictly decrease to the latent size: {dims}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    n = len(dims) - 1
    for i in range(n):
        fan_in, fan_out = dims[i], dims[i + 1]
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"enc{i}.W"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        arrays[f"enc{i}.b"] = np.zeros(fan_out)
    rdims = dims[::-1]
    for i in range(n):
        fan_in, fan_out = rdims[i], rdims[i + 1]
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"dec{i}.W"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        arrays[f"dec{i}.b"] = np.zeros(fan_out)
    return AEParams(input_dim, hidden_dims, latent_dim, arrays, seed=seed)


def _forward(layers, x, cache=None):
    """Relu on all but the last layer, tanh on the last."""
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        if cache is not None:
            cache.append(h)
        z = h @ W + b
        h = np.tanh(z) if i == last else np.maximum(z, 0.0)
    return h


def _check_width(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != width:
        raise ValueError(f"{what} has width {x.shape[-1]}, expected {width}")
    return x


def encode(params: AEParams, x) -> np.ndarray:
    x = _check_width(x, params.input_dim, "input")
    return _forward(params.encoder_layers(), x)


def decode(params: AEParams, z) -> np.ndarray:
    z = _check_width(z, params.latent_dim, "embedding")
    return _forward(params.decoder_layers(), z)


def reconstruct(params: AEParams, x) -> np.ndarray:
    return decode(params, encode(params, x))


def ae_loss(params: AEParams, X) -> float:
    """Mean over samples of the per-coordinate mean squared reconstruction error."""
    X = np.atleast_2d(_check_width(X, params.input_dim, "batch"))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return float(np.mean((X - reconstruct(params, X)) ** 2))


def ae_loss_and_grad(params: AEParams, X) -> tuple[float, dict[str, np.ndarray]]:
    X = np.atleast_2d(_check_width(X, params.input_dim, "batch"))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    layers = params.encoder_layers() + params.decoder_layers()
    names = [f"enc{i}" for i in range(params.n_layers)] + [f"dec{i}" for i in range(params.n_layers)]
    # encoder and decoder each end in tanh; everything else is relu
    tanh_at = {params.n_layers - 1, 2 * params.n_layers - 1}
    inputs, outputs = [], []
    h = X
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        h = np.tanh(z) if i in tanh_at else np.maximum(z, 0.0)
        outputs.append(h)
    diff = h - X
    loss = float(np.mean(diff**2))

    grads = {}
    g = 2.0 * diff / diff.size
    for i in range(len(layers) - 1, -1, -1):
        out = outputs[i]
        dz = g * (1.0 - out**2) if i in tanh_at else g * (out > 0)
        W = layers[i][0]
        grads[f"{names[i]}.W"] = inputs[i].T @ dz
        grads[f"{names[i]}.b"] = dz.sum(axis=0)
        g = dz @ W.T
    return loss, grads


@dataclass
class AETrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AETrainResult:
    params: AEParams
    loss_curve: list[float] = field(default_factory=list)


def train_ae(
    dataset,
    config: AETrainConfig | None = None,
    params: AEParams | None = None,
    hidden_dims=None,
    latent_dim: int | None = None,
) -> AETrainResult:
    """Minibatch Adam on the reconstruction loss.

    ``loss_curve[k]`` is the full-dataset loss after epoch ``k + 1``.
    """
    config = config or AETrainConfig()
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a non-empty 2-D array")
    if params is None:
        if hidden_dims is None or latent_dim is None:
            hidden_dims, latent_dim = default_dims(X.shape[1])
        params = init_ae(X.shape[1], hidden_dims, latent_dim, seed=config.seed)
    else:
        params = params.copy()
    _check_width(X, params.input_dim, "dataset")

    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(params.arrays, config.learning_rate, config.beta1, config.beta2, config.eps)
    curve = []
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = X[order[start : start + config.batch_size]]
            loss, grads = ae_loss_and_grad(params, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite autoencoder loss at epoch {epoch}")
            opt.step(params.arrays, grads)
        epoch_loss = ae_loss(params, X)
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite autoencoder loss at epoch {epoch}")
        curve.append(epoch_loss)
        params.epoch = epoch
        log.debug("ae epoch %d loss %.6f", epoch, epoch_loss)
    return AETrainResult(params, curve)


def save_ae(path: str | Path, params: AEParams) -> None:
    meta = {
        "input_dim": params.input_dim,
        "hidden_dims": list(params.hidden_dims),
        "latent_dim": params.latent_dim,
        "seed": params.seed,
        "epoch": params.epoch,
    }
    save_checkpoint(path, "autoencoder", meta, params.arrays)


def load_ae(path: str | Path, vocab_size: int | None = None) -> AEParams:
    meta, arrays = load_checkpoint(path, kind="autoencoder")
    if vocab_size is not None and meta["input_dim"] != vocab_size:
        raise ValueError(
            f"autoencoder expects {meta['input_dim']} concepts, lexicon has {vocab_size}"
        )
    return AEParams(
        meta["input_dim"], list(meta["hidden_dims"]), meta["latent_dim"], arrays, meta["seed"], meta["epoch"]
    )


def quantize(params: AEParams) -> AEParams:
    out = params.copy()
    out.arrays = to_float32_exact(out.arrays)
    return out
