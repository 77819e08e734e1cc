"""LSTM baseline with a linear read-out, trained through the same plumbing as the LTC."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, to_float32_exact
from .ltc import sigmoid

DEFAULT_HIDDEN = 32


class LSTMModel:
    """Gate layout along the 4H axis: input, forget, output, candidate."""

    def __init__(self, params: dict[str, np.ndarray], seed: int = 0):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.seed = seed
        S, H4 = self.params["Wx"].shape
        H = H4 // 4
        expected = {"Wx": (S, 4 * H), "Wh": (H, 4 * H), "b": (4 * H,), "head.W": (H,), "head.b": (1,)}
        if set(self.params) != set(expected):
            raise ValueError(f"unexpected LSTM parameters {sorted(self.params)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.params["Wx"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["Wh"].shape[0]

    def copy(self) -> "LSTMModel":
        return LSTMModel({k: v.copy() for k, v in self.params.items()}, self.seed)

    def project(self) -> None:
        pass

    def forward(self, inputs, check_finite: bool = True):
        return forward(self, inputs)

    def backward(self, trace, dy):
        return backward(self, trace, dy)


def init_lstm(input_dim: int, hidden: int = DEFAULT_HIDDEN, seed: int = 0) -> LSTMModel:
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(hidden)
    params = {
        "Wx": rng.uniform(-k, k, (input_dim, 4 * hidden)),
        "Wh": rng.uniform(-k, k, (hidden, 4 * hidden)),
        "b": rng.uniform(-k, k, 4 * hidden),
        "head.W": np.zeros(hidden),
        "head.b": np.zeros(1),
    }
    return LSTMModel(params, seed)


def lstm_baseline_cell(x, h, c, params: dict[str, np.ndarray]):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    S, H4 = params["Wx"].shape
    H = H4 // 4
    if x.shape[-1] != S or h.shape[-1] != H or c.shape[-1] != H:
        raise ValueError("input/state widths do not match the LSTM parameters")
    z = x @ params["Wx"] + h @ params["Wh"] + params["b"]
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    o = sigmoid(z[..., 2 * H : 3 * H])
    g = np.tanh(z[..., 3 * H :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


@dataclass
class LSTMTrace:
    inputs: np.ndarray  # (B, T, S)
    h: np.ndarray  # (B, T + 1, H), h[:, 0] is the initial state
    c: np.ndarray  # (B, T + 1, H)
    gates: np.ndarray  # (B, T, 4H) post-activation i, f, o, g


def forward(model: LSTMModel, inputs):
    I = np.asarray(inputs, dtype=np.float64)
    single = I.ndim == 2
    if single:
        I = I[None]
    B, T, S = I.shape
    if S != model.input_dim:
        raise ValueError(f"input width {S} does not match LSTM input {model.input_dim}")
    p = model.params
    H = model.hidden
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    gates = np.empty((B, T, 4 * H))
    xw = I @ p["Wx"] + p["b"]
    for t in range(T):
        z = xw[:, t] + hs[:, t] @ p["Wh"]
        act = np.empty_like(z)
        act[:, : 3 * H] = sigmoid(z[:, : 3 * H])
        act[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        gates[:, t] = act
        i, f, o, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
    y = hs[:, 1:] @ p["head.W"] + p["head.b"][0]
    trace = LSTMTrace(I, hs, cs, gates)
    return (y[0] if single else y), trace


def backward(model: LSTMModel, trace: LSTMTrace, dy) -> dict[str, np.ndarray]:
    dy = np.asarray(dy, dtype=np.float64)
    if dy.ndim == 1:
        dy = dy[None]
    B, T = dy.shape
    if trace.gates.shape[:2] != (B, T):
        raise ValueError("trace does not match the upstream gradient")
    p = model.params
    H = model.hidden
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["head.W"] = np.einsum("bt,bth->h", dy, trace.h[:, 1:])
    grads["head.b"][0] = dy.sum()
    dz_all = np.empty((B, T, 4 * H))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dy[:, t, None] * p["head.W"]
        act = trace.gates[:, t]
        i, f, o, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        tc = np.tanh(trace.c[:, t + 1])
        dc = dc + dh * o * (1.0 - tc**2)
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * trace.c[:, t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H :] = dc * i * (1.0 - g**2)
        dh = dz @ p["Wh"].T
        dc = dc * f
    grads["Wx"] = np.einsum("bts,btk->sk", trace.inputs, dz_all)
    grads["Wh"] = np.einsum("bth,btk->hk", trace.h[:, :-1], dz_all)
    grads["b"] = dz_all.sum(axis=(0, 1))
    return grads


def param_count(model: LSTMModel) -> int:
    return int(sum(v.size for v in model.params.values()))


def save_lstm(path: str | Path, model: LSTMModel, extra: dict | None = None) -> None:
    meta = {"input_dim": model.input_dim, "hidden": model.hidden, "seed": model.seed, "extra": extra or {}}
    save_checkpoint(path, "lstm", meta, model.params)


def load_lstm(path: str | Path) -> tuple[LSTMModel, dict]:
    meta, arrays = load_checkpoint(path, kind="lstm")
    return LSTMModel(arrays, meta["seed"]), meta.get("extra", {})


def quantize(model: LSTMModel) -> LSTMModel:
    out = model.copy()
    out.params = to_float32_exact(out.params)
    return out
