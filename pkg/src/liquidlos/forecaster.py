"""Remaining length-of-stay regression with LTC and LSTM sequence models.

Daily inputs are ``[autoencoded health vector || min-max scaled SOI scores]``.
Models are trained on the remaining stay divided by 31 (the cohort maximum)
and metrics are reported on that scale and in raw days.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autoencoder, lstm, ltc
from .concepts import HealthVector
from .optim import Adam
from .soi import ScoringTables, SOIVector, default_tables, normalize_soi, soi_vector
from .timeline import LOS_SCALE, PatientTimeline

log = logging.getLogger(__name__)

MODEL_KINDS = ("ltc", "lstm")
TARGET_SCALES = ("raw_days", "normalized_by_31")


class TrainingDiverged(RuntimeError):
    pass


def assemble_input(embedding, soi: SOIVector, tables: ScoringTables | None = None) -> np.ndarray:
    emb = np.asarray(embedding, dtype=np.float64).ravel()
    if not np.isfinite(emb).all():
        raise ValueError("embedding contains non-finite values")
    return np.concatenate([emb, normalize_soi(soi, tables)])


@dataclass
class PatientSequence:
    """Model-ready inputs and labels (raw days) for one admission."""

    patient_id: str
    days: list[int]
    inputs: np.ndarray  # (T, D)
    labels: np.ndarray  # (T,)


def build_sequences(
    timelines: Sequence[PatientTimeline],
    vectors: dict[tuple[str, int], HealthVector],
    ae: autoencoder.AEParams,
    tables: ScoringTables | None = None,
    scores: dict[tuple[str, int], SOIVector] | None = None,
) -> list[PatientSequence]:
    """Encode each day's health vector and append its SOI scores.

    Days with no notes contribute the all-zero health vector. ``scores``
    supplies precomputed SOI values; otherwise they are scored from the
    day's vitals panel.
    """
    tables = tables or default_tables()
    zero = np.zeros(ae.input_dim)
    out = []
    for tl in timelines:
        H = np.stack(
            [
                vectors[(tl.patient_id, r.day)].values if (tl.patient_id, r.day) in vectors else zero
                for r in tl.days
            ]
        ).astype(np.float64)
        emb = autoencoder.encode(ae, H)
        soi = np.array(
            [
                normalize_soi(
                    scores[(tl.patient_id, r.day)] if scores is not None else soi_vector(r.panel, tables),
                    tables,
                )
                for r in tl.days
            ]
        )
        out.append(
            PatientSequence(
                tl.patient_id,
                tl.day_indices,
                np.concatenate([emb, soi], axis=1),
                np.array(tl.labels, dtype=np.float64),
            )
        )
    return out


def split_patients(patient_ids: Sequence[str], seed: int, fractions=(0.7, 0.15, 0.15)) -> dict:
    """Disjoint train/val/test split by patient."""
    ids = sorted(set(patient_ids))
    rng = np.random.default_rng([seed, 7])
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    return {
        "seed": seed,
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    unfolds: int = ltc.DEFAULT_UNFOLDS
    target_scale: str = "normalized_by_31"
    n_units: int = ltc.DEFAULT_UNITS
    lstm_hidden: int = lstm.DEFAULT_HIDDEN

    def __post_init__(self):
        if self.target_scale not in TARGET_SCALES:
            raise ValueError(f"target_scale must be one of {TARGET_SCALES}")
        for name in ("learning_rate", "epochs", "batch_size", "unfolds", "n_units", "lstm_hidden"):
            value = getattr(self, name)
            if name == "learning_rate" and value == 0:
                continue  # lr = 0 is a legitimate no-op run
            if value <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def scale(self) -> float:
        return LOS_SCALE if self.target_scale == "normalized_by_31" else 1.0


@dataclass
class Metrics:
    r2: float
    mae: float
    rmse: float


def evaluate(predictions, labels) -> Metrics:
    yhat = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if yhat.shape != y.shape:
        raise ValueError(f"length mismatch: {yhat.size} predictions vs {y.size} labels")
    if y.size < 2:
        raise ValueError("need at least two points")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined for constant labels")
    resid = y - yhat
    ss_res = float(np.sum(resid**2))
    return Metrics(
        r2=1.0 - ss_res / ss_tot,
        mae=float(np.mean(np.abs(resid))),
        rmse=math.sqrt(float(np.mean(resid**2))),
    )


def new_model(kind: str, input_dim: int, config: TrainConfig):
    if kind == "ltc":
        wiring = ltc.auto_ncp_wire(input_dim, config.n_units, 1, seed=config.seed)
        return ltc.init_ltc(wiring, unfolds=config.unfolds, seed=config.seed)
    if kind == "lstm":
        return lstm.init_lstm(input_dim, config.lstm_hidden, seed=config.seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_kind(model) -> str:
    return "ltc" if isinstance(model, ltc.LTCModel) else "lstm"


def _pad(batch: Sequence[PatientSequence], scale: float):
    T = max(len(s.labels) for s in batch)
    D = batch[0].inputs.shape[1]
    X = np.zeros((len(batch), T, D))
    Y = np.zeros((len(batch), T))
    mask = np.zeros((len(batch), T))
    for b, s in enumerate(batch):
        n = len(s.labels)
        X[b, :n] = s.inputs
        Y[b, :n] = s.labels / scale
        mask[b, :n] = 1.0
    return X, Y, mask


def batch_loss(model, batch: Sequence[PatientSequence], scale: float, with_grad: bool = True):
    X, Y, mask = _pad(batch, scale)
    out, trace = model.forward(X)
    resid = (out - Y) * mask
    n = mask.sum()
    loss = float(np.sum(resid**2) / n)
    if not with_grad:
        return loss, None
    return loss, model.backward(trace, 2.0 * resid / n)


def dataset_loss(model, data: Sequence[PatientSequence], scale: float, chunk: int = 64) -> float:
    """Mean squared error over all (patient, day) pairs."""
    total, count = 0.0, 0
    for i in range(0, len(data), chunk):
        part = data[i : i + chunk]
        X, Y, mask = _pad(part, scale)
        out, _ = model.forward(X)
        total += float(np.sum(((out - Y) * mask) ** 2))
        count += int(mask.sum())
    return total / count


@dataclass
class TrainResult:
    model: object
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    initial_val: float = float("nan")
    best_epoch: int = 0


def train(kind, train_data: Sequence[PatientSequence], val_data: Sequence[PatientSequence], config: TrainConfig | None = None, model=None) -> TrainResult:
    """Minibatch Adam on masked per-day MSE; returns the best-validation model.

    ``train_curve[k]`` is the mean minibatch loss during epoch ``k + 1`` and
    ``val_curve[k]`` the validation MSE after it. The returned model has its
    parameters rounded to float32 so it matches its saved checkpoint exactly.
    """
    config = config or TrainConfig()
    if not train_data:
        raise ValueError("empty training set")
    if set(s.patient_id for s in train_data) & set(s.patient_id for s in val_data):
        raise ValueError("train and validation sets share patients")
    input_dim = train_data[0].inputs.shape[1]
    model = model.copy() if model is not None else new_model(kind, input_dim, config)
    scale = config.scale
    opt = Adam(model.params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 11])
    eval_set = val_data or train_data

    result = TrainResult(model=None)
    result.initial_val = dataset_loss(model, eval_set, scale)
    best_val, best_params = result.initial_val, {k: v.copy() for k, v in model.params.items()}
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_data))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_data[i] for i in order[start : start + config.batch_size]]
            loss, grads = batch_loss(model, batch, scale)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"non-finite {kind} loss at epoch {epoch}")
            opt.step(model.params, grads)
            model.project()
            losses.append(loss)
        val = dataset_loss(model, eval_set, scale)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite {kind} validation loss at epoch {epoch}")
        result.train_curve.append(float(np.mean(losses)))
        result.val_curve.append(val)
        if val < best_val:
            best_val, result.best_epoch = val, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        log.info("%s epoch %d train %.5f val %.5f", kind, epoch, result.train_curve[-1], val)
    model.params = best_params
    result.model = quantize(model)
    return result


def quantize(model):
    return ltc.quantize(model) if isinstance(model, ltc.LTCModel) else lstm.quantize(model)


def predict_remaining_los(model, inputs, scale: float = LOS_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Per-day forecasts for an observed prefix, clamped at 0.

    Returns ``(model_scale, raw_days)``.
    """
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need a (T, D) input prefix with T >= 1")
    if X.shape[1] != model.input_dim:
        raise ValueError(f"inputs have width {X.shape[1]}, model expects {model.input_dim}")
    out, _ = model.forward(X)
    scaled = np.maximum(out, 0.0)
    return scaled, scaled * scale


def predict_many(model, data: Sequence[PatientSequence], scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated raw-day predictions and labels, one patient at a time."""
    preds = [predict_remaining_los(model, s.inputs, scale)[1] for s in data]
    return np.concatenate(preds), np.concatenate([s.labels for s in data])


def metrics_report(model, data: Sequence[PatientSequence], scale: float, input_config: str) -> list[dict]:
    pred_days, labels = predict_many(model, data, scale)
    kind = model_kind(model)
    rows = []
    for name, div in (("normalized_by_31", LOS_SCALE), ("raw_days", 1.0)):
        m = evaluate(pred_days / div, labels / div)
        rows.append({"model": kind, "input_config": input_config, "scale": name, **asdict(m)})
    return rows


TRAJECTORY_COLUMNS = ("day", "predicted_remaining", "true_remaining")


def report_trajectory(model, seq: PatientSequence, out_path: str | Path, scale: float = LOS_SCALE) -> Path:
    _, days_pred = predict_remaining_los(model, seq.inputs, scale)
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for day, p, y in zip(seq.days, days_pred, seq.labels):
            w.writerow([day, repr(float(p)), repr(float(y))])
    return out_path


def read_trajectory(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    pred = np.array([float(r["predicted_remaining"]) for r in rows])
    true = np.array([float(r["true_remaining"]) for r in rows])
    return pred, true


def save_model(path: str | Path, model, extra: dict | None = None) -> None:
    if isinstance(model, ltc.LTCModel):
        ltc.save_ltc(path, model, extra)
    else:
        lstm.save_lstm(path, model, extra)


def load_model(path: str | Path):
    from .checkpoint import load_checkpoint

    meta, _ = load_checkpoint(path)
    if meta["kind"] == "ltc":
        return ltc.load_ltc(path)
    if meta["kind"] == "lstm":
        return lstm.load_lstm(path)
    raise ValueError(f"{path}: not a forecasting model checkpoint ({meta['kind']})")


def count_params(model) -> int:
    return ltc.param_count(model) if isinstance(model, ltc.LTCModel) else lstm.param_count(model)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
