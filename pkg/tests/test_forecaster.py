import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from liquidlos import autoencoder, forecaster, ltc
from liquidlos.soi import SOIVector, VitalsPanel, default_tables
from liquidlos.timeline import DayRecord, PatientTimeline, read_timelines_csv, write_timelines_csv

from conftest import build_pipeline


# -- inputs ---------------------------------------------------------------------


def test_assemble_input_length_and_slots():
    emb = np.zeros(500)
    x = forecaster.assemble_input(emb, SOIVector(0, 0, 12, 0))
    assert x.shape == (504,)
    assert x[502] == 0.5


def test_assemble_input_zero_case():
    assert not forecaster.assemble_input(np.zeros(16), SOIVector(0, 0, 0, 0)).any()


def test_assemble_input_errors():
    with pytest.raises(ValueError):
        forecaster.assemble_input(np.array([np.nan]), SOIVector(0, 0, 0, 0))
    with pytest.raises(ValueError):
        forecaster.assemble_input(np.zeros(3), SOIVector(0, 0, 30, 0))


def test_days_without_notes_use_zero_vector():
    panel = VitalsPanel(age=50)
    days = tuple(DayRecord(d, panel, 2 - d) for d in range(3))
    tl = PatientTimeline("P", days, 3)
    ae = autoencoder.init_ae(6, [4], 2)
    seq = forecaster.build_sequences([tl], {}, ae)[0]
    assert seq.inputs.shape == (3, 6)
    assert not seq.inputs[:, :2].any()  # zero vector, zero biases -> zero embedding
    assert seq.labels.tolist() == [2, 1, 0]


def test_sequence_inputs_match_assemble(small_pipeline):
    tl = small_pipeline["cohort"].timelines[0]
    seq = small_pipeline["seqs"][tl.patient_id]
    from liquidlos.soi import soi_vector

    day = tl.days[1]
    emb = autoencoder.encode(small_pipeline["ae"], small_pipeline["vectors"][(tl.patient_id, 1)].values)
    x = forecaster.assemble_input(emb, soi_vector(day.panel))
    # batched and single-row matmuls may round differently in the last bit
    assert np.allclose(seq.inputs[1], x, rtol=1e-12, atol=1e-14)


# -- timelines ------------------------------------------------------------------


def test_timeline_labels_and_validation():
    panel = VitalsPanel()
    tl = PatientTimeline("P", tuple(DayRecord(d, panel, 24 - d) for d in range(25)), 25)
    assert tl.labels == list(range(24, -1, -1))
    with pytest.raises(ValueError):
        PatientTimeline("P", (DayRecord(0, panel, 5),), 1)
    with pytest.raises(ValueError):
        PatientTimeline("P", (DayRecord(0, panel, 4), DayRecord(0, panel, 4)), 5)
    with pytest.raises(ValueError):
        PatientTimeline("P", (DayRecord(0, panel, 3),), 5)


def test_timeline_csv_round_trip(tmp_path, small_pipeline):
    tls = small_pipeline["cohort"].timelines[:5]
    path = tmp_path / "t.csv"
    write_timelines_csv(path, tls)
    assert read_timelines_csv(path) == sorted(tls, key=lambda t: t.patient_id)


# -- split ----------------------------------------------------------------------


def test_split_disjoint_and_complete():
    ids = [f"P{i:03d}" for i in range(100)]
    s = forecaster.split_patients(ids, seed=5)
    parts = [set(s[k]) for k in ("train", "val", "test")]
    assert [len(p) for p in parts] == [70, 15, 15]
    assert set().union(*parts) == set(ids)
    assert sum(len(p) for p in parts) == len(ids)
    assert s == forecaster.split_patients(list(reversed(ids)), seed=5)
    assert s != forecaster.split_patients(ids, seed=6)


# -- metrics --------------------------------------------------------------------


def test_metrics_examples():
    assert forecaster.evaluate([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == forecaster.Metrics(1.0, 0.0, 0.0)
    y = np.array([1.0, 4.0, 7.0])
    assert forecaster.evaluate(np.full(3, y.mean()), y).r2 == 0.0
    m = forecaster.evaluate([3.0, 3.0], [2.0, 4.0])
    assert (m.mae, m.rmse, m.r2) == (1.0, 1.0, 0.0)


def test_metrics_errors():
    with pytest.raises(ValueError):
        forecaster.evaluate([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        forecaster.evaluate([1.0, 2.0, 3.0], [1.0, 2.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=50))
def test_metric_identities(pairs):
    yhat = np.array([p for p, _ in pairs])
    y = np.array([t for _, t in pairs])
    if np.sum((y - y.mean()) ** 2) == 0:
        return  # spread too small to square without underflow
    m = forecaster.evaluate(yhat, y)
    # naive recomputation
    n = len(y)
    mean = sum(y) / n
    ss_res = sum((a - b) ** 2 for a, b in zip(y, yhat))
    ss_tot = sum((a - mean) ** 2 for a in y)
    assert m.r2 == pytest.approx(1 - ss_res / ss_tot, rel=1e-12, abs=1e-12)
    assert m.mae == pytest.approx(sum(abs(a - b) for a, b in zip(y, yhat)) / n, rel=1e-12, abs=1e-12)
    assert m.rmse == pytest.approx((ss_res / n) ** 0.5, rel=1e-12, abs=1e-12)
    assert m.rmse >= m.mae - 1e-12 and m.mae >= 0 and m.r2 <= 1
    assert (m.r2 == 1.0) == bool(np.all(yhat == y))


# -- training -------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        forecaster.TrainConfig(target_scale="weeks")
    with pytest.raises(ValueError):
        forecaster.TrainConfig(epochs=0)


@pytest.mark.parametrize("kind", ["ltc", "lstm"])
def test_lr_zero_leaves_params_unchanged(kind, small_pipeline):
    cfg = forecaster.TrainConfig(epochs=1, learning_rate=0.0, seed=1)
    init = forecaster.new_model(kind, small_pipeline["train"][0].inputs.shape[1], cfg)
    r = forecaster.train(kind, small_pipeline["train"], small_pipeline["val"], cfg, model=init)
    q = forecaster.quantize(init)
    assert all(np.array_equal(r.model.params[k], q.params[k]) for k in q.params)


@pytest.mark.parametrize("kind", ["ltc", "lstm"])
def test_training_is_deterministic(kind, small_pipeline):
    cfg = forecaster.TrainConfig(epochs=2, seed=2)
    a = forecaster.train(kind, small_pipeline["train"], small_pipeline["val"], cfg)
    b = forecaster.train(kind, small_pipeline["train"], small_pipeline["val"], cfg)
    assert a.train_curve == b.train_curve and a.val_curve == b.val_curve
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)


def test_training_halves_validation_loss(trained_ltc):
    assert min(trained_ltc.val_curve) < 0.5 * trained_ltc.initial_val
    assert len(trained_ltc.train_curve) == len(trained_ltc.val_curve) == 25


def test_best_checkpoint_is_returned(trained_ltc, small_pipeline):
    val = forecaster.dataset_loss(trained_ltc.model, small_pipeline["val"], forecaster.LOS_SCALE)
    # the returned parameters are the best epoch's, rounded to float32
    assert val == pytest.approx(min(trained_ltc.val_curve), rel=1e-3)


def test_leakage_rejected(small_pipeline):
    with pytest.raises(ValueError):
        forecaster.train("ltc", small_pipeline["train"], small_pipeline["train"][:3], forecaster.TrainConfig(epochs=1))


def test_divergence_reports_epoch(small_pipeline):
    cfg = forecaster.TrainConfig(epochs=2)
    model = forecaster.new_model("lstm", small_pipeline["train"][0].inputs.shape[1], cfg)
    model.params["Wh"][0, 0] = np.inf
    with pytest.raises(forecaster.TrainingDiverged, match="epoch 1"):
        forecaster.train("lstm", small_pipeline["train"], small_pipeline["val"], cfg, model=model)


def test_unknown_model_kind():
    with pytest.raises(ValueError):
        forecaster.new_model("gru", 4, forecaster.TrainConfig())


# -- prediction and reports -----------------------------------------------------


def test_untrained_predictions_zero():
    model = ltc.default_model(20)
    scaled, days = forecaster.predict_remaining_los(model, np.ones((6, 20)))
    assert scaled.shape == days.shape == (6,)
    assert not days.any()


def test_prediction_errors():
    model = ltc.default_model(20)
    with pytest.raises(ValueError):
        forecaster.predict_remaining_los(model, np.ones((0, 20)))
    with pytest.raises(ValueError):
        forecaster.predict_remaining_los(model, np.ones((3, 19)))


def test_predictions_clamped(trained_ltc, small_pipeline):
    for seq in small_pipeline["test"]:
        scaled, days = forecaster.predict_remaining_los(trained_ltc.model, seq.inputs)
        assert np.all(scaled >= 0) and np.all(days >= 0)
        assert np.allclose(days, scaled * 31.0, rtol=0, atol=0)


def test_prefix_predictions_are_causal(trained_ltc, small_pipeline):
    seq = max(small_pipeline["test"], key=lambda s: len(s.labels))
    full = forecaster.predict_remaining_los(trained_ltc.model, seq.inputs)[1]
    part = forecaster.predict_remaining_los(trained_ltc.model, seq.inputs[:3])[1]
    assert np.array_equal(full[:3], part)


def test_trajectory_report(tmp_path, trained_ltc, small_pipeline):
    panel = VitalsPanel()
    seq = forecaster.PatientSequence(
        "P", list(range(25)), small_pipeline["test"][0].inputs[:1].repeat(25, axis=0), np.arange(24, -1, -1.0)
    )
    path = forecaster.report_trajectory(trained_ltc.model, seq, tmp_path / "traj.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "day,predicted_remaining,true_remaining"
    assert len(lines) == 26
    pred, true = forecaster.read_trajectory(path)
    assert true.tolist() == list(range(24, -1, -1))
    again = forecaster.report_trajectory(trained_ltc.model, seq, tmp_path / "again.csv")
    assert again.read_bytes() == path.read_bytes()
    del panel


def test_csv_reproduces_metrics(tmp_path, trained_ltc, small_pipeline):
    test = small_pipeline["test"]
    report = forecaster.metrics_report(trained_ltc.model, test, forecaster.LOS_SCALE, "x")
    preds, labels = [], []
    for seq in test:
        p, y = forecaster.read_trajectory(forecaster.report_trajectory(trained_ltc.model, seq, tmp_path / f"{seq.patient_id}.csv"))
        preds.append(p)
        labels.append(y)
    m = forecaster.evaluate(np.concatenate(preds), np.concatenate(labels))
    raw = next(r for r in report if r["scale"] == "raw_days")
    assert (m.r2, m.mae, m.rmse) == (raw["r2"], raw["mae"], raw["rmse"])


def test_metrics_report_schema(trained_ltc, small_pipeline):
    rows = forecaster.metrics_report(trained_ltc.model, small_pipeline["test"], forecaster.LOS_SCALE, "emb+soi")
    assert {r["scale"] for r in rows} == {"normalized_by_31", "raw_days"}
    for r in rows:
        assert set(r) == {"model", "input_config", "r2", "mae", "rmse", "scale"}
        assert r["model"] == "ltc"
    norm, raw = rows
    assert norm["r2"] == pytest.approx(raw["r2"], abs=1e-12)
    assert raw["mae"] == pytest.approx(31 * norm["mae"], rel=1e-12)
    json.dumps(rows)


def test_model_checkpoint_reproduces_predictions(tmp_path, trained_ltc, small_pipeline):
    path = tmp_path / "m.ckpt"
    forecaster.save_model(path, trained_ltc.model, {"target_scale": "normalized_by_31"})
    loaded, extra = forecaster.load_model(path)
    seq = small_pipeline["test"][0]
    a = forecaster.predict_remaining_los(trained_ltc.model, seq.inputs)
    b = forecaster.predict_remaining_los(loaded, seq.inputs)
    assert np.array_equal(a[1], b[1]) and extra["target_scale"] == "normalized_by_31"


def test_load_model_rejects_autoencoder(tmp_path):
    path = tmp_path / "ae.ckpt"
    autoencoder.save_ae(path, autoencoder.init_ae(6, [4], 2))
    with pytest.raises(ValueError):
        forecaster.load_model(path)


@pytest.mark.parametrize("kind", ["ltc", "lstm"])
def test_predictions_trend_down_on_recovering_patients(kind):
    """With noise-free severity every patient improves steadily, so a trained
    model's forecasts should fall as the stay goes on. Uses the default epoch
    budget: the LTC is still near its initial fit after a few dozen epochs on
    a cohort this small."""
    pipe = build_pipeline(80, seed=21, severity_noise=0.0)
    model = forecaster.train(kind, pipe["train"], pipe["val"], forecaster.TrainConfig(seed=1)).model
    rhos = []
    for seq in pipe["test"] + pipe["val"]:
        if len(seq.labels) >= 5:
            pred = forecaster.predict_remaining_los(model, seq.inputs)[1]
            rhos.append(spearmanr(np.arange(len(pred)), pred)[0])
    rhos = np.array(rhos)
    assert len(rhos) >= 5
    assert np.mean(rhos < 0) >= 0.8
