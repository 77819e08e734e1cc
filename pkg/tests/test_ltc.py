import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liquidlos import ltc
from liquidlos.ltc import WiringDiagram

from oracles import central_differences, ltc_ode_reference, ltc_outputs_ref, relative_errors


def tiny_model(seed=0, n_sensory=5, units=8, unfolds=2):
    wiring = ltc.auto_ncp_wire(n_sensory, units, 1, seed=seed)
    model = ltc.init_ltc(wiring, unfolds=unfolds, seed=seed)
    rng = np.random.default_rng(seed + 100)
    model.params["head.W"] = rng.uniform(0.5, 1.5, wiring.n_motor)
    model.params["head.b"] = rng.uniform(-0.1, 0.1, 1)
    return model


def single_synapse_model(w=1.0, A=2.0, gamma=0.0, mu=0.0, tau=1.0):
    wiring = WiringDiagram(1, 0, 0, 1, ((0, 1, 1),))
    params = {
        "sens.w": [w], "sens.A": [A], "sens.gamma": [gamma], "sens.mu": [mu],
        "rec.w": [], "rec.A": [], "rec.gamma": [], "rec.mu": [],
        "tau": [tau], "head.W": [1.0], "head.b": [0.0],
    }
    return ltc.LTCModel(wiring, {k: np.array(v, dtype=float) for k, v in params.items()}, unfolds=1)


# -- wiring ---------------------------------------------------------------------


def test_auto_ncp_allocation_default():
    w = ltc.auto_ncp_wire(504, 28, 1, seed=1)
    assert (w.n_command, w.n_inter, w.n_motor) == (10, 17, 1)
    assert w.check_ncp() == []


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n_sensory, units", [(3, 5), (20, 28), (50, 12), (1, 3)])
def test_wiring_invariants_hold(seed, n_sensory, units):
    w = ltc.auto_ncp_wire(n_sensory, units, 1, seed=seed)
    assert w.check_ncp() == []
    assert set(range(n_sensory)) <= w.reaches_motor()
    assert {p for _, _, p in w.synapses} <= {-1, 1}


def test_wiring_too_small():
    with pytest.raises(ValueError):
        ltc.auto_ncp_wire(5, 2, 1)


def test_wiring_deterministic():
    assert ltc.auto_ncp_wire(30, 28, 1, seed=4) == ltc.auto_ncp_wire(30, 28, 1, seed=4)


def test_check_ncp_flags_bad_edges():
    w = WiringDiagram(2, 1, 1, 1, ((0, 4, 1), (4, 3, 1), (3, 2, 1), (1, 2, -1)))
    problems = w.check_ncp()
    assert any("sensory->motor" in p for p in problems)


def test_wiring_validation():
    with pytest.raises(ValueError):
        WiringDiagram(1, 0, 0, 1, ((0, 1, 2),))
    with pytest.raises(ValueError):
        WiringDiagram(1, 0, 0, 1, ((0, 1, 1), (0, 1, -1)))


# -- cell primitives ------------------------------------------------------------


def test_ltc_f_examples():
    m = single_synapse_model(w=2.0, gamma=1.0, mu=0.0)
    assert ltc.ltc_f(np.zeros(1), np.zeros(1), m)[0] == 1.0
    assert ltc.ltc_f(np.zeros(1), np.array([1e6]), m)[0] == pytest.approx(2.0)
    model = tiny_model()
    for k in ("sens.w", "rec.w"):
        model.params[k][:] = 0
    assert not ltc.ltc_f(np.ones(8), np.ones(5), model).any()


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-50, 50))
def test_ltc_f_range(x, inp):
    model = tiny_model(seed=2)
    f = ltc.ltc_f(np.full(8, x), np.full(5, inp), model)
    w = np.concatenate([model.params["sens.w"], model.params["rec.w"]])
    assert np.all(f >= 0) and np.all(f <= w)


def test_tau_sys_examples():
    assert ltc.tau_sys(1.0, 0.0) == 1.0
    assert ltc.tau_sys(2.0, 1.0) == pytest.approx(2.0 / 3.0)


@given(st.floats(1e-6, 10), st.floats(0, 100))
def test_tau_sys_bound(tau, f):
    t = ltc.tau_sys(tau, f)
    assert 0 < t <= tau


def test_fused_step_hand_value():
    m = single_synapse_model(w=1.0, A=2.0, gamma=0.0)  # f = 1 * sigmoid(0) = 0.5
    assert ltc.fused_step(np.zeros(1), np.zeros(1), 1.0, m)[0] == pytest.approx(0.4, abs=1e-15)


def test_fused_step_pure_leak():
    model = tiny_model()
    for k in ("sens.w", "rec.w"):
        model.params[k][:] = 0
    x = np.linspace(-1, 1, 8)
    out = ltc.fused_step(x, np.ones(5), 0.25, model)
    assert np.allclose(out, x / (1 + 0.25 / model.params["tau"]), rtol=0, atol=1e-15)


def test_fused_step_small_dt_continuity():
    model = tiny_model()
    x = np.linspace(-1, 1, 8)
    assert np.max(np.abs(ltc.fused_step(x, np.ones(5), 1e-9, model) - x)) < 1e-6
    with pytest.raises(ValueError):
        ltc.fused_step(x, np.ones(5), 0.0, model)


# -- forward / backward ---------------------------------------------------------


def test_zero_weights_zero_output():
    model = tiny_model()
    for k in ("sens.w", "rec.w", "head.b"):
        model.params[k][:] = 0
    y, _ = model.forward(np.random.default_rng(0).uniform(size=(7, 5)))
    assert not y.any()


def test_default_untrained_predicts_zero():
    y, _ = ltc.default_model(20).forward(np.ones((4, 20)))
    assert not y.any()


def test_single_day_equals_repeated_steps():
    model = tiny_model(unfolds=3)
    I = np.random.default_rng(1).uniform(size=5)
    x = np.zeros(8)
    for _ in range(3):
        x = ltc.fused_step(x, I, 1 / 3, model)
    y, _ = model.forward(I[None])
    assert y[0] == pytest.approx(model.params["head.W"][0] * x[0] + model.params["head.b"][0], abs=1e-15)


def test_forward_matches_loop_oracle():
    model = tiny_model(seed=3, unfolds=3)
    I = np.random.default_rng(3).uniform(-1, 1, size=(6, 5))
    y, _ = model.forward(I)
    ref = ltc_outputs_ref(model.wiring, model.params, 3, I)
    assert np.allclose(y, ref.astype(float), rtol=1e-12, atol=1e-14)


def test_batched_forward_matches_single():
    model = tiny_model(seed=4)
    I = np.random.default_rng(4).uniform(size=(3, 6, 5))
    yb, _ = model.forward(I)
    for b in range(3):
        assert np.allclose(yb[b], model.forward(I[b])[0], rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_matches_finite_differences(seed):
    model = tiny_model(seed=seed)
    rng = np.random.default_rng(seed)
    I = rng.uniform(0, 1, size=(6, 5))
    target = rng.uniform(0, 1, size=6)

    y, trace = model.forward(I)
    grads = model.backward(trace, 2 * (y - target) / y.size)
    params = {k: v.astype(np.longdouble) for k, v in model.params.items()}

    def loss(p):
        out = ltc_outputs_ref(model.wiring, p, model.unfolds, I)
        return np.mean((out - target.astype(np.longdouble)) ** 2)

    err = relative_errors(grads, central_differences(loss, params))
    assert np.mean(err <= 1e-4) >= 0.95


def test_backward_batched_sums_per_sequence():
    model = tiny_model(seed=5)
    rng = np.random.default_rng(5)
    I = rng.uniform(size=(2, 4, 5))
    dy = rng.standard_normal((2, 4))
    _, tr = model.forward(I)
    g = model.backward(tr, dy)
    parts = [model.backward(model.forward(I[b])[1], dy[b]) for b in range(2)]
    for k in g:
        assert np.allclose(g[k], parts[0][k] + parts[1][k], rtol=1e-12, atol=1e-14)


def test_non_finite_input_reports_day_and_step():
    model = tiny_model()
    I = np.zeros((4, 5))
    I[2, 0] = np.nan
    with pytest.raises(FloatingPointError, match="day 2, step 0"):
        model.forward(I)


def test_input_width_checked():
    with pytest.raises(ValueError):
        tiny_model().forward(np.zeros((3, 4)))


def test_projection():
    model = tiny_model()
    model.params["rec.w"][0] = -0.3
    model.params["tau"][0] = -1.0
    model.project()
    assert model.params["rec.w"][0] == 0.0
    assert model.params["tau"][0] == ltc.TAU_MIN


# -- solver behaviour -----------------------------------------------------------


def trajectory(model, I, unfolds):
    m = model.copy()
    m.unfolds = unfolds
    _, tr = m.forward(I)
    return tr.states[0, :, -1]


def test_fine_solver_matches_adaptive_reference():
    model = tiny_model(seed=6)
    I = np.random.default_rng(6).uniform(-1, 1, size=(5, 5))
    ref = ltc_ode_reference(model, I)
    assert np.max(np.abs(trajectory(model, I, 1024) - ref)) < 1e-3


def test_error_decreases_with_unfolds():
    model = tiny_model(seed=7, units=12, n_sensory=8)
    I = np.random.default_rng(7).uniform(-1, 1, size=(8, 8))
    fine = trajectory(model, I, 1024)
    errs = [np.max(np.abs(trajectory(model, I, L) - fine)) for L in (1, 2, 4, 8, 16)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_huge_inputs_stay_finite():
    model = ltc.default_model(30, seed=3)
    I = np.random.default_rng(0).standard_normal((200, 30)) * 1e6
    _, tr = model.forward(I)
    assert np.isfinite(tr.states).all()
    assert np.all(tr.denominators > 1)


# -- size and persistence -------------------------------------------------------


def test_param_count_single_synapse():
    assert ltc.param_count(single_synapse_model()) == 7


def test_param_count_matches_arrays():
    model = ltc.default_model(504, seed=1)
    assert ltc.param_count(model) == sum(v.size for v in model.params.values()) == 8634


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=8)
    path = tmp_path / "ltc.ckpt"
    ltc.save_ltc(path, model, {"note": "x"})
    loaded, extra = ltc.load_ltc(path)
    q = ltc.quantize(model)
    assert extra == {"note": "x"}
    assert loaded.wiring == model.wiring and loaded.unfolds == model.unfolds
    I = np.random.default_rng(8).uniform(size=(5, 5))
    assert np.array_equal(loaded.forward(I)[0], q.forward(I)[0])


def test_default_checkpoint_size(tmp_path):
    path = tmp_path / "ltc.ckpt"
    ltc.save_ltc(path, ltc.default_model(504, seed=0))
    assert path.stat().st_size <= 1_200_000
