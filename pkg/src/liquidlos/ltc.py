"""Liquid time-constant (LTC) recurrent cell with NCP wiring.

Hidden state obeys

    dx_j/dt = -(1/tau_j + sum_i f_ij) x_j + sum_i f_ij A_ij p_ij
    f_ij    = w_ij * sigmoid(gamma_ij * (pre_i - mu_ij))

where ``pre_i`` is the source neuron's state (or the input feature for a
sensory synapse) and ``p_ij`` is the synapse polarity. One observation day is
integrated with ``L`` semi-implicit ("fused") Euler steps of size 1/L, which
treats the decay term implicitly:

    x' = (x + dt * sum f A p) / (1 + dt * (1/tau + sum f))

Gradients are exact reverse-mode derivatives through every unrolled step.

Neuron numbering: sensory neurons are ``0..S-1``; hidden neurons follow as
``S + k`` with local index ``k`` ordered motor, command, inter.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, to_float32_exact

DEFAULT_UNITS = 28
DEFAULT_UNFOLDS = 6
TAU_MIN = 1e-3

SYNAPSE_PARAMS = ("w", "A", "gamma", "mu")


# ---------------------------------------------------------------------------
# Wiring


@dataclass(frozen=True)
class WiringDiagram:
    n_sensory: int
    n_inter: int
    n_command: int
    n_motor: int
    synapses: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        syn = tuple(sorted((int(s), int(d), int(p)) for s, d, p in self.synapses))
        seen = set()
        total = self.n_sensory + self.n_hidden
        for s, d, p in syn:
            if p not in (-1, 1):
                raise ValueError(f"synapse {s}->{d}: polarity must be -1 or +1")
            if not (0 <= s < total and self.n_sensory <= d < total):
                raise ValueError(f"synapse {s}->{d} out of range")
            if (s, d) in seen:
                raise ValueError(f"duplicate synapse {s}->{d}")
            seen.add((s, d))
        object.__setattr__(self, "synapses", syn)

    @property
    def n_hidden(self) -> int:
        return self.n_inter + self.n_command + self.n_motor

    @property
    def n_units(self) -> int:
        return self.n_hidden

    def layer(self, neuron: int) -> str:
        if neuron < self.n_sensory:
            return "sensory"
        k = neuron - self.n_sensory
        if k < self.n_motor:
            return "motor"
        if k < self.n_motor + self.n_command:
            return "command"
        return "inter"

    def layer_ids(self, layer: str) -> list[int]:
        s, m, c = self.n_sensory, self.n_motor, self.n_command
        spans = {
            "sensory": (0, s),
            "motor": (s, s + m),
            "command": (s + m, s + m + c),
            "inter": (s + m + c, s + self.n_hidden),
        }
        lo, hi = spans[layer]
        return list(range(lo, hi))

    @property
    def sensory_synapses(self) -> list[tuple[int, int, int]]:
        return [t for t in self.synapses if t[0] < self.n_sensory]

    @property
    def hidden_synapses(self) -> list[tuple[int, int, int]]:
        return [t for t in self.synapses if t[0] >= self.n_sensory]

    def check_ncp(self) -> list[str]:
        """Return violated NCP invariants (empty list when the wiring is valid)."""
        allowed = {
            ("sensory", "inter"),
            ("inter", "command"),
            ("command", "command"),
            ("command", "motor"),
        }
        problems = []
        incoming = {n: 0 for n in range(self.n_sensory, self.n_sensory + self.n_hidden)}
        outgoing = {n: 0 for n in range(self.n_sensory)}
        for s, d, _ in self.synapses:
            pair = (self.layer(s), self.layer(d))
            if pair not in allowed:
                problems.append(f"edge {s}->{d} is {pair[0]}->{pair[1]}")
            incoming[d] += 1
            if s in outgoing:
                outgoing[s] += 1
        problems += [f"neuron {n} has no incoming synapse" for n, k in incoming.items() if k == 0]
        problems += [f"sensory {n} has no outgoing synapse" for n, k in outgoing.items() if k == 0]
        reach = self.reaches_motor()
        unreachable = [s for s in range(self.n_sensory) if s not in reach]
        problems += [f"sensory {s} cannot reach a motor neuron" for s in unreachable]
        return problems

    def reaches_motor(self) -> set[int]:
        """Neurons with a directed path to some motor neuron (motor neurons included)."""
        rev: dict[int, list[int]] = {}
        for s, d, _ in self.synapses:
            rev.setdefault(d, []).append(s)
        found = set(self.layer_ids("motor"))
        stack = list(found)
        while stack:
            n = stack.pop()
            for src in rev.get(n, ()):
                if src not in found:
                    found.add(src)
                    stack.append(src)
        return found


def auto_ncp_wire(
    n_sensory: int,
    n_units: int = DEFAULT_UNITS,
    n_motor: int = 1,
    seed: int = 0,
    sensory_fanout: int = 4,
    inter_fanout: int | None = None,
    recurrent_command_fanout: int = 4,
    motor_fanin: int | None = None,
) -> WiringDiagram:
    """AutoNCP-style layered sparse wiring.

    ``n_units`` counts all non-sensory neurons. Command neurons get
    ``max(int(0.4 * (n_units - n_motor)), 1)`` of the non-motor units and the
    rest become inter neurons. Synapse polarity is drawn from {-1, +1, +1}.
    """
    if n_sensory < 1 or n_motor < 1:
        raise ValueError("need at least one sensory and one motor neuron")
    if n_units < n_motor + 2:
        raise ValueError(f"n_units={n_units} leaves no room for inter and command neurons")
    n_command = max(int(0.4 * (n_units - n_motor)), 1)
    n_inter = n_units - n_motor - n_command
    if inter_fanout is None:
        inter_fanout = max(int(0.5 * n_command), 1)
    if motor_fanin is None:
        motor_fanin = max(int(0.5 * n_command), 1)

    rng = np.random.default_rng(seed)
    S = n_sensory
    motor = list(range(S, S + n_motor))
    command = list(range(S + n_motor, S + n_motor + n_command))
    inter = list(range(S + n_motor + n_command, S + n_units))
    edges: dict[tuple[int, int], int] = {}

    def connect(src, dst):
        if (src, dst) not in edges:
            edges[(src, dst)] = int(rng.choice([-1, 1, 1]))

    def fan_out(sources, targets, fanout):
        fanout = min(fanout, len(targets))
        for src in sources:
            for j in rng.choice(len(targets), size=fanout, replace=False):
                connect(src, targets[j])

    def repair_fan_in(sources, targets):
        counts = {t: 0 for t in targets}
        for (s, d) in edges:
            if d in counts and s in sources:
                counts[d] += 1
        mean_in = max(int(np.mean(list(counts.values()))), 1)
        for t in targets:
            if counts[t] == 0:
                for j in rng.choice(len(sources), size=min(mean_in, len(sources)), replace=False):
                    connect(sources[j], t)

    sensory = list(range(S))
    fan_out(sensory, inter, sensory_fanout)
    repair_fan_in(sensory, inter)
    fan_out(inter, command, inter_fanout)
    repair_fan_in(inter, command)
    fan_out(command, command, recurrent_command_fanout)
    for m in motor:
        for j in rng.choice(n_command, size=min(motor_fanin, n_command), replace=False):
            connect(command[j], m)
    feeds_motor = {s for (s, d) in edges if d in motor}
    for c in command:
        if c not in feeds_motor:
            connect(c, motor[int(rng.integers(n_motor))])

    wiring = WiringDiagram(
        n_sensory=S,
        n_inter=n_inter,
        n_command=n_command,
        n_motor=n_motor,
        synapses=tuple((s, d, p) for (s, d), p in edges.items()),
    )
    problems = wiring.check_ncp()
    if problems:
        raise RuntimeError("wiring repair failed: " + "; ".join(problems[:3]))
    return wiring


# ---------------------------------------------------------------------------
# Model


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def tau_sys(tau, f_agg):
    """Effective time constant tau / (1 + tau * f)."""
    tau = np.asarray(tau, dtype=np.float64)
    f_agg = np.asarray(f_agg, dtype=np.float64)
    return tau / (1.0 + tau * f_agg)


class LTCModel:
    """Wiring, parameters and the linear read-out head on the motor neurons."""

    def __init__(self, wiring: WiringDiagram, params: dict[str, np.ndarray], unfolds: int = DEFAULT_UNFOLDS, seed: int = 0):
        if unfolds < 1:
            raise ValueError("unfolds must be >= 1")
        self.wiring = wiring
        self.params = params
        self.unfolds = unfolds
        self.seed = seed
        S, N = wiring.n_sensory, wiring.n_hidden
        sens = wiring.sensory_synapses
        hid = wiring.hidden_synapses
        self.sens_src = np.array([s for s, _, _ in sens], dtype=np.intp)
        self.sens_dst = np.array([d - S for _, d, _ in sens], dtype=np.intp)
        self.sens_pol = np.array([p for _, _, p in sens], dtype=np.float64)
        self.rec_src = np.array([s - S for s, _, _ in hid], dtype=np.intp)
        self.rec_dst = np.array([d - S for _, d, _ in hid], dtype=np.intp)
        self.rec_pol = np.array([p for _, _, p in hid], dtype=np.float64)
        # one-hot incidence matrices turn scatter-adds into matmuls
        self._sens_dst_1h = np.zeros((len(sens), N))
        self._sens_dst_1h[np.arange(len(sens)), self.sens_dst] = 1.0
        self._rec_dst_1h = np.zeros((len(hid), N))
        self._rec_dst_1h[np.arange(len(hid)), self.rec_dst] = 1.0
        self._rec_src_1h = np.zeros((len(hid), N))
        self._rec_src_1h[np.arange(len(hid)), self.rec_src] = 1.0
        self._check_shapes()

    def _check_shapes(self):
        w = self.wiring
        expected = {"tau": (w.n_hidden,), "head.W": (w.n_motor,), "head.b": (1,)}
        for p in SYNAPSE_PARAMS:
            expected[f"sens.{p}"] = (len(self.sens_src),)
            expected[f"rec.{p}"] = (len(self.rec_src),)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match the wiring")
        for k, shape in expected.items():
            self.params[k] = np.asarray(self.params[k], dtype=np.float64)
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.wiring.n_sensory

    def copy(self) -> "LTCModel":
        return LTCModel(self.wiring, {k: v.copy() for k, v in self.params.items()}, self.unfolds, self.seed)

    def project(self) -> None:
        """Clip parameters back onto their constraint set (w >= 0, tau > 0)."""
        for k in ("sens.w", "rec.w"):
            np.maximum(self.params[k], 0.0, out=self.params[k])
        np.maximum(self.params["tau"], TAU_MIN, out=self.params["tau"])

    # forward / backward wrappers
    def forward(self, inputs, x0=None, check_finite: bool = True):
        return forward(self, inputs, x0, check_finite)

    def backward(self, trace, dy):
        return backward(self, trace, dy)


def init_ltc(wiring: WiringDiagram, unfolds: int = DEFAULT_UNFOLDS, seed: int = 0) -> LTCModel:
    rng = np.random.default_rng(seed)
    n_s = len(wiring.sensory_synapses)
    n_h = len(wiring.hidden_synapses)
    params = {}
    for prefix, n in (("sens", n_s), ("rec", n_h)):
        params[f"{prefix}.w"] = rng.uniform(0.01, 1.0, n)
        params[f"{prefix}.A"] = rng.uniform(-1.0, 1.0, n)
        params[f"{prefix}.gamma"] = rng.uniform(3.0, 8.0, n)
        params[f"{prefix}.mu"] = rng.uniform(0.3, 0.8, n)
    params["tau"] = rng.uniform(0.5, 2.0, wiring.n_hidden)
    params["head.W"] = np.zeros(wiring.n_motor)
    params["head.b"] = np.zeros(1)
    return LTCModel(wiring, params, unfolds, seed)


def param_count(model: LTCModel) -> int:
    w = model.wiring
    return 4 * len(w.synapses) + w.n_hidden + w.n_motor + 1


def ltc_f(x, I, model: LTCModel) -> np.ndarray:
    """Per-synapse activation ``w * sigmoid(gamma * (pre - mu))`` in wiring order."""
    x = np.asarray(x, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    w = model.wiring
    if x.shape[-1] != w.n_hidden or I.shape[-1] != w.n_sensory:
        raise ValueError("state/input width does not match the wiring")
    p = model.params
    f_s = p["sens.w"] * sigmoid(p["sens.gamma"] * (I[..., model.sens_src] - p["sens.mu"]))
    f_h = p["rec.w"] * sigmoid(p["rec.gamma"] * (x[..., model.rec_src] - p["rec.mu"]))
    # sorted synapse order puts sensory sources first
    return np.concatenate([f_s, f_h], axis=-1)


def _sensory_drive(model: LTCModel, I):
    """Input-driven numerator/denominator terms; constant within a day."""
    p = model.params
    pre = I[..., model.sens_src]
    a = sigmoid(p["sens.gamma"] * (pre - p["sens.mu"]))
    f = p["sens.w"] * a
    num = (f * (p["sens.A"] * model.sens_pol)) @ model._sens_dst_1h
    den = f @ model._sens_dst_1h
    return num, den, pre, a


def _step(model: LTCModel, x, num_s, den_s, dt):
    p = model.params
    xs = x[..., model.rec_src]
    a = sigmoid(p["rec.gamma"] * (xs - p["rec.mu"]))
    f = p["rec.w"] * a
    num = x + dt * (num_s + (f * (p["rec.A"] * model.rec_pol)) @ model._rec_dst_1h)
    den = 1.0 + dt * (1.0 / p["tau"] + den_s + f @ model._rec_dst_1h)
    return num / den, a, den


def fused_step(x, I, dt: float, model: LTCModel) -> np.ndarray:
    """One semi-implicit Euler step of size ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    num_s, den_s, _, _ = _sensory_drive(model, np.asarray(I, dtype=np.float64))
    return _step(model, x, num_s, den_s, dt)[0]


@dataclass
class LTCTrace:
    inputs: np.ndarray  # (B, T, S)
    states: np.ndarray  # (B, T, L + 1, N): state before each sub-step, plus the day's end
    gates: np.ndarray  # (B, T, L, E_h)
    denominators: np.ndarray  # (B, T, L, N)
    sens_pre: np.ndarray  # (B, T, E_s)
    sens_gate: np.ndarray  # (B, T, E_s)
    unfolds: int


def forward(model: LTCModel, inputs, x0=None, check_finite: bool = True):
    """Run a sequence (``(T, S)`` or batched ``(B, T, S)``) through the cell.

    Returns ``(outputs, trace)``; outputs have shape ``(T,)`` or ``(B, T)``.
    Each day is integrated with ``model.unfolds`` fused steps of size 1/L and
    read out by the linear head on the motor neurons.
    """
    I = np.asarray(inputs, dtype=np.float64)
    single = I.ndim == 2
    if single:
        I = I[None]
    B, T, S = I.shape
    if T < 1:
        raise ValueError("need at least one time step")
    if S != model.wiring.n_sensory:
        raise ValueError(f"input width {S} does not match {model.wiring.n_sensory} sensory neurons")
    N = model.wiring.n_hidden
    L = model.unfolds
    dt = 1.0 / L
    p = model.params

    num_s, den_s, pre, a_s = _sensory_drive(model, I)
    states = np.empty((B, T, L + 1, N))
    gates = np.empty((B, T, L, len(model.rec_src)))
    dens = np.empty((B, T, L, N))
    x = np.zeros((B, N)) if x0 is None else np.broadcast_to(np.asarray(x0, dtype=np.float64), (B, N)).copy()
    for t in range(T):
        for k in range(L):
            states[:, t, k] = x
            x, gates[:, t, k], dens[:, t, k] = _step(model, x, num_s[:, t], den_s[:, t], dt)
            if check_finite and not np.isfinite(x).all():
                raise FloatingPointError(f"non-finite LTC state at day {t}, step {k}")
        states[:, t, L] = x
    motor = states[:, :, L, : model.wiring.n_motor]
    y = motor @ p["head.W"] + p["head.b"][0]
    trace = LTCTrace(I, states, gates, dens, pre, a_s, L)
    return (y[0] if single else y), trace


def backward(model: LTCModel, trace: LTCTrace, dy) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of ``sum(dy * outputs)`` w.r.t. every parameter."""
    dy = np.asarray(dy, dtype=np.float64)
    if dy.ndim == 1:
        dy = dy[None]
    B, T = dy.shape
    if trace.states.shape[:2] != (B, T) or trace.unfolds != model.unfolds:
        raise ValueError("trace does not match the upstream gradient / model")
    if trace.states.shape[3] != model.wiring.n_hidden:
        raise ValueError("trace was produced by a different wiring")
    p = model.params
    L = model.unfolds
    dt = 1.0 / L
    M = model.wiring.n_motor
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    rec_AP = p["rec.A"] * model.rec_pol
    rec_gw = p["rec.gamma"]
    inv_tau2 = -1.0 / p["tau"] ** 2
    dnum_s = np.zeros((B, T, model.wiring.n_hidden))
    dden_s = np.zeros_like(dnum_s)
    dx = np.zeros((B, model.wiring.n_hidden))

    ends = trace.states[:, :, L, :M]
    grads["head.W"] = np.einsum("bt,btm->m", dy, ends)
    grads["head.b"][0] = dy.sum()

    for t in range(T - 1, -1, -1):
        dx[:, :M] += dy[:, t, None] * p["head.W"]
        for k in range(L - 1, -1, -1):
            x_prev = trace.states[:, t, k]
            x_new = trace.states[:, t, k + 1]
            den = trace.denominators[:, t, k]
            a = trace.gates[:, t, k]
            dnum = dx / den
            dden = -dx * x_new / den
            dnum_s[:, t] += dt * dnum
            dden_s[:, t] += dt * dden
            grads["tau"] += dt * inv_tau2 * dden.sum(axis=0)

            dnum_e = dnum[:, model.rec_dst]
            dden_e = dden[:, model.rec_dst]
            f = p["rec.w"] * a
            grads["rec.A"] += dt * (dnum_e * f).sum(axis=0) * model.rec_pol
            df = dt * (dnum_e * rec_AP + dden_e)
            grads["rec.w"] += (df * a).sum(axis=0)
            dz = df * p["rec.w"] * a * (1.0 - a)
            xs = x_prev[:, model.rec_src]
            grads["rec.gamma"] += (dz * (xs - p["rec.mu"])).sum(axis=0)
            grads["rec.mu"] -= dz.sum(axis=0) * rec_gw
            dx = dnum + (dz * rec_gw) @ model._rec_src_1h

    a_s = trace.sens_gate
    f_s = p["sens.w"] * a_s
    dnum_e = dnum_s[..., model.sens_dst]
    dden_e = dden_s[..., model.sens_dst]
    grads["sens.A"] = (dnum_e * f_s).sum(axis=(0, 1)) * model.sens_pol
    df = dnum_e * (p["sens.A"] * model.sens_pol) + dden_e
    grads["sens.w"] = (df * a_s).sum(axis=(0, 1))
    dz = df * p["sens.w"] * a_s * (1.0 - a_s)
    grads["sens.gamma"] = (dz * (trace.sens_pre - p["sens.mu"])).sum(axis=(0, 1))
    grads["sens.mu"] = -dz.sum(axis=(0, 1)) * p["sens.gamma"]
    return grads


# ---------------------------------------------------------------------------
# Persistence


def save_ltc(path: str | Path, model: LTCModel, extra: dict | None = None) -> None:
    w = model.wiring
    meta = {
        "wiring": {
            "n_sensory": w.n_sensory,
            "n_inter": w.n_inter,
            "n_command": w.n_command,
            "n_motor": w.n_motor,
            "synapses": [list(t) for t in w.synapses],
        },
        "unfolds": model.unfolds,
        "seed": model.seed,
        "extra": extra or {},
    }
    save_checkpoint(path, "ltc", meta, model.params)


def load_ltc(path: str | Path) -> tuple[LTCModel, dict]:
    meta, arrays = load_checkpoint(path, kind="ltc")
    wd = meta["wiring"]
    wiring = WiringDiagram(
        wd["n_sensory"], wd["n_inter"], wd["n_command"], wd["n_motor"], tuple(tuple(s) for s in wd["synapses"])
    )
    return LTCModel(wiring, arrays, meta["unfolds"], meta["seed"]), meta.get("extra", {})


def quantize(model: LTCModel) -> LTCModel:
    out = model.copy()
    out.params = to_float32_exact(out.params)
    return out


def default_model(n_sensory: int = 504, n_units: int = DEFAULT_UNITS, seed: int = 0, unfolds: int = DEFAULT_UNFOLDS) -> LTCModel:
    return init_ltc(auto_ncp_wire(n_sensory, n_units, 1, seed=seed), unfolds=unfolds, seed=seed)
