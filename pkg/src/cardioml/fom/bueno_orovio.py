"""Minimal four-variable ventricular cell model: right-hand side (with
analytic state/parameter partials for residual losses), explicit solver,
and the noisy sparse-observation dataset generator.

State ordering is (u, v, w, s): transmembrane potential plus three gates.
All switching uses the exact Heaviside H(z) = 1 if z > 0 else 0, whose
derivative is taken as 0 (the jump is measure-zero on collocation points).
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, fields

import numpy as np

from .datasets import Dataset, Trajectory
from .stimulus import Stimulus

CHANNELS = ("u", "v", "w", "s")


@dataclass
class BoParams:
    u_o: float
    u_u: float
    theta_v: float
    theta_w: float
    theta_v_minus: float
    theta_o: float
    tau_v1_minus: float
    tau_v2_minus: float
    tau_v_plus: float
    tau_w1_minus: float
    tau_w2_minus: float
    k_w_minus: float
    u_w_minus: float
    tau_w_plus: float
    tau_fi: float
    tau_o1: float
    tau_o2: float
    tau_so1: float
    tau_so2: float
    k_so: float
    u_so: float
    tau_s1: float
    tau_s2: float
    k_s: float
    u_s: float
    tau_si: float
    tau_w_inf: float
    w_inf_star: float

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not np.isfinite(val):
                raise ValueError(f"{f.name} must be finite")
            if f.name.startswith("tau_") and val <= 0:
                raise ValueError(f"time constant {f.name} must be positive")
        # Note: in the pinned epicardial set theta_w < theta_v; only require
        # both thresholds to sit inside [0, u_u).
        for name in ("theta_v", "theta_w"):
            if not 0 <= getattr(self, name) < self.u_u:
                raise ValueError(f"{name} outside [0, u_u)")

    def replace(self, **kv) -> "BoParams":
        d = self.as_dict()
        d.update(kv)
        return BoParams(**d)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _pinned_config() -> dict:
    ref = importlib.resources.files("cardioml.configs") / "bo_epi.json"
    return json.loads(ref.read_text())


def pinned_params() -> BoParams:
    """The versioned epicardial parameter set used as ground truth."""
    return BoParams(**_pinned_config()["params"])


def pinned_stimulus() -> Stimulus:
    return Stimulus.from_dicts(_pinned_config()["stimulus"])


def pinned_solver_settings() -> dict:
    cfg = _pinned_config()
    return {**cfg["solver"], **cfg["sampling"]}


def heaviside(z):
    return np.where(np.asarray(z) > 0.0, 1.0, 0.0)


def resting_state(p: BoParams) -> np.ndarray:
    """Exact equilibrium with no applied current: (u_o, 1, 1, s_inf(u_o))."""
    s_inf = (1.0 + np.tanh(p.k_s * (p.u_o - p.u_s))) / 2.0
    return np.array([p.u_o, 1.0, 1.0, s_inf])


def bo_rhs(state: np.ndarray, p: BoParams, i_app: float = 0.0,
           tau_fi: float | np.ndarray | None = None) -> np.ndarray:
    """Time derivatives of (u, v, w, s). Vectorized over a leading axis.

    `tau_fi` optionally overrides the parameter value; an array override
    broadcasts against the leading axis (used for parameter-bank solves).
    """
    state = np.asarray(state, dtype=float)
    tau_fi_val = p.tau_fi if tau_fi is None else tau_fi
    u, v, w, s = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    h_v = heaviside(u - p.theta_v)
    h_w = heaviside(u - p.theta_w)
    h_o = heaviside(u - p.theta_o)
    h_vm = heaviside(u - p.theta_v_minus)

    tau_v_minus = (1.0 - h_vm) * p.tau_v1_minus + h_vm * p.tau_v2_minus
    tau_w_minus = p.tau_w1_minus + (p.tau_w2_minus - p.tau_w1_minus) \
        * (1.0 + np.tanh(p.k_w_minus * (u - p.u_w_minus))) / 2.0
    tau_so = p.tau_so1 + (p.tau_so2 - p.tau_so1) \
        * (1.0 + np.tanh(p.k_so * (u - p.u_so))) / 2.0
    tau_s = (1.0 - h_w) * p.tau_s1 + h_w * p.tau_s2
    tau_o = (1.0 - h_o) * p.tau_o1 + h_o * p.tau_o2
    v_inf = 1.0 - h_vm
    w_inf = (1.0 - h_o) * (1.0 - u / p.tau_w_inf) + h_o * p.w_inf_star

    i_fi = -v * h_v * (u - p.theta_v) * (p.u_u - u) / tau_fi_val
    i_so = (u - p.u_o) * (1.0 - h_w) / tau_o + h_w / tau_so
    i_si = -h_w * w * s / p.tau_si

    du = -(i_fi + i_so + i_si) + i_app
    dv = (1.0 - h_v) * (v_inf - v) / tau_v_minus - h_v * v / p.tau_v_plus
    dw = (1.0 - h_w) * (w_inf - w) / tau_w_minus - h_w * w / p.tau_w_plus
    ds = ((1.0 + np.tanh(p.k_s * (u - p.u_s))) / 2.0 - s) / tau_s
    return np.stack([du, dv, dw, ds], axis=-1)


def bo_rhs_partials(state: np.ndarray, p: BoParams
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (d rhs / d state, d rhs / d tau_fi).

    Heaviside switches contribute zero derivative; the tanh gates in
    tau_w_minus, tau_so and the s-equation are differentiated exactly.
    Returns (jac, dfi) with jac[..., i, j] = d f_i / d state_j and
    dfi[..., i] = d f_i / d tau_fi.
    """
    state = np.asarray(state, dtype=float)
    u, v, w, s = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    h_v = heaviside(u - p.theta_v)
    h_w = heaviside(u - p.theta_w)
    h_o = heaviside(u - p.theta_o)
    h_vm = heaviside(u - p.theta_v_minus)

    tau_v_minus = (1.0 - h_vm) * p.tau_v1_minus + h_vm * p.tau_v2_minus
    th_wm = np.tanh(p.k_w_minus * (u - p.u_w_minus))
    tau_w_minus = p.tau_w1_minus + (p.tau_w2_minus - p.tau_w1_minus) * (1.0 + th_wm) / 2.0
    d_tau_w_minus = (p.tau_w2_minus - p.tau_w1_minus) * p.k_w_minus * (1.0 - th_wm**2) / 2.0
    th_so = np.tanh(p.k_so * (u - p.u_so))
    tau_so = p.tau_so1 + (p.tau_so2 - p.tau_so1) * (1.0 + th_so) / 2.0
    d_tau_so = (p.tau_so2 - p.tau_so1) * p.k_so * (1.0 - th_so**2) / 2.0
    tau_s = (1.0 - h_w) * p.tau_s1 + h_w * p.tau_s2
    tau_o = (1.0 - h_o) * p.tau_o1 + h_o * p.tau_o2
    w_inf = (1.0 - h_o) * (1.0 - u / p.tau_w_inf) + h_o * p.w_inf_star
    d_w_inf = -(1.0 - h_o) / p.tau_w_inf
    v_inf = 1.0 - h_vm

    i_fi = -v * h_v * (u - p.theta_v) * (p.u_u - u) / p.tau_fi
    d_ifi_du = -v * h_v * ((p.u_u - u) - (u - p.theta_v)) / p.tau_fi
    d_ifi_dv = -h_v * (u - p.theta_v) * (p.u_u - u) / p.tau_fi
    d_iso_du = (1.0 - h_w) / tau_o - h_w * d_tau_so / tau_so**2
    d_isi_dw = -h_w * s / p.tau_si
    d_isi_ds = -h_w * w / p.tau_si

    batch = u.shape
    jac = np.zeros(batch + (4, 4))
    dfi = np.zeros(batch + (4,))

    jac[..., 0, 0] = -(d_ifi_du + d_iso_du)
    jac[..., 0, 1] = -d_ifi_dv
    jac[..., 0, 2] = -d_isi_dw
    jac[..., 0, 3] = -d_isi_ds
    # f_u = -(i_fi + ...) and d i_fi/d tau_fi = -i_fi/tau_fi
    dfi[..., 0] = i_fi / p.tau_fi

    jac[..., 1, 1] = -(1.0 - h_v) / tau_v_minus - h_v / p.tau_v_plus

    jac[..., 2, 0] = (1.0 - h_w) * (d_w_inf / tau_w_minus
                                    - (w_inf - w) * d_tau_w_minus / tau_w_minus**2)
    jac[..., 2, 2] = -(1.0 - h_w) / tau_w_minus - h_w / p.tau_w_plus

    th_s = np.tanh(p.k_s * (u - p.u_s))
    jac[..., 3, 0] = p.k_s * (1.0 - th_s**2) / (2.0 * tau_s)
    jac[..., 3, 3] = -1.0 / tau_s
    _ = v_inf  # piecewise constant in u: no contribution
    return jac, dfi


def bo_solve(p: BoParams, stim: Stimulus, dt: float = 0.1, t_final: float = 800.0,
             initial: np.ndarray | None = None) -> Trajectory:
    """Explicit forward-Euler integration of the cell model.

    The first stored sample is the initial state at t=0. Aborts with a
    diagnostic if any state magnitude exceeds 1e3.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be a multiple of dt")
    y = resting_state(p) if initial is None else np.asarray(initial, dtype=float).copy()
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, 4))
    times[0], states[0] = 0.0, y
    for k in range(n_steps):
        t = k * dt
        y = y + dt * bo_rhs(y, p, stim.current(t))
        if np.any(np.abs(y) > 1e3) or not np.all(np.isfinite(y)):
            raise FloatingPointError(
                f"cell solve diverged at t={t + dt:.3f} ms (state={y})")
        times[k + 1] = (k + 1) * dt
        states[k + 1] = y
    return Trajectory(times, states, CHANNELS)


def bo_solve_bank(p: BoParams, tau_fis: np.ndarray, stim: Stimulus,
                  dt: float = 0.1, t_final: float = 800.0,
                  sample_every: float | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Solve the cell model once per tau_fi value, all members in lockstep.

    Returns (times, states[n_times, n_bank, 4]); with `sample_every` set,
    only that coarser time grid is stored.
    """
    tau_fis = np.asarray(tau_fis, dtype=float)
    if np.any(tau_fis <= 0):
        raise ValueError("tau_fi values must be positive")
    n_steps = int(round(t_final / dt))
    stride = 1 if sample_every is None else int(round(sample_every / dt))
    if stride < 1 or abs(stride * dt - (sample_every or dt)) > 1e-9:
        raise ValueError("sample_every must be a multiple of dt")
    y = np.tile(resting_state(p), (tau_fis.size, 1))
    kept = range(0, n_steps + 1, stride)
    times = np.array([k * dt for k in kept])
    out = np.empty((len(times), tau_fis.size, 4))
    out[0] = y
    pos = 1
    for k in range(n_steps):
        y = y + dt * bo_rhs(y, p, stim.current(k * dt), tau_fi=tau_fis)
        if np.any(np.abs(y) > 1e3) or not np.all(np.isfinite(y)):
            raise FloatingPointError(f"bank solve diverged at step {k + 1}")
        if (k + 1) % stride == 0:
            out[pos] = y
            pos += 1
    return times, out[:pos]


def make_bo_dataset(traj: Trajectory, sigma: float = 0.0, seed: int = 0,
                    u_every: float = 25.0, gating_every: float = 300.0,
                    t_final: float | None = None) -> Dataset:
    """Sparse observations: u on a coarse grid, gates on a much coarser one,
    i.i.d. zero-mean Gaussian noise (same sigma on every observed channel).

    Raises if the sampling horizon extends beyond the trajectory."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    t_end = traj.times[-1] if t_final is None else float(t_final)
    t_u = np.arange(0.0, t_end + 1e-9, u_every)
    t_g = np.arange(0.0, t_end + 1e-9, gating_every)
    rows_t, rows_c, rows_v = [], [], []
    u_vals = traj.at_times(t_u)[:, 0]
    g_states = traj.at_times(t_g)
    rows_t.append(t_u)
    rows_c.append(np.full(t_u.size, "u", dtype=object))
    rows_v.append(u_vals)
    for k, name in enumerate(("v", "w", "s")):
        rows_t.append(t_g)
        rows_c.append(np.full(t_g.size, name, dtype=object))
        rows_v.append(g_states[:, k + 1])
    t = np.concatenate(rows_t)
    channel = np.concatenate(rows_c)
    value = np.concatenate(rows_v)
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        value = value + rng.normal(0.0, sigma, size=value.size)
    return Dataset(
        t, np.full(t.size, np.nan), channel, value,
        noise={"sigma": sigma, "seed": seed} if sigma > 0 else None,
        sampling={"u_every": u_every, "gating_every": gating_every,
                  "t_final": float(t_end)},
    )
