"""Latent-dynamics surrogates: a low-dimensional state driven by a learned
ODE (forward Euler, backprop through time), reconstructed either by a
space-conditioned network (mesh-less field output), a plain decoder, or
the output-inside-the-state convention (the output is the first latent
component).

Auxiliary losses: a cycle term pulling returning trajectories back to the
initial latent state (normalized by the mean squared latent excursion)
and an equilibrium term making the anchor (s0, u0) a fixed point, either
weakly (penalty) or strongly (the dynamics net's anchor output is
subtracted, so the constraint holds by construction).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    GradientSet,
    Mlp,
    mlp_backprop,
    mlp_backprop_dual,
    mlp_forward,
    mlp_forward_dual,
    mlp_init,
    regularization_grad,
    regularization_terms,
)
from .optim import OptState, Schedule, step
from .rng import child_seed_seq

MODES = ("ldnet", "decoder", "output_in_state")
EQ_MODES = ("off", "weak", "strong")


@dataclass
class FeatureSpec:
    """Declarative input-feature hook for the dynamics network.

    kind "raw" passes u(t) through; "periodic" appends the clock features
    cos(2*pi*t/period), sin(2*pi*t/period).
    """

    kind: str = "raw"
    period: float | None = None

    def __post_init__(self):
        if self.kind not in ("raw", "periodic"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "periodic" and not (self.period and self.period > 0):
            raise ValueError("periodic features need a positive period")

    def width(self, n_u: int) -> int:
        return n_u + (2 if self.kind == "periodic" else 0)

    def apply(self, t: float, u: np.ndarray) -> np.ndarray:
        if self.kind == "raw":
            return u
        phase = 2.0 * np.pi * t / self.period
        clock = np.array([np.cos(phase), np.sin(phase)])
        return np.concatenate([u, np.broadcast_to(clock, u.shape[:-1] + (2,))],
                              axis=-1)

    def apply_block(self, ts: np.ndarray, u_block: np.ndarray) -> np.ndarray:
        if self.kind == "raw":
            return u_block
        phase = 2.0 * np.pi * np.asarray(ts) / self.period
        return np.concatenate(
            [u_block, np.column_stack([np.cos(phase), np.sin(phase)])], axis=1)


@dataclass
class LatentSample:
    """One training trajectory: an input signal and observed outputs."""

    times: np.ndarray            # input sampling grid
    u: np.ndarray                # (n_t, n_u) input values
    obs_t: np.ndarray            # observation times
    obs_y: np.ndarray            # (n_o, n_y) or (n_o,) observed outputs
    obs_x: np.ndarray | None = None  # spatial query points for field data
    returns_to_start: bool = False   # cycle-loss membership

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float).T).T
        self.obs_t = np.asarray(self.obs_t, dtype=float)
        self.obs_y = np.asarray(self.obs_y, dtype=float)
        if self.obs_x is not None:
            self.obs_x = np.asarray(self.obs_x, dtype=float)

    def u_on_grid(self, grid: np.ndarray) -> np.ndarray:
        """Input linearly interpolated onto the integration grid."""
        return np.column_stack([np.interp(grid, self.times, self.u[:, j])
                                for j in range(self.u.shape[1])])


@dataclass
class LatentModel:
    dyn_net: Mlp
    n_s: int
    mode: str = "decoder"
    rec_net: Mlp | None = None
    s0: np.ndarray | None = None
    equilibrium_mode: str = "off"
    anchor_u: np.ndarray | None = None    # feature-space input at the anchor
    features: FeatureSpec = field(default_factory=FeatureSpec)
    x_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.equilibrium_mode not in EQ_MODES:
            raise ValueError(f"unknown equilibrium mode {self.equilibrium_mode!r}")
        if self.dyn_net.arch[-1] != self.n_s:
            raise ValueError("dynamics net output width must equal n_s")
        if self.mode == "output_in_state":
            if self.rec_net is not None:
                raise ValueError("output_in_state mode has no reconstruction net")
        elif self.rec_net is None:
            raise ValueError(f"mode {self.mode!r} needs a reconstruction net")
        if self.s0 is None:
            self.s0 = np.zeros(self.n_s)
        self.s0 = np.asarray(self.s0, dtype=float)
        if self.equilibrium_mode != "off" and self.anchor_u is None:
            raise ValueError("equilibrium modes need the anchor input u0")

    @property
    def n_params(self) -> int:
        n = self.dyn_net.n_params
        if self.rec_net is not None:
            n += self.rec_net.n_params
        return n

    def params_flat(self) -> np.ndarray:
        parts = [self.dyn_net.params_flat()]
        if self.rec_net is not None:
            parts.append(self.rec_net.params_flat())
        return np.concatenate(parts)

    def set_params_flat(self, theta: np.ndarray) -> None:
        n_dyn = self.dyn_net.n_params
        self.dyn_net.set_params_flat(theta[:n_dyn])
        if self.rec_net is not None:
            self.rec_net.set_params_flat(theta[n_dyn:])

    def x_hat(self, x: np.ndarray, allow_extrapolation: bool = False) -> np.ndarray:
        if self.x_range is None:
            return np.asarray(x, dtype=float)
        lo, hi = self.x_range
        x = np.asarray(x, dtype=float)
        if not allow_extrapolation and (np.any(x < lo) or np.any(x > hi)):
            raise ValueError(f"query outside [{lo}, {hi}]: extrapolation")
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    def anchor_value(self) -> np.ndarray:
        """Raw dynamics-net output at the anchor (before any wrapping)."""
        x0 = np.concatenate([self.s0, self.anchor_u])
        y, _ = mlp_forward(self.dyn_net, x0)
        return y

    def save(self, path) -> None:
        d = {
            "n_s": self.n_s, "mode": self.mode,
            "equilibrium_mode": self.equilibrium_mode,
            "s0": self.s0.tolist(),
            "anchor_u": None if self.anchor_u is None else list(self.anchor_u),
            "features": {"kind": self.features.kind,
                         "period": self.features.period},
            "x_range": self.x_range,
            "dyn_net": self.dyn_net.to_json_dict(),
            "rec_net": None if self.rec_net is None else self.rec_net.to_json_dict(),
        }
        with open(path, "w") as f:
            json.dump(d, f)

    @staticmethod
    def load(path) -> "LatentModel":
        with open(path) as f:
            d = json.load(f)
        return LatentModel(
            dyn_net=Mlp.from_json_dict(d["dyn_net"]),
            n_s=d["n_s"], mode=d["mode"],
            rec_net=None if d["rec_net"] is None else Mlp.from_json_dict(d["rec_net"]),
            s0=np.array(d["s0"]),
            equilibrium_mode=d["equilibrium_mode"],
            anchor_u=None if d["anchor_u"] is None else np.array(d["anchor_u"]),
            features=FeatureSpec(**d["features"]),
            x_range=None if d["x_range"] is None else tuple(d["x_range"]),
        )


# ------------------------------------------------------------------ integration


@dataclass
class IntegrationTape:
    """Everything the reverse sweep needs: per-step caches and inputs."""

    grid: np.ndarray                # (n_steps + 1,)
    path: np.ndarray                # (n_steps + 1, n_samples, n_s)
    caches: list
    inputs: list                    # per-step feature blocks
    anchor_correction: np.ndarray | None  # raw anchor output (strong mode)


def _effective_anchor(model: LatentModel):
    if model.equilibrium_mode != "strong":
        return None
    return model.anchor_value()


def integrate(model: LatentModel, samples: list[LatentSample], dt: float,
              t_final: float, record_tape: bool = False,
              s_init: np.ndarray | None = None
              ) -> tuple[np.ndarray, np.ndarray, IntegrationTape | None]:
    """Forward-Euler latent path for a batch of samples sharing the grid.

    s[k+1] = s[k] + dt * dyn(s[k], u(k dt)); in strong equilibrium mode
    the raw dynamics output at the anchor is subtracted each step, making
    the anchor an exact fixed point for any parameter values.
    Returns (grid, path[n_steps+1, n_samples, n_s], tape).
    """
    n_steps = int(round(t_final / dt))
    grid = np.arange(n_steps + 1) * dt
    n_samples = len(samples)
    u_blocks = [model.features.apply_block(grid, s.u_on_grid(grid))
                for s in samples]
    correction = _effective_anchor(model)
    s = np.tile(model.s0, (n_samples, 1)) if s_init is None \
        else np.array(s_init, dtype=float).reshape(n_samples, model.n_s)
    path = np.empty((n_steps + 1, n_samples, model.n_s))
    path[0] = s
    caches, inputs = [], []
    for k in range(n_steps):
        u_k = np.stack([u_blocks[j][k] for j in range(n_samples)])
        x = np.concatenate([s, u_k], axis=1)
        f, cache = mlp_forward(model.dyn_net, x)
        if correction is not None:
            f = f - correction
        s = s + dt * f
        if np.max(np.abs(s)) > 1e6 or not np.all(np.isfinite(s)):
            raise FloatingPointError(f"latent state diverged at step {k + 1}")
        path[k + 1] = s
        if record_tape:
            caches.append(cache)
            inputs.append(x)
    tape = IntegrationTape(grid, path, caches, inputs, correction) \
        if record_tape else None
    return grid, path, tape


def _bptt(model: LatentModel, tape: IntegrationTape, dt: float,
          dL_dpath: np.ndarray) -> GradientSet:
    """Reverse sweep through the Euler recursion.

    dL_dpath holds the direct loss adjoints of every stored state. The
    running adjoint obeys lam[k] = dL_dpath[k] + lam[k+1]
    + dt * (d dyn/d s)^T lam[k+1]; parameter gradients accumulate
    dt * (d dyn/d w)^T lam[k+1]. In strong mode the anchor evaluation
    receives the summed negative adjoint once at the end.
    """
    n_steps = len(tape.caches)
    grads = GradientSet.zeros_like(model.dyn_net)
    lam = dL_dpath[n_steps].copy()
    anchor_adjoint = np.zeros((1, model.n_s))
    for k in range(n_steps - 1, -1, -1):
        g_k = mlp_backprop(model.dyn_net, tape.caches[k], dt * lam)
        grads.add_(g_k)
        if tape.anchor_correction is not None:
            anchor_adjoint -= dt * lam.sum(axis=0, keepdims=True)
        # pull the adjoint through s[k+1] = s[k] + dt f(s[k], ...)
        _, dLdx, _ = _backprop_inputs(model.dyn_net, tape.caches[k], dt * lam)
        lam = lam + dLdx[:, :model.n_s] + dL_dpath[k]
    if tape.anchor_correction is not None and np.any(anchor_adjoint):
        x0 = np.concatenate([model.s0, model.anchor_u])[None, :]
        _, cache0 = mlp_forward(model.dyn_net, x0)
        grads.add_(mlp_backprop(model.dyn_net, cache0, anchor_adjoint))
    return grads


def _backprop_inputs(net: Mlp, cache, dLdy):
    """Plain backprop that also returns dL/d(input)."""
    zeros = np.zeros_like(np.atleast_2d(dLdy))
    dual = _plain_to_dual(cache)
    return mlp_backprop_dual(net, dual, dLdy, zeros)


def _plain_to_dual(cache):
    from .autodiff import DualCache
    return DualCache(cache.zs, [np.zeros_like(z) for z in cache.zs],
                     cache.activations,
                     [np.zeros_like(a) for a in cache.activations])


# ------------------------------------------------------------------ losses


def _interp_weights(grid: np.ndarray, ts: np.ndarray):
    """Bracketing step indices and weights for linear time interpolation."""
    idx = np.clip(np.searchsorted(grid, ts, side="right") - 1, 0,
                  grid.size - 2)
    w = (ts - grid[idx]) / (grid[idx + 1] - grid[idx])
    w = np.clip(w, 0.0, 1.0)
    return idx, w


def _states_at(path, sample_idx, step_idx, w):
    s_lo = path[step_idx, sample_idx]
    s_hi = path[step_idx + 1, sample_idx]
    return (1.0 - w)[:, None] * s_lo + w[:, None] * s_hi


def trajectory_loss(model: LatentModel, samples: list[LatentSample],
                    dt: float, t_final: float,
                    obs_subset: list[np.ndarray] | None = None
                    ) -> tuple[float, GradientSet, GradientSet | None]:
    """Mean squared misfit between observations and the reconstructed
    outputs along the integrated latent path; gradients for both networks.

    `obs_subset` optionally restricts each sample to a subset of its
    observation rows (stochastic query minibatching).
    """
    if not samples:
        raise ValueError("empty dataset")
    grid, path, tape = integrate(model, samples, dt, t_final, record_tape=True)
    dL_dpath = np.zeros_like(path)
    rec_grads = GradientSet.zeros_like(model.rec_net) if model.rec_net else None

    total, count = 0.0, 0
    blocks = []
    for j, sample in enumerate(samples):
        rows = np.arange(sample.obs_t.size) if obs_subset is None \
            else obs_subset[j]
        count += rows.size * (sample.obs_y[rows].size // max(rows.size, 1))
        blocks.append(rows)
    if count == 0:
        raise ValueError("no observations selected")

    for j, sample in enumerate(samples):
        rows = blocks[j]
        if rows.size == 0:
            continue
        ts = sample.obs_t[rows]
        ys = np.atleast_2d(sample.obs_y[rows].T).T
        idx, w = _interp_weights(grid, ts)
        s_at = _states_at(path, j, idx, w)
        if model.mode == "output_in_state":
            pred = s_at[:, :1]
            resid = pred - ys
            total += float(np.sum(resid**2))
            dL_ds = np.zeros_like(s_at)
            dL_ds[:, 0] = 2.0 * resid[:, 0] / count
        else:
            if model.mode == "ldnet":
                xh = model.x_hat(sample.obs_x[rows], allow_extrapolation=True)
                inp = np.column_stack([xh, s_at])
                s_cols = slice(1, 1 + model.n_s)
            else:
                inp = s_at
                s_cols = slice(0, model.n_s)
            pred, cache = mlp_forward(model.rec_net, inp)
            resid = pred - ys
            total += float(np.sum(resid**2))
            dLdy = 2.0 * resid / count
            g_rec = mlp_backprop(model.rec_net, cache, dLdy)
            rec_grads.add_(g_rec)
            _, dLdinp, _ = _backprop_inputs(model.rec_net, cache, dLdy)
            dL_ds = dLdinp[:, s_cols]
        np.add.at(dL_dpath[:, j, :], idx, (1.0 - w)[:, None] * dL_ds)
        np.add.at(dL_dpath[:, j, :], idx + 1, w[:, None] * dL_ds)
    dyn_grads = _bptt(model, tape, dt, dL_dpath)
    return total / count, dyn_grads, rec_grads


def derivative_loss(dyn_net: Mlp, samples: list[LatentSample]
                    ) -> tuple[float, GradientSet]:
    """Fit finite-difference output derivatives directly (state fully
    observed, no latent integration)."""
    xs, targets = [], []
    for sample in samples:
        y = np.atleast_2d(sample.obs_y.T).T
        if y.shape[0] < 2:
            raise ValueError("derivative loss needs at least 2 time points")
        dts = np.diff(sample.obs_t)
        dy = np.diff(y, axis=0) / dts[:, None]
        u = sample.u_on_grid(sample.obs_t[:-1])
        xs.append(np.concatenate([y[:-1], u], axis=1))
        targets.append(dy)
    x = np.concatenate(xs)
    target = np.concatenate(targets)
    pred, cache = mlp_forward(dyn_net, x)
    resid = pred - target
    n = resid.size
    value = float(np.mean(resid**2))
    grads = mlp_backprop(dyn_net, cache, 2.0 * resid / n)
    return value, grads


def aux_losses(model: LatentModel, samples: list[LatentSample], dt: float,
               t_final: float, lambda_cycle: float = 0.0,
               lambda_eq: float = 0.0) -> tuple[float, float, GradientSet]:
    """Unweighted (cycle, equilibrium) loss values plus the dynamics-net
    gradient of lambda_cycle * cycle + lambda_eq * eq. In strong mode the
    equilibrium term is identically zero by construction (the wrapped
    dynamics vanish at the anchor) and contributes no gradient."""
    grads = GradientSet.zeros_like(model.dyn_net)
    cycle_val = 0.0
    j_cycle = [j for j, s in enumerate(samples) if s.returns_to_start]
    if lambda_cycle > 0 and not j_cycle:
        raise ValueError("cycle weight set but no returning samples flagged")
    if j_cycle:
        grid, path, tape = integrate(model, samples, dt, t_final,
                                     record_tape=True)
        n_steps = len(tape.caches)
        dL_dpath = np.zeros_like(path)
        for j in j_cycle:
            dev = path[:, j, :] - model.s0
            a = float(np.sum(dev[-1] ** 2))
            b = float(np.sum(dev**2)) / n_steps
            if b < 1e-30:
                continue  # never left the anchor: trivially cyclic
            cycle_val += a / b
            scale = lambda_cycle / len(j_cycle)
            dL_dpath[-1, j, :] += scale * 2.0 * dev[-1] / b
            dL_dpath[:, j, :] += scale * (-a / b**2) * 2.0 * dev / n_steps
        cycle_val /= len(j_cycle)
        if lambda_cycle > 0:
            grads.add_(_bptt(model, tape, dt, dL_dpath))

    if model.equilibrium_mode == "weak":
        x0 = np.concatenate([model.s0, model.anchor_u])[None, :]
        f0, cache0 = mlp_forward(model.dyn_net, x0)
        eq_val = float(np.sum(f0**2))
        if lambda_eq > 0:
            grads.add_(mlp_backprop(model.dyn_net, cache0,
                                    lambda_eq * 2.0 * f0))
    else:
        eq_val = 0.0  # strong mode satisfies the constraint exactly
    return cycle_val, eq_val, grads


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    lambda_cycle: float = 0.0
    lambda_eq: float = 0.0
    lambda_l2: float = 0.0
    dt: float | None = None          # default: the data sampling step
    t_final: float | None = None
    epochs: int = 1000
    batch_samples: int = 0           # 0 = full batch
    batch_queries: int = 0           # 0 = all observation rows
    learning_rate: float = 1e-3
    seed: int = 0
    clip_norm: float | None = 100.0

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_eq", "lambda_l2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")


@dataclass
class TrainReport:
    history: list[float]
    wall_time: float
    final_loss: float


def _l2_value_and_grads(model: LatentModel, lam: float):
    value = regularization_terms(model.dyn_net)[0]
    grads = [regularization_grad(model.dyn_net, lam_l2=lam)]
    if model.rec_net is not None:
        value += regularization_terms(model.rec_net)[0]
        grads.append(regularization_grad(model.rec_net, lam_l2=lam))
    return value, grads


def train(model: LatentModel, samples: list[LatentSample],
          cfg: TrainConfig) -> TrainReport:
    """Adam on trajectory + lambda_cycle*cycle + lambda_eq*eq + Tikhonov,
    with optional stochastic minibatching over samples and query rows."""
    t0 = time.perf_counter()
    if not samples:
        raise ValueError("empty dataset")
    if model.equilibrium_mode == "weak" and cfg.lambda_eq <= 0:
        raise ValueError("weak equilibrium mode needs lambda_eq > 0")
    dt = cfg.dt if cfg.dt is not None else float(np.diff(samples[0].times).mean())
    t_final = cfg.t_final if cfg.t_final is not None else float(samples[0].times[-1])
    rng = np.random.default_rng(child_seed_seq(cfg.seed, "shuffle"))
    theta = model.params_flat()
    state = OptState("adam", clip_norm=cfg.clip_norm)
    schedule = Schedule("constant", eta0=cfg.learning_rate)
    history = []
    n_dyn = model.dyn_net.n_params
    for _ in range(cfg.epochs):
        if cfg.batch_samples and cfg.batch_samples < len(samples):
            pick = rng.choice(len(samples), cfg.batch_samples, replace=False)
            batch = [samples[j] for j in pick]
        else:
            batch = samples
        subset = None
        if cfg.batch_queries:
            subset = [rng.choice(s.obs_t.size,
                                 min(cfg.batch_queries, s.obs_t.size),
                                 replace=False) for s in batch]
        value, dyn_g, rec_g = trajectory_loss(model, batch, dt, t_final,
                                              obs_subset=subset)
        if cfg.lambda_cycle > 0 or model.equilibrium_mode == "weak":
            cyc, eq, aux_g = aux_losses(model, batch, dt, t_final,
                                        lambda_cycle=cfg.lambda_cycle,
                                        lambda_eq=cfg.lambda_eq)
            value += cfg.lambda_cycle * cyc + cfg.lambda_eq * eq
            dyn_g.add_(aux_g)  # already weighted inside aux_losses
        if cfg.lambda_l2 > 0:
            l2_val, l2_grads = _l2_value_and_grads(model, cfg.lambda_l2)
            value += cfg.lambda_l2 * l2_val
            dyn_g.add_(l2_grads[0])
            if rec_g is not None:
                rec_g.add_(l2_grads[1])
        if not np.isfinite(value):
            raise FloatingPointError("training loss diverged")
        flat = dyn_g.flat() if rec_g is None \
            else np.concatenate([dyn_g.flat(), rec_g.flat()])
        theta = step(state, theta, flat, schedule)
        model.set_params_flat(theta)
        history.append(float(value))
    return TrainReport(history, time.perf_counter() - t0,
                       history[-1] if history else np.nan)


def predict_field(model: LatentModel, x_queries: np.ndarray,
                  sample: LatentSample, times: np.ndarray, dt: float,
                  t_final: float, allow_extrapolation: bool = False
                  ) -> np.ndarray:
    """Mesh-less evaluation of the reconstructed field at arbitrary
    (x, t) pairs; queries outside the training x-range are flagged."""
    if model.mode != "ldnet":
        raise ValueError("field prediction needs an ldnet-mode model")
    grid, path, _ = integrate(model, [sample], dt, t_final)
    times = np.asarray(times, dtype=float)
    idx, w = _interp_weights(grid, times)
    s_at = _states_at(path, 0, idx, w)
    xh = model.x_hat(np.asarray(x_queries, dtype=float), allow_extrapolation)
    out = np.empty((times.size, xh.size))
    for i in range(times.size):
        inp = np.column_stack([xh, np.tile(s_at[i], (xh.size, 1))])
        y, _ = mlp_forward(model.rec_net, inp)
        out[i] = y[:, 0]
    return out


def predict_series(model: LatentModel, sample: LatentSample, dt: float,
                   t_final: float) -> tuple[np.ndarray, np.ndarray]:
    """Output trajectory for decoder / output-inside-the-state models."""
    grid, path, _ = integrate(model, [sample], dt, t_final)
    if model.mode == "output_in_state":
        return grid, path[:, 0, 0]
    if model.mode == "decoder":
        y, _ = mlp_forward(model.rec_net, path[:, 0, :])
        return grid, y
    raise ValueError("use predict_field for ldnet models")
