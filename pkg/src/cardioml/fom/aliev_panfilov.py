"""1D monodomain tissue solver: explicit finite differences for the
two-variable excitable reaction coupled to diffusion of the potential,
with homogeneous Neumann boundaries via mirrored ghost nodes."""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset, SpaceTimeField
from .stimulus import Stimulus


@dataclass
class ApConfig:
    length: float
    n_x: int
    diffusivity: float
    k_reaction: float
    alpha: float
    gamma: float
    mu1: float
    mu2: float
    b: float
    dt: float
    t_final: float

    def __post_init__(self):
        if self.n_x < 3:
            raise ValueError("need at least 3 grid points")
        if self.dt <= 0 or self.t_final <= 0 or self.length <= 0:
            raise ValueError("dt, t_final and length must be positive")
        for name in ("k_reaction", "alpha", "gamma", "mu1", "mu2", "b",
                     "diffusivity"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.diffusivity > 0 and self.dt > self.stability_bound():
            raise ValueError(
                f"dt={self.dt} violates the explicit-diffusion bound "
                f"h^2/(2D)={self.stability_bound():.3e}")

    @property
    def h(self) -> float:
        return self.length / (self.n_x - 1)

    def stability_bound(self) -> float:
        if self.diffusivity == 0:
            return np.inf
        return self.h**2 / (2.0 * self.diffusivity)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_x)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "length", "n_x", "diffusivity", "k_reaction", "alpha", "gamma",
            "mu1", "mu2", "b", "dt", "t_final")}


def _pinned_config() -> dict:
    ref = importlib.resources.files("cardioml.configs") / "ap1d.json"
    return json.loads(ref.read_text())


def pinned_config() -> ApConfig:
    return ApConfig(**_pinned_config()["params"])


def pinned_protocol() -> dict:
    cfg = _pinned_config()
    return {k: cfg[k] for k in ("stimulus_sites", "stimulus_pulse",
                                "store_every", "subsample")}


def ap_reaction(v, w, cfg: ApConfig):
    """Pointwise reaction terms of the two-variable model."""
    dv = cfg.k_reaction * v * (1.0 - v) * (v - cfg.alpha) - v * w
    dw = (cfg.gamma + cfg.mu1 * w / (cfg.mu2 + v)) \
        * (-w - cfg.k_reaction * v * (v - cfg.b - 1.0))
    return dv, dw


def ap1d_solve(cfg: ApConfig, stim: Stimulus,
               store_every: int = 1) -> SpaceTimeField:
    """March the coupled system with a 3-point Laplacian on v.

    Ghost-node mirroring at both ends enforces zero flux. States are
    recorded every `store_every` steps (step 0 and the final step are
    always included when t_final/dt is a multiple of store_every).
    """
    xs = cfg.xs
    for p in stim.pulses:
        if p.x_lo is not None and (p.x_lo < 0 or p.x_hi > cfg.length):
            raise ValueError("stimulus support outside the domain")
    n_steps = int(round(cfg.t_final / cfg.dt))
    v = np.zeros(cfg.n_x)
    w = np.zeros(cfg.n_x)
    kept = list(range(0, n_steps + 1, store_every))
    if kept[-1] != n_steps:
        kept.append(n_steps)
    keep_mask = np.zeros(n_steps + 1, dtype=bool)
    keep_mask[kept] = True
    times = np.empty(len(kept))
    v_out = np.empty((len(kept), cfg.n_x))
    w_out = np.empty((len(kept), cfg.n_x))
    times[0], v_out[0], w_out[0] = 0.0, v, w
    pos = 1
    coef = cfg.diffusivity / cfg.h**2
    lap = np.empty(cfg.n_x)
    for k in range(n_steps):
        t = k * cfg.dt
        lap[1:-1] = v[2:] - 2.0 * v[1:-1] + v[:-2]
        lap[0] = 2.0 * (v[1] - v[0])          # mirrored ghost node
        lap[-1] = 2.0 * (v[-2] - v[-1])
        rv, rw = ap_reaction(v, w, cfg)
        i_app = stim.current_on_grid(t, xs)
        v = v + cfg.dt * (coef * lap + rv + i_app)
        w = w + cfg.dt * rw
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))) \
                or np.max(np.abs(v)) > 1e3:
            raise FloatingPointError(f"tissue solve diverged at t={t + cfg.dt:.4f}")
        if keep_mask[k + 1]:
            times[pos] = (k + 1) * cfg.dt
            v_out[pos], w_out[pos] = v, w
            pos += 1
    return SpaceTimeField(times[:pos], xs, {"v": v_out[:pos], "w": w_out[:pos]})


def even_indices(n: int, keep: int) -> np.ndarray:
    """Evenly spread `keep` indices over range(n), both endpoints included."""
    if not 1 <= keep <= n:
        raise ValueError(f"cannot keep {keep} of {n}")
    if keep == 1:
        return np.array([0])
    return np.round(np.linspace(0.0, n - 1, keep)).astype(int)


def subsample_field(field: SpaceTimeField, n_x_keep: int = 100,
                    n_t_keep: int = 500, channel: str = "v") -> Dataset:
    """Evenly strided space-time subsampling of one channel into a Dataset."""
    ti = even_indices(field.times.size, n_t_keep)
    xi = even_indices(field.xs.size, n_x_keep)
    vals = field.values[channel][np.ix_(ti, xi)]
    tt, xx = np.meshgrid(field.times[ti], field.xs[xi], indexing="ij")
    return Dataset(
        tt.ravel(), xx.ravel(),
        np.full(tt.size, channel, dtype=object), vals.ravel(),
        noise=None,
        sampling={"n_x_keep": n_x_keep, "n_t_keep": n_t_keep, "channel": channel},
    )


def subsample_grid(field: SpaceTimeField, n_x_keep: int, n_t_keep: int,
                   channel: str = "v") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Same selection as subsample_field but keeping the grid structure:
    returns (times, xs, values[n_t, n_x])."""
    ti = even_indices(field.times.size, n_t_keep)
    xi = even_indices(field.xs.size, n_x_keep)
    return field.times[ti], field.xs[xi], field.values[channel][np.ix_(ti, xi)]
