"""Inverse estimation of the fast-inward time constant from noisy sparse
cell recordings, by a physics-informed network or its multifidelity
variant (a parametric low-fidelity emulator acting as prior plus a
trainable correction network).

Both estimators share the staged training strategy: a data-fitting phase
with a tiny residual weight, then (multifidelity only) a cheap 1-D search
over the parameter through the frozen emulator, then the full
physics-weighted optimization. The unknown parameter is kept positive by
optimizing its logarithm.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    GradientSet,
    Mlp,
    mlp_backprop,
    mlp_backprop_dual,
    mlp_forward,
    mlp_forward_dual,
    mlp_init,
)
from .fom import (
    CHANNELS,
    BoParams,
    Dataset,
    Stimulus,
    bo_rhs,
    bo_rhs_partials,
    bo_solve_bank,
)
from .optim import OptState, Schedule, step
from .rng import child_seed_seq


@dataclass
class LossWeights:
    """Residual and low-fidelity weights; the observation weight is 1."""

    alpha_pde: float = 1e-3
    alpha_low: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha_pde) and self.alpha_pde >= 0):
            raise ValueError("alpha_pde must be finite and >= 0")
        if not (np.isfinite(self.alpha_low) and self.alpha_low >= 0):
            raise ValueError("alpha_low must be finite and >= 0")


def _t_hat(t, t_final):
    return 2.0 * np.asarray(t, dtype=float) / t_final - 1.0


@dataclass
class PinnModel:
    """Network t -> (u, v, w, s) plus the trainable log of the unknown
    parameter; time is affinely mapped to [-1, 1]."""

    net: Mlp
    log_gamma: float
    t_final: float

    def __post_init__(self):
        if self.net.arch[-1] != 4:
            raise ValueError("network must have 4 outputs")
        if self.net.arch[0] != 1:
            raise ValueError("network must take the time variable only")

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma))

    def predict(self, t: np.ndarray) -> np.ndarray:
        y, _ = mlp_forward(self.net, _t_hat(t, self.t_final)[:, None])
        return y


@dataclass
class Emulator:
    """Low-fidelity parametric map (t, gamma) -> (u, v, w, s)."""

    net: Mlp
    gamma_lo: float
    gamma_hi: float
    t_final: float
    validation_error: float
    fidelity: dict = field(default_factory=dict)

    def _check_range(self, gamma, allow_extrapolation):
        if not allow_extrapolation and np.any(
                (np.asarray(gamma) < self.gamma_lo)
                | (np.asarray(gamma) > self.gamma_hi)):
            raise ValueError(
                f"gamma outside the training range "
                f"[{self.gamma_lo}, {self.gamma_hi}]: extrapolation")

    def gamma_hat(self, gamma):
        return 2.0 * (np.asarray(gamma, dtype=float) - self.gamma_lo) \
            / (self.gamma_hi - self.gamma_lo) - 1.0

    def predict(self, t: np.ndarray, gamma: float,
                allow_extrapolation: bool = False) -> np.ndarray:
        self._check_range(gamma, allow_extrapolation)
        t = np.asarray(t, dtype=float)
        x = np.column_stack([_t_hat(t, self.t_final),
                             np.full(t.size, self.gamma_hat(gamma))])
        y, _ = mlp_forward(self.net, x)
        return y

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"net": self.net.to_json_dict(),
                       "gamma_lo": self.gamma_lo, "gamma_hi": self.gamma_hi,
                       "t_final": self.t_final,
                       "validation_error": self.validation_error,
                       "fidelity": self.fidelity}, f)

    @staticmethod
    def load(path) -> "Emulator":
        with open(path) as f:
            d = json.load(f)
        return Emulator(Mlp.from_json_dict(d["net"]), d["gamma_lo"],
                        d["gamma_hi"], d["t_final"], d["validation_error"],
                        d.get("fidelity", {}))


@dataclass
class MpinnModel:
    """High-fidelity composition u_H = u_L(t, gamma) + NN_H(t, u_L)."""

    correction: Mlp
    emulator: Emulator
    log_gamma: float
    t_final: float

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma))


@dataclass
class EstimationResult:
    gamma_hat: float
    relative_error: float | None
    loss_history: dict[str, list[float]]
    wall_time: float
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"gamma_hat": self.gamma_hat,
                       "relative_error": self.relative_error,
                       "wall_time": self.wall_time,
                       "loss_history": self.loss_history,
                       "meta": self.meta}, f)

    @staticmethod
    def load(path) -> "EstimationResult":
        with open(path) as f:
            d = json.load(f)
        return EstimationResult(d["gamma_hat"], d["relative_error"],
                                d["loss_history"], d["wall_time"],
                                d.get("meta", {}))


@dataclass
class PinnConfig:
    arch: tuple[int, ...] = (1, 32, 24, 16, 4)
    emulator_arch: tuple[int, ...] = (2, 32, 16, 8, 4)
    activation: str = "tanh"
    n_collocation: int = 400
    epochs_data_stage: int = 500
    alpha_data_stage: float = 1e-6
    epochs_full_stage: int = 10_000
    alpha_full_stage: float = 1e-3
    iters_param_stage: int = 500          # multifidelity-only 1-D search
    learning_rate: float = 1e-3
    gamma_learning_rate: float | None = None  # parameter-group rate; None = shared
    param_stage_learning_rate: float = 0.02
    gamma_range_rel: tuple[float, float] = (0.5, 1.5)
    n_bank: int = 75
    bank_sample_every: float = 10.0
    emulator_epochs: int = 8000
    t_final: float = 800.0
    dt: float = 0.1
    seed: int = 0
    clip_norm: float | None = 100.0


# ------------------------------------------------------------------ losses


def _obs_blocks(model_t_final, dataset: Dataset):
    blocks = []
    for ch_idx, name in enumerate(CHANNELS):
        t, vals = dataset.channel_block(name)
        if t.size == 0:
            raise ValueError(f"dataset has no observations for channel {name!r}")
        blocks.append((ch_idx, _t_hat(t, model_t_final)[:, None], vals))
    return blocks


def loss_obs(model: PinnModel, dataset: Dataset) -> tuple[float, GradientSet]:
    """Sum over channels of the mean-square misfit at that channel's
    observation times; gradients w.r.t. the network parameters."""
    total = 0.0
    grads = GradientSet.zeros_like(model.net)
    for ch_idx, th, vals in _obs_blocks(model.t_final, dataset):
        y, cache = mlp_forward(model.net, th)
        resid = y[:, ch_idx] - vals
        n = vals.size
        total += float(np.mean(resid**2))
        dLdy = np.zeros_like(y)
        dLdy[:, ch_idx] = 2.0 * resid / n
        grads.add_(mlp_backprop(model.net, cache, dLdy))
    return total, grads


def loss_phys(model: PinnModel, collocation_t: np.ndarray, params: BoParams,
              stim: Stimulus) -> tuple[float, GradientSet, float]:
    """Mean over collocation points of the summed squared residuals of all
    four model equations; gradients w.r.t. network parameters and
    log(gamma).

    The time derivative of the network output comes from the forward
    tangent; the chain factor 2/T converts it to physical time. The
    unknown parameter enters through the fast-inward current.
    """
    t = np.asarray(collocation_t, dtype=float)
    th = _t_hat(t, model.t_final)[:, None]
    n_c = t.size
    gamma = model.gamma
    p_gamma = params.replace(tau_fi=gamma)
    i_app = np.array([stim.current(tc) for tc in t])

    y, y_dot, cache = mlp_forward_dual(model.net, th, np.ones_like(th))
    du_dt = (2.0 / model.t_final) * y_dot
    rhs = bo_rhs(y, p_gamma, i_app)
    resid = du_dt - rhs
    value = float(np.mean(np.sum(resid**2, axis=1)))

    dLdr = 2.0 * resid / n_c
    jac, dfi = bo_rhs_partials(y, p_gamma)
    dLdy = -np.einsum("ck,ckj->cj", dLdr, jac)
    dLdy_dot = dLdr * (2.0 / model.t_final)
    grads, _, _ = mlp_backprop_dual(model.net, cache, dLdy, dLdy_dot)
    d_tau = -float(np.sum(dLdr * dfi))
    d_log_gamma = d_tau * gamma
    return value, grads, d_log_gamma


def _mpinn_eval(model: MpinnModel, t: np.ndarray, need_tangent: bool):
    """Dual forward through emulator + correction; returns everything the
    backward pass needs."""
    em = model.emulator
    th = _t_hat(t, model.t_final)
    ghat = float(em.gamma_hat(model.gamma))
    x_e = np.column_stack([th, np.full(t.size, ghat)])
    xd_e = np.column_stack([np.ones(t.size), np.zeros(t.size)])
    u_l, u_l_dot, cache_e = mlp_forward_dual(em.net, x_e, xd_e)
    x_c = np.column_stack([th, u_l])
    xd_c = np.column_stack([np.ones(t.size), u_l_dot])
    c, c_dot, cache_c = mlp_forward_dual(model.correction, x_c, xd_c)
    u_h = u_l + c
    du_dt = (2.0 / model.t_final) * (u_l_dot + c_dot) if need_tangent else None
    return u_h, du_dt, cache_e, cache_c


def _mpinn_backward(model: MpinnModel, cache_e, cache_c, dLdu_h, dLddu_dt):
    """Pull adjoints back through both networks.

    Returns (correction grads, d log_gamma contribution from the emulator
    input). dLddu_dt is the adjoint of the physical-time derivative.
    """
    em = model.emulator
    scale = 2.0 / model.t_final
    dLd_dot_hat = dLddu_dt * scale  # adjoint of (u_l_dot + c_dot)
    grads_c, dx_c, dxd_c = mlp_backprop_dual(
        model.correction, cache_c, dLdu_h, dLd_dot_hat)
    dLdu_l = dLdu_h + dx_c[:, 1:]
    dLdu_l_dot = dLd_dot_hat + dxd_c[:, 1:]
    _, dx_e, _ = mlp_backprop_dual(em.net, cache_e, dLdu_l, dLdu_l_dot)
    dghat = float(np.sum(dx_e[:, 1]))
    # gamma_hat = 2 (gamma - lo)/(hi - lo) - 1 and gamma = exp(log_gamma)
    d_log_gamma = dghat * 2.0 / (em.gamma_hi - em.gamma_lo) * model.gamma
    return grads_c, d_log_gamma


def mpinn_loss_obs(model: MpinnModel, dataset: Dataset
                   ) -> tuple[float, GradientSet, float]:
    total = 0.0
    grads = GradientSet.zeros_like(model.correction)
    d_log_gamma = 0.0
    for ch_idx, name in enumerate(CHANNELS):
        t, vals = dataset.channel_block(name)
        if t.size == 0:
            raise ValueError(f"dataset has no observations for channel {name!r}")
        u_h, _, cache_e, cache_c = _mpinn_eval(model, t, need_tangent=False)
        resid = u_h[:, ch_idx] - vals
        total += float(np.mean(resid**2))
        dLdu = np.zeros_like(u_h)
        dLdu[:, ch_idx] = 2.0 * resid / vals.size
        g, dlg = _mpinn_backward(model, cache_e, cache_c, dLdu,
                                 np.zeros_like(u_h))
        grads.add_(g)
        d_log_gamma += dlg
    return total, grads, d_log_gamma


def mpinn_loss_phys(model: MpinnModel, collocation_t: np.ndarray,
                    params: BoParams, stim: Stimulus
                    ) -> tuple[float, GradientSet, float]:
    t = np.asarray(collocation_t, dtype=float)
    n_c = t.size
    gamma = model.gamma
    p_gamma = params.replace(tau_fi=gamma)
    i_app = np.array([stim.current(tc) for tc in t])
    u_h, du_dt, cache_e, cache_c = _mpinn_eval(model, t, need_tangent=True)
    resid = du_dt - bo_rhs(u_h, p_gamma, i_app)
    value = float(np.mean(np.sum(resid**2, axis=1)))

    dLdr = 2.0 * resid / n_c
    jac, dfi = bo_rhs_partials(u_h, p_gamma)
    dLdu = -np.einsum("ck,ckj->cj", dLdr, jac)
    grads, d_log_gamma = _mpinn_backward(model, cache_e, cache_c, dLdu, dLdr)
    d_log_gamma += -float(np.sum(dLdr * dfi)) * gamma  # direct current term
    return value, grads, d_log_gamma


def emulator_misfit_and_ggrad(emulator: Emulator, dataset: Dataset,
                              log_gamma: float, t_final: float
                              ) -> tuple[float, float]:
    """Observation misfit of the bare emulator and its log-gamma gradient;
    used by the parameter-only search stage."""
    gamma = float(np.exp(log_gamma))
    ghat = float(emulator.gamma_hat(gamma))
    total, d_ghat = 0.0, 0.0
    for ch_idx, name in enumerate(CHANNELS):
        t, vals = dataset.channel_block(name)
        x = np.column_stack([_t_hat(t, t_final), np.full(t.size, ghat)])
        xd = np.zeros_like(x)
        xd[:, 1] = 1.0
        y, y_dg, _ = mlp_forward_dual(emulator.net, x, xd)
        resid = y[:, ch_idx] - vals
        total += float(np.mean(resid**2))
        d_ghat += float(np.sum(2.0 * resid / vals.size * y_dg[:, ch_idx]))
    d_log_gamma = d_ghat * 2.0 / (emulator.gamma_hi - emulator.gamma_lo) * gamma
    return total, d_log_gamma


# ------------------------------------------------------------------ training


def _flat_with_gamma(net: Mlp, log_gamma: float) -> np.ndarray:
    return np.concatenate([net.params_flat(), [log_gamma]])


def _train_stage(loss_fn, net: Mlp, log_gamma: float, epochs: int,
                 learning_rate: float, clip_norm, update_gamma: bool = True,
                 gamma_lr: float | None = None,
                 stage: str = "") -> tuple[float, list[float]]:
    """Full-batch Adam over (net parameters, log_gamma).

    The unknown parameter may use its own learning rate (a separate Adam
    group): with a shared rate the sign-persistent residual bias walks the
    log-parameter at the full step size every epoch.
    """
    theta_net = net.params_flat()
    lg = float(log_gamma)
    state_net = OptState("adam", clip_norm=clip_norm)
    state_g = OptState("adam")
    sched_net = Schedule("constant", eta0=learning_rate)
    sched_g = Schedule("constant",
                       eta0=gamma_lr if gamma_lr is not None else learning_rate)
    history = []
    for _ in range(epochs):
        value, grads, d_log_gamma = loss_fn(net, lg)
        if not np.isfinite(value):
            raise FloatingPointError(f"loss diverged during stage {stage!r}")
        theta_net = step(state_net, theta_net, grads.flat(), sched_net)
        net.set_params_flat(theta_net)
        if update_gamma:
            lg = float(step(state_g, np.array([lg]),
                            np.array([d_log_gamma]), sched_g)[0])
        history.append(value)
    return lg, history


def initial_log_gamma(cfg: PinnConfig, true_gamma: float) -> float:
    lo, hi = (r * true_gamma for r in cfg.gamma_range_rel)
    rng = np.random.default_rng(child_seed_seq(cfg.seed, "sampler"))
    return float(np.log(rng.uniform(lo, hi)))


def pinn_estimate(dataset: Dataset, params: BoParams, stim: Stimulus,
                  cfg: PinnConfig, true_gamma: float | None = None
                  ) -> tuple[EstimationResult, PinnModel]:
    """Two-stage training: data fit with a tiny residual weight, then the
    full physics-weighted loss."""
    t0 = time.perf_counter()
    init_seed = int(child_seed_seq(cfg.seed, "init").generate_state(1)[0])
    net = mlp_init(list(cfg.arch), cfg.activation, output_linear=True,
                   seed=init_seed)
    ref_gamma = true_gamma if true_gamma is not None else params.tau_fi
    log_gamma = initial_log_gamma(cfg, ref_gamma)
    colloc = np.linspace(0.0, cfg.t_final, cfg.n_collocation)
    model = PinnModel(net, log_gamma, cfg.t_final)

    def stage_loss(alpha):
        def fn(net_, lg):
            model.log_gamma = lg
            v_obs, g_obs = loss_obs(model, dataset)
            v_phys, g_phys, d_lg = loss_phys(model, colloc, params, stim)
            g_obs.add_(g_phys.scaled(alpha))
            return v_obs + alpha * v_phys, g_obs, alpha * d_lg
        return fn

    history = {}
    log_gamma, history["stage1"] = _train_stage(
        stage_loss(cfg.alpha_data_stage), net, log_gamma,
        cfg.epochs_data_stage, cfg.learning_rate, cfg.clip_norm,
        gamma_lr=cfg.gamma_learning_rate, stage="stage1")
    log_gamma, history["stage2"] = _train_stage(
        stage_loss(cfg.alpha_full_stage), net, log_gamma,
        cfg.epochs_full_stage, cfg.learning_rate, cfg.clip_norm,
        gamma_lr=cfg.gamma_learning_rate, stage="stage2")
    model.log_gamma = log_gamma

    gamma_hat = model.gamma
    rel = abs(gamma_hat - true_gamma) / true_gamma if true_gamma else None
    result = EstimationResult(
        gamma_hat, rel, history, time.perf_counter() - t0,
        meta={"method": "pinn", "seed": cfg.seed,
              "sigma": (dataset.noise or {}).get("sigma", 0.0)})
    return result, model


def train_lowfi(gammas: np.ndarray, params: BoParams, stim: Stimulus,
                cfg: PinnConfig) -> Emulator:
    """Fit the parametric low-fidelity map on a bank of solver runs.

    The bank solves run in lockstep at the solver step, subsampled on the
    emulator's coarse time grid; a handful of interior parameter values
    are solved separately for validation.
    """
    gammas = np.asarray(gammas, dtype=float)
    if np.unique(gammas).size < 2:
        raise ValueError("gamma range degenerate: need >= 2 distinct values")
    lo, hi = float(gammas.min()), float(gammas.max())
    times, states = bo_solve_bank(params, gammas, stim, cfg.dt, cfg.t_final,
                                  sample_every=cfg.bank_sample_every)
    th = _t_hat(times, cfg.t_final)
    ghat = 2.0 * (gammas - lo) / (hi - lo) - 1.0
    tt, gg = np.meshgrid(th, ghat, indexing="ij")
    x = np.column_stack([tt.ravel(), gg.ravel()])
    y = states.reshape(-1, 4)

    init_seed = int(child_seed_seq(cfg.seed, "init").generate_state(2)[1])
    net = mlp_init(list(cfg.emulator_arch), cfg.activation, seed=init_seed)
    theta = net.params_flat()
    state = OptState("adam", clip_norm=cfg.clip_norm)
    sched = Schedule("constant", eta0=cfg.learning_rate)
    n = y.shape[0]
    for _ in range(cfg.emulator_epochs):
        pred, cache = mlp_forward(net, x)
        resid = pred - y
        grads = mlp_backprop(net, cache, 2.0 * resid / n)
        theta = step(state, theta, grads.flat(), sched)
        net.set_params_flat(theta)

    # held-out validation at interior parameter values
    val_gammas = np.linspace(lo, hi, 9)[1:-1:2]
    _, val_states = bo_solve_bank(params, val_gammas, stim, cfg.dt,
                                  cfg.t_final, sample_every=cfg.bank_sample_every)
    emulator = Emulator(net, lo, hi, cfg.t_final, 0.0,
                        fidelity={"n_bank": int(gammas.size),
                                  "sample_every": cfg.bank_sample_every,
                                  "dt": cfg.dt})
    errs = []
    for j, g in enumerate(val_gammas):
        pred = emulator.predict(times, g)
        errs.append(np.sqrt(np.mean((pred - val_states[:, j, :])**2)))
    emulator.validation_error = float(np.mean(errs))
    return emulator


def mpinn_estimate(dataset: Dataset, emulator: Emulator, params: BoParams,
                   stim: Stimulus, cfg: PinnConfig,
                   true_gamma: float | None = None
                   ) -> tuple[EstimationResult, MpinnModel]:
    """Three-stage multifidelity training: correction-net data fit, then a
    parameter-only search through the frozen emulator, then the full loss."""
    t0 = time.perf_counter()
    init_seed = int(child_seed_seq(cfg.seed, "init").generate_state(1)[0])
    corr_arch = (1 + 4,) + tuple(cfg.arch[1:-1]) + (4,)
    correction = mlp_init(list(corr_arch), cfg.activation, seed=init_seed)
    ref_gamma = true_gamma if true_gamma is not None else params.tau_fi
    log_gamma = initial_log_gamma(cfg, ref_gamma)
    colloc = np.linspace(0.0, cfg.t_final, cfg.n_collocation)
    model = MpinnModel(correction, emulator, log_gamma, cfg.t_final)

    def stage_loss(alpha, update_gamma):
        def fn(net_, lg):
            model.log_gamma = lg
            v_obs, g_obs, d_lg_obs = mpinn_loss_obs(model, dataset)
            v_phys, g_phys, d_lg_phys = mpinn_loss_phys(model, colloc,
                                                        params, stim)
            g_obs.add_(g_phys.scaled(alpha))
            d_lg = d_lg_obs + alpha * d_lg_phys if update_gamma else 0.0
            return v_obs + alpha * v_phys, g_obs, d_lg
        return fn

    history = {}
    # stage 1: fit the correction net, parameter frozen
    log_gamma, history["stage1"] = _train_stage(
        stage_loss(cfg.alpha_data_stage, update_gamma=False), correction,
        log_gamma, cfg.epochs_data_stage, cfg.learning_rate, cfg.clip_norm,
        update_gamma=False, stage="stage1")

    # stage 2: 1-D search over the parameter through the frozen emulator
    state = OptState("adam")
    sched = Schedule("constant", eta0=cfg.param_stage_learning_rate)
    theta = np.array([log_gamma])
    hist2 = []
    for _ in range(cfg.iters_param_stage):
        value, d_lg = emulator_misfit_and_ggrad(emulator, dataset, theta[0],
                                                cfg.t_final)
        if not np.isfinite(value):
            raise FloatingPointError("loss diverged during stage 'stage2'")
        theta = step(state, theta, np.array([d_lg]), sched)
        hist2.append(value)
    log_gamma = float(theta[0])
    history["stage2"] = hist2

    # stage 3: full multifidelity loss over (correction, parameter)
    log_gamma, history["stage3"] = _train_stage(
        stage_loss(cfg.alpha_full_stage, update_gamma=True), correction,
        log_gamma, cfg.epochs_full_stage, cfg.learning_rate, cfg.clip_norm,
        gamma_lr=cfg.gamma_learning_rate, stage="stage3")
    model.log_gamma = log_gamma

    gamma_hat = model.gamma
    rel = abs(gamma_hat - true_gamma) / true_gamma if true_gamma else None
    result = EstimationResult(
        gamma_hat, rel, history, time.perf_counter() - t0,
        meta={"method": "mpinn", "seed": cfg.seed,
              "sigma": (dataset.noise or {}).get("sigma", 0.0),
              "emulator_validation_error": emulator.validation_error})
    return result, model


def mpinn_predict(model: MpinnModel, t: np.ndarray) -> np.ndarray:
    u_h, _, _, _ = _mpinn_eval(model, np.asarray(t, dtype=float),
                               need_tangent=False)
    return u_h
