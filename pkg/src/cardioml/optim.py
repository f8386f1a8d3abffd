"""Gradient-descent family: plain/stochastic/minibatch GD, momentum,
Nesterov momentum, RMSProp, Adam, plus learning-rate schedules.

Steppers act on flat numpy parameter vectors; `Mlp.params_flat()` /
`set_params_flat()` bridge to networks. Updates follow the textbook
recursions exactly, including the epsilon placement in the adaptive
methods: the denominator is eps + sqrt(accumulator), not
sqrt(accumulator + eps).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

OPTIMIZERS = ("gd", "sgd", "minibatch", "momentum", "nesterov", "rmsprop", "adam")


@dataclass
class Schedule:
    """Learning-rate schedule: constant, inverse decay beta/(gamma+k), or
    exponential decay eta0*exp(-gamma*k)."""

    kind: str = "constant"
    eta0: float = 1e-3
    beta: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_decay", "exponential_decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.eta0 <= 0 and self.kind != "inverse_decay":
            raise ValueError("eta0 must be positive")


def schedule_eta(s: Schedule, k: int) -> float:
    if k < 0:
        raise ValueError("iteration index must be >= 0")
    if s.kind == "constant":
        eta = s.eta0
    elif s.kind == "inverse_decay":
        with np.errstate(divide="ignore"):
            eta = s.beta / (s.gamma + k) if (s.gamma + k) != 0 else np.inf
    else:
        eta = s.eta0 * np.exp(-s.gamma * k)
    if not (np.isfinite(eta) and eta > 0):
        raise ValueError(f"schedule produced invalid eta at k={k}")
    return float(eta)


@dataclass
class OptState:
    """Buffers and hyperparameters for one optimizer instance.

    Typical hyperparameter values: rho=0.9, delta=1e-7 (RMSProp);
    beta1=0.9, beta2=0.999, eps=1e-8 (Adam). `clip_norm` caps the
    gradient max-norm before the update (off by default).
    """

    kind: str
    rho: float = 0.9
    delta: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    k: int = 0
    v: np.ndarray | None = None       # momentum buffer
    r: np.ndarray | None = None       # RMSProp accumulator
    m1: np.ndarray | None = None      # Adam first moment
    m2: np.ndarray | None = None      # Adam second moment
    w_prev: np.ndarray | None = None  # Nesterov history

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")

    def _ensure_buffers(self, params: np.ndarray) -> None:
        shape = params.shape
        if self.kind in ("momentum", "nesterov") and self.v is None:
            self.v = np.zeros(shape)
        if self.kind == "rmsprop" and self.r is None:
            self.r = np.zeros(shape)
        if self.kind == "adam" and self.m1 is None:
            self.m1 = np.zeros(shape)
            self.m2 = np.zeros(shape)
        if self.kind == "nesterov" and self.w_prev is None:
            self.w_prev = params.copy()


def lookahead(state: OptState, params: np.ndarray) -> np.ndarray:
    """Nesterov lookahead point w~ = w + rho*(w - w_prev).

    The caller must evaluate the gradient here and pass it to step();
    steppers stay ignorant of the loss function.
    """
    if state.kind != "nesterov":
        return params
    state._ensure_buffers(params)
    return params + state.rho * (params - state.w_prev)


def step(state: OptState, params: np.ndarray, grad: np.ndarray,
         schedule: Schedule) -> np.ndarray:
    """One optimizer update; returns the new parameters and advances state.

    For `nesterov`, `grad` must be the gradient at lookahead(state, params).
    Non-finite gradients are reported and the update refused.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError("gradient not shape-congruent with parameters")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient: update refused")
    state._ensure_buffers(params)
    if state.clip_norm is not None:
        norm = float(np.max(np.abs(grad)))
        if norm > state.clip_norm:
            grad = grad * (state.clip_norm / norm)
    eta = schedule_eta(schedule, state.k)

    if state.kind in ("gd", "sgd", "minibatch"):
        new = params - eta * grad
    elif state.kind == "momentum":
        state.v = state.rho * state.v - eta * grad
        new = params + state.v
    elif state.kind == "nesterov":
        w_tilde = params + state.rho * (params - state.w_prev)
        new = w_tilde - eta * grad
        state.w_prev = params.copy()
    elif state.kind == "rmsprop":
        state.r = state.rho * state.r + (1.0 - state.rho) * grad * grad
        new = params - (eta / (state.delta + np.sqrt(state.r))) * grad
    else:  # adam
        state.m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grad
        state.m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * grad * grad
        m1_hat = state.m1 / (1.0 - state.beta1 ** (state.k + 1))
        m2_hat = state.m2 / (1.0 - state.beta2 ** (state.k + 1))
        new = params - (eta / (state.eps + np.sqrt(m2_hat))) * m1_hat
    state.k += 1
    return new


@dataclass
class HistoryRow:
    iteration: int
    epoch: int
    loss: float
    eta: float


def epoch_sgd(dataset_size: int, loss_and_grad, params: np.ndarray,
              state: OptState, schedule: Schedule, rng: np.random.Generator,
              mode: str = "without_replacement", batch_size: int = 1,
              epoch: int = 0) -> tuple[np.ndarray, list[HistoryRow]]:
    """Run one epoch of stochastic updates over an indexed dataset.

    `loss_and_grad(indices, params)` must return (loss, grad) for the given
    sample indices. Modes:
      * "with_replacement":    dataset_size steps, one uniform index each
      * "without_replacement": a shuffled pass visiting each index once
      * "minibatch":           ceil(N / batch_size) steps, batch_size
                               uniform iid indices per step
    """
    if dataset_size < 1:
        raise ValueError("empty dataset")
    history = []

    if mode == "without_replacement":
        order = rng.permutation(dataset_size)
        batches = [np.array([i]) for i in order]
    elif mode == "with_replacement":
        batches = [rng.integers(0, dataset_size, size=1) for _ in range(dataset_size)]
    elif mode == "minibatch":
        if not 1 <= batch_size <= dataset_size:
            raise ValueError("batch size must be in [1, dataset_size]")
        n_steps = -(-dataset_size // batch_size)
        batches = [rng.integers(0, dataset_size, size=batch_size)
                   for _ in range(n_steps)]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")

    for batch in batches:
        eta = schedule_eta(schedule, state.k)
        if state.kind == "nesterov":
            loss, grad = loss_and_grad(batch, lookahead(state, params))
        else:
            loss, grad = loss_and_grad(batch, params)
        params = step(state, params, grad, schedule)
        history.append(HistoryRow(state.k, epoch, float(loss), eta))
    return params, history


def write_loss_history(path, rows: list[HistoryRow]) -> None:
    """Loss-history emission: CSV columns (iteration, epoch, loss, eta)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "epoch", "loss", "eta"])
        for r in rows:
            writer.writerow([r.iteration, r.epoch,
                             format(r.loss, ".17g"), format(r.eta, ".17g")])
