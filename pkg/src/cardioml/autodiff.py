"""Dense-network engine: forward evaluation, reverse-mode gradients, and
forward-over-reverse tangents.

Everything here is plain numpy in 64-bit. Networks are compositions of
affine maps and an elementwise activation; that is all the rest of the
package needs, so there is no general computation-graph tape. Second
derivatives (needed by residual losses that involve d(output)/d(input))
are obtained by pushing dual numbers through the forward pass and then
running backpropagation on the dual values.

Conventions:
  * weight matrices have shape (n_out, n_in), biases (n_out,)
  * inputs may be a single vector (d,) or a batch (n, d)
  * batched backprop returns gradients *summed* over the batch
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("sigmoid", "tanh", "relu")


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def _act_prime(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # `a` is the already-computed activation value at z.
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "relu":
        # subgradient at 0 defined as 0
        return np.where(z > 0.0, 1.0, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def _act_second(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return -2.0 * a * (1.0 - a * a)
    if kind == "sigmoid":
        return a * (1.0 - a) * (1.0 - 2.0 * a)
    if kind == "relu":
        return np.zeros_like(z)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Mlp:
    """Layered dense network: weights, biases, hidden activation.

    When ``output_linear`` is True (the default) no activation is applied
    after the last affine map; setting it False applies the hidden
    activation on the output layer as well.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    output_linear: bool = True

    def __post_init__(self):
        if len(self.weights) == 0:
            raise ValueError("network must have at least one layer")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases length mismatch")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: bad shapes {W.shape} / {b.shape}")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: dimension chain broken")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def arch(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params_flat(self) -> np.ndarray:
        """All parameters as one flat vector (layer order: W then b)."""
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params_flat(self, theta: np.ndarray) -> None:
        if theta.shape != (self.n_params,):
            raise ValueError("flat parameter vector has wrong length")
        k = 0
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[k:k + W.size].reshape(W.shape).copy()
            k += W.size
            self.biases[i] = theta[k:k + b.size].copy()
            k += b.size

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights],
                   [b.copy() for b in self.biases],
                   self.activation, self.output_linear)

    def to_json_dict(self) -> dict:
        return {
            "arch": self.arch,
            "activation": self.activation,
            "output_linear": self.output_linear,
            "layers": [
                {"W": [float(v) for v in W.ravel()], "b": [float(v) for v in b]}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Mlp":
        arch = d["arch"]
        weights, biases = [], []
        for ell, layer in enumerate(d["layers"]):
            W = np.array(layer["W"], dtype=float).reshape(arch[ell + 1], arch[ell])
            b = np.array(layer["b"], dtype=float)
            weights.append(W)
            biases.append(b)
        return Mlp(weights, biases, d["activation"], d["output_linear"])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f)

    @staticmethod
    def load(path) -> "Mlp":
        with open(path) as f:
            return Mlp.from_json_dict(json.load(f))


@dataclass
class ForwardCache:
    """Per-layer weighted inputs z and activations a (a[0] is the input)."""

    zs: list[np.ndarray]
    activations: list[np.ndarray]  # length n_layers + 1


@dataclass
class DualCache:
    """Forward cache plus the tangents of every z and a."""

    zs: list[np.ndarray]
    z_dots: list[np.ndarray]
    activations: list[np.ndarray]
    a_dots: list[np.ndarray]


@dataclass
class GradientSet:
    """Per-layer loss gradients, shape-congruent with the Mlp."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        parts = []
        for dW, db in zip(self.d_weights, self.d_biases):
            parts.append(dW.ravel())
            parts.append(db)
        return np.concatenate(parts)

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet([c * dW for dW in self.d_weights],
                           [c * db for db in self.d_biases])

    def add_(self, other: "GradientSet") -> "GradientSet":
        for i in range(len(self.d_weights)):
            self.d_weights[i] += other.d_weights[i]
            self.d_biases[i] += other.d_biases[i]
        return self

    @staticmethod
    def zeros_like(mlp: Mlp) -> "GradientSet":
        return GradientSet([np.zeros_like(W) for W in mlp.weights],
                           [np.zeros_like(b) for b in mlp.biases])


@dataclass
class TangentPair:
    """Network output together with its directional derivative."""

    value: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if np.shape(self.value) != np.shape(self.tangent):
            raise ValueError("value/tangent length mismatch")


def mlp_init(arch: list[int], activation: str = "tanh",
             output_linear: bool = True, seed: int = 0) -> Mlp:
    """Glorot-style initialization: zero-mean normal weights with variance
    2/(fan_in + fan_out), zero biases. Deterministic for a fixed seed."""
    if len(arch) < 2:
        raise ValueError("architecture needs an input and at least one layer")
    if any(n < 1 for n in arch):
        raise ValueError("zero-sized layer")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights, biases = [], []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        std = np.sqrt(2.0 / (n_in + n_out))
        weights.append(rng.normal(0.0, std, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Mlp(weights, biases, activation, output_linear)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError("input must be a vector or a (batch, dim) matrix")


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network, returning the output and the full cache."""
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != mlp.arch[0]:
        raise ValueError(f"input width {xb.shape[1]} != {mlp.arch[0]}")
    a = xb
    zs, acts = [], [a]
    L = mlp.n_layers
    for ell, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ W.T + b
        last = ell == L - 1
        a = z if (last and mlp.output_linear) else _act(mlp.activation, z)
        zs.append(z)
        acts.append(a)
    y = a[0] if squeeze else a
    if squeeze:
        zs = [z[0] for z in zs]
        acts = [v[0] for v in acts]
    return y, ForwardCache(zs, acts)


def mlp_backprop(mlp: Mlp, cache: ForwardCache, dLdy: np.ndarray) -> GradientSet:
    """Reverse sweep: from dL/dy to per-layer dL/dW and dL/db.

    The layer recursions are
        delta[L]   = sigma'(z[L]) * dLdy     (just dLdy if the output is linear)
        delta[ell] = sigma'(z[ell]) * (W[ell+1]^T delta[ell+1])
        dL/db_j    = delta_j,   dL/dw_jk = delta_j * a_k[ell-1]
    For batched caches the parameter gradients are summed over the batch.
    """
    L = mlp.n_layers
    if len(cache.zs) != L or len(cache.activations) != L + 1:
        raise ValueError("cache does not match network depth")
    delta, _ = _as_batch(dLdy)
    zs = [np.atleast_2d(z) for z in cache.zs]
    acts = [np.atleast_2d(a) for a in cache.activations]
    if delta.shape[1] != mlp.arch[-1]:
        raise ValueError("dLdy width does not match the output layer")
    if delta.shape[0] != zs[-1].shape[0]:
        raise ValueError("dLdy batch size does not match the cache")
    if zs[-1].shape[1] != mlp.arch[-1]:
        raise ValueError("cache does not match network shapes")
    if not mlp.output_linear:
        delta = delta * _act_prime(mlp.activation, zs[-1], acts[-1])
    d_weights = [None] * L
    d_biases = [None] * L
    for ell in range(L - 1, -1, -1):
        d_weights[ell] = delta.T @ acts[ell]
        d_biases[ell] = delta.sum(axis=0)
        if ell > 0:
            upstream = delta @ mlp.weights[ell]
            delta = upstream * _act_prime(mlp.activation, zs[ell - 1], acts[ell])
    return GradientSet(d_weights, d_biases)


def mlp_forward_dual(mlp: Mlp, x: np.ndarray,
                     x_dot: np.ndarray) -> tuple[np.ndarray, np.ndarray, DualCache]:
    """Forward pass carrying a tangent direction alongside the values.

    Returns (y, dy/d(direction), cache). The tangent obeys
        z_dot = W a_dot,  a_dot = sigma'(z) * z_dot.
    """
    xb, squeeze = _as_batch(x)
    xd, _ = _as_batch(x_dot)
    if xb.shape != xd.shape:
        raise ValueError("x and x_dot must have the same shape")
    if xb.shape[1] != mlp.arch[0]:
        raise ValueError(f"input width {xb.shape[1]} != {mlp.arch[0]}")
    a, ad = xb, xd
    zs, zds, acts, ads = [], [], [a], [ad]
    L = mlp.n_layers
    for ell, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ W.T + b
        zd = ad @ W.T
        last = ell == L - 1
        if last and mlp.output_linear:
            a, ad = z, zd
        else:
            a = _act(mlp.activation, z)
            ad = _act_prime(mlp.activation, z, a) * zd
        zs.append(z)
        zds.append(zd)
        acts.append(a)
        ads.append(ad)
    cache = DualCache(zs, zds, acts, ads)
    if squeeze:
        return a[0], ad[0], cache
    return a, ad, cache


def mlp_backprop_dual(mlp: Mlp, cache: DualCache, dLdy: np.ndarray,
                      dLdy_dot: np.ndarray) -> tuple[GradientSet, np.ndarray, np.ndarray]:
    """Backpropagate a loss that depends on both the output y and its
    tangent y_dot through a dual forward pass.

    Returns (parameter gradients, dL/dx, dL/dx_dot). The reverse recursion
    carries the pair (p, q) = (dL/dz, dL/dz_dot):
        p = sigma'(z) * dL/da + sigma''(z) * z_dot * dL/da_dot
        q = sigma'(z) * dL/da_dot
        dL/dW += p a_prev^T + q a_dot_prev^T,  dL/db += p
    which is exact for second derivatives of the form d(dy/dx_d)/dparams.
    """
    L = mlp.n_layers
    lam, single = _as_batch(dLdy)   # dL/da at the output
    mu, _ = _as_batch(dLdy_dot)     # dL/da_dot at the output
    zs = [np.atleast_2d(z) for z in cache.zs]
    zds = [np.atleast_2d(z) for z in cache.z_dots]
    acts = [np.atleast_2d(a) for a in cache.activations]
    ads = [np.atleast_2d(a) for a in cache.a_dots]
    if lam.shape != mu.shape or lam.shape[1] != mlp.arch[-1]:
        raise ValueError("adjoint widths do not match the output layer")
    if lam.shape[0] != zs[-1].shape[0]:
        raise ValueError("adjoint batch size does not match the cache")
    d_weights = [None] * L
    d_biases = [None] * L
    for ell in range(L - 1, -1, -1):
        last = ell == L - 1
        if last and mlp.output_linear:
            p, q = lam, mu
        else:
            sp = _act_prime(mlp.activation, zs[ell], acts[ell + 1])
            spp = _act_second(mlp.activation, zs[ell], acts[ell + 1])
            p = sp * lam + spp * zds[ell] * mu
            q = sp * mu
        d_weights[ell] = p.T @ acts[ell] + q.T @ ads[ell]
        d_biases[ell] = p.sum(axis=0)
        lam = p @ mlp.weights[ell]
        mu = q @ mlp.weights[ell]
    if single:
        return GradientSet(d_weights, d_biases), lam[0], mu[0]
    return GradientSet(d_weights, d_biases), lam, mu


def mlp_time_tangent(mlp: Mlp, x: np.ndarray, direction: int
                     ) -> tuple[TangentPair, DualCache]:
    """Value and derivative of the outputs w.r.t. input component `direction`.

    The returned cache can be fed to mlp_backprop_dual to obtain
    d(dy/dx_direction)/d(W, b) (forward-over-reverse).
    """
    xb, _ = _as_batch(x)
    if not 0 <= direction < mlp.arch[0]:
        raise ValueError(f"invalid direction index {direction}")
    x_dot = np.zeros_like(np.asarray(x, dtype=float))
    if x_dot.ndim == 1:
        x_dot[direction] = 1.0
    else:
        x_dot[:, direction] = 1.0
    y, y_dot, cache = mlp_forward_dual(mlp, x, x_dot)
    return TangentPair(y, y_dot), cache


def regularization_terms(mlp: Mlp) -> tuple[float, float]:
    """(sum of squared weights, sum of |weights|); biases excluded."""
    l2 = sum(float(np.sum(W * W)) for W in mlp.weights)
    l1 = sum(float(np.sum(np.abs(W))) for W in mlp.weights)
    return l2, l1


def regularization_grad(mlp: Mlp, lam_l2: float = 0.0,
                        lam_l1: float = 0.0) -> GradientSet:
    """Gradient of lam_l2 * sum w^2 + lam_l1 * sum |w| (zero for biases)."""
    gs = GradientSet.zeros_like(mlp)
    for i, W in enumerate(mlp.weights):
        gs.d_weights[i] = 2.0 * lam_l2 * W + lam_l1 * np.sign(W)
    return gs
