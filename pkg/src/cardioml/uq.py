"""Variance-based global sensitivity analysis (Saltelli sampling with
Jansen estimators) and Bayesian calibration via random-walk
Metropolis-Hastings with a surrogate-error-aware Gaussian likelihood.

The posterior is explored through density ratios only; the normalization
constant is never computed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc


@dataclass
class ParamSpace:
    """Box-bounded parameters with independent uniform priors."""

    names: list[str]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if not (len(self.names) == self.lower.size == self.upper.size):
            raise ValueError("names/bounds length mismatch")
        if np.any(self.lower >= self.upper):
            raise ValueError("need lower < upper for every parameter")

    @property
    def dim(self) -> int:
        return len(self.names)

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p >= self.lower) and np.all(p <= self.upper))

    def scale(self, unit: np.ndarray) -> np.ndarray:
        return self.lower + unit * (self.upper - self.lower)


@dataclass
class SaltelliDesign:
    """The A / B / A_B^(i) evaluation matrices of the Saltelli scheme."""

    A: np.ndarray                  # (N, P)
    B: np.ndarray                  # (N, P)
    AB: list[np.ndarray]           # P matrices, column i of A swapped with B

    @property
    def n_evaluations(self) -> int:
        return self.A.shape[0] * (self.A.shape[1] + 2)


def saltelli_sample(space: ParamSpace, n: int, seed: int = 0,
                    method: str = "sobol") -> SaltelliDesign:
    """Quasi-random Saltelli design mapped to the parameter bounds.

    A scrambled low-discrepancy sequence in 2P dimensions supplies the
    (A, B) pair; A_B^(i) replaces column i of A with B's column i. The
    total model evaluations are N * (P + 2). A non-power-of-two N is
    allowed but warned about (sequence balance is lost). `method` can be
    "lhs" to fall back to stratified Latin hypercube sampling.
    """
    p = space.dim
    if n < 1:
        raise ValueError("need at least one sample")
    if n & (n - 1) != 0:
        warnings.warn("base sample count is not a power of two; the "
                      "low-discrepancy balance is degraded", stacklevel=2)
    if method == "sobol":
        eng = qmc.Sobol(d=2 * p, scramble=True,
                        seed=np.random.default_rng(np.random.SeedSequence(seed)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            unit = eng.random(n)
    elif method == "lhs":
        eng = qmc.LatinHypercube(
            d=2 * p, seed=np.random.default_rng(np.random.SeedSequence(seed)))
        unit = eng.random(n)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    A = space.scale(unit[:, :p])
    B = space.scale(unit[:, p:])
    AB = []
    for i in range(p):
        m = A.copy()
        m[:, i] = B[:, i]
        AB.append(m)
    return SaltelliDesign(A, B, AB)


@dataclass
class SobolEstimate:
    """First-order and total-effect indices per (parameter, QoI), with
    bootstrap confidence half-widths."""

    s1: np.ndarray            # (P, Q)
    st: np.ndarray            # (P, Q)
    s1_halfwidth: np.ndarray
    st_halfwidth: np.ndarray
    n: int
    defined: np.ndarray       # (Q,) False where the QoI variance vanishes

    def as_dict(self, space: ParamSpace, qoi_names: list[str]) -> dict:
        return {
            "n": self.n,
            "parameters": space.names,
            "qois": qoi_names,
            "S1": self.s1.tolist(),
            "ST": self.st.tolist(),
            "S1_halfwidth": self.s1_halfwidth.tolist(),
            "ST_halfwidth": self.st_halfwidth.tolist(),
            "defined": self.defined.tolist(),
        }


def _jansen(f_a, f_b, f_ab):
    # variance normalization overloaded from the pooled A and B evaluations
    pooled = np.concatenate([f_a, f_b], axis=0)
    var = pooled.var(axis=0)
    n = f_a.shape[0]
    p = len(f_ab)
    q = f_a.shape[1]
    s1 = np.empty((p, q))
    st = np.empty((p, q))
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(p):
            s1[i] = 1.0 - np.mean((f_b - f_ab[i]) ** 2, axis=0) / (2.0 * var)
            st[i] = np.mean((f_a - f_ab[i]) ** 2, axis=0) / (2.0 * var)
    return s1, st, var


def sobol_indices(f_a: np.ndarray, f_b: np.ndarray, f_ab: list[np.ndarray],
                  n_bootstrap: int = 200, seed: int = 0) -> SobolEstimate:
    """Jansen-form estimators of the first-order and total-effect indices.

    S1_i = 1 - E[(f(B) - f(A_B^i))^2] / (2 Var),
    ST_i =     E[(f(A) - f(A_B^i))^2] / (2 Var),
    with Var taken over the pooled A and B evaluations. QoIs with zero
    total variance are reported as undefined.
    """
    f_a = np.atleast_2d(np.asarray(f_a, dtype=float).T).T
    f_b = np.atleast_2d(np.asarray(f_b, dtype=float).T).T
    f_ab = [np.atleast_2d(np.asarray(m, dtype=float).T).T for m in f_ab]
    if f_a.shape != f_b.shape or any(m.shape != f_a.shape for m in f_ab):
        raise ValueError("inconsistent evaluation shapes")
    n = f_a.shape[0]
    s1, st, var = _jansen(f_a, f_b, f_ab)
    defined = var > 0
    s1[:, ~defined] = np.nan
    st[:, ~defined] = np.nan

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    boots_s1 = np.empty((n_bootstrap,) + s1.shape)
    boots_st = np.empty_like(boots_s1)
    for b in range(n_bootstrap):
        idx = rng.integers(0, n, size=n)
        bs1, bst, _ = _jansen(f_a[idx], f_b[idx], [m[idx] for m in f_ab])
        boots_s1[b] = bs1
        boots_st[b] = bst
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        hw1 = np.nanpercentile(boots_s1, 97.5, axis=0) \
            - np.nanpercentile(boots_s1, 2.5, axis=0)
        hwt = np.nanpercentile(boots_st, 97.5, axis=0) \
            - np.nanpercentile(boots_st, 2.5, axis=0)
    return SobolEstimate(s1, st, hw1 / 2.0, hwt / 2.0, n, defined)


def run_saltelli(space: ParamSpace, qoi_map, n: int, seed: int = 0,
                 method: str = "sobol", n_bootstrap: int = 200) -> SobolEstimate:
    """Convenience wrapper: design, evaluate (fixed order), estimate."""
    design = saltelli_sample(space, n, seed, method)
    f_a = np.array([np.atleast_1d(qoi_map(p)) for p in design.A], dtype=float)
    f_b = np.array([np.atleast_1d(qoi_map(p)) for p in design.B], dtype=float)
    f_ab = [np.array([np.atleast_1d(qoi_map(p)) for p in m], dtype=float)
            for m in design.AB]
    return sobol_indices(f_a, f_b, f_ab, n_bootstrap=n_bootstrap, seed=seed)


# ------------------------------------------------------------------ MCMC


@dataclass
class NoiseModel:
    """Total observation covariance: experimental + surrogate-error parts."""

    sigma_exp: np.ndarray
    sigma_rom: np.ndarray

    def __post_init__(self):
        self.sigma_exp = np.atleast_2d(np.asarray(self.sigma_exp, dtype=float))
        self.sigma_rom = np.atleast_2d(np.asarray(self.sigma_rom, dtype=float))
        if self.sigma_exp.shape != self.sigma_rom.shape:
            raise ValueError("covariance shapes differ")
        for name, mat in (("sigma_exp", self.sigma_exp),
                          ("sigma_rom", self.sigma_rom)):
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} is not symmetric")
            if np.any(np.linalg.eigvalsh(mat) < -1e-10):
                raise ValueError(f"{name} is not positive semi-definite")

    @property
    def total(self) -> np.ndarray:
        return self.sigma_exp + self.sigma_rom


def rom_error_cov(q_fom: np.ndarray, q_rom: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance of the surrogate residuals q_fom - q_rom."""
    q_fom = np.atleast_2d(np.asarray(q_fom, dtype=float).T).T
    q_rom = np.atleast_2d(np.asarray(q_rom, dtype=float).T).T
    if q_fom.shape != q_rom.shape:
        raise ValueError("validation pair shapes differ")
    if q_fom.shape[0] < 2:
        raise ValueError("need at least 2 validation pairs")
    res = q_fom - q_rom
    centered = res - res.mean(axis=0)
    return centered.T @ centered / (res.shape[0] - 1)


@dataclass
class Chain:
    """Posterior samples with diagnostics."""

    samples: np.ndarray          # (n, P) post burn-in
    log_posterior: np.ndarray
    acceptance_rate: float
    burn_in: int
    seed: int
    proposal_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError("acceptance rate outside [0, 1]")


def _chol_loglike_factory(q_obs: np.ndarray, cov: np.ndarray):
    """Gaussian log-density q |-> log N(q_obs | q, cov) via Cholesky."""
    from scipy.linalg import LinAlgError, cho_factor, cho_solve
    try:
        factor = cho_factor(cov)
    except LinAlgError as exc:
        raise ValueError("total covariance is singular") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    k = q_obs.size
    const = -0.5 * (k * np.log(2 * np.pi) + logdet)

    def loglike(q_pred: np.ndarray) -> float:
        r = q_obs - q_pred
        return const - 0.5 * float(r @ cho_solve(factor, r))

    return loglike


def mh_chain(log_target, x0: np.ndarray, n_samples: int, seed: int,
             proposal_scale: np.ndarray, burn_in_frac: float = 0.2,
             adapt: bool = True, target_acceptance: float = 0.23) -> Chain:
    """Gaussian random-walk Metropolis-Hastings on an arbitrary log-density.

    The proposal scale adapts during burn-in toward the target acceptance
    rate and is frozen afterwards. `log_target` may return -inf to reject
    (e.g. outside the prior support).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = np.array(x0, dtype=float)
    dim = x.size
    scale = np.array(proposal_scale, dtype=float) * np.ones(dim)
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise ValueError("initial point has zero posterior density")
    burn = int(round(burn_in_frac * n_samples))
    total = n_samples + burn
    samples = np.empty((n_samples, dim))
    logps = np.empty(n_samples)
    accepted_main = 0
    window_accepts, window_len = 0, 0
    for it in range(total):
        prop = x + scale * rng.normal(size=dim)
        lp_prop = float(log_target(prop))
        if np.log(rng.uniform()) < lp_prop - lp:
            x, lp = prop, lp_prop
            if it >= burn:
                accepted_main += 1
            window_accepts += 1
        window_len += 1
        if adapt and it < burn and window_len == 50:
            rate = window_accepts / window_len
            if rate == 0.0 and it > burn // 2:
                raise RuntimeError("zero acceptance over a full adaptation window")
            scale *= np.exp(1.5 * (rate - target_acceptance))
            window_accepts, window_len = 0, 0
        if it >= burn:
            samples[it - burn] = x
            logps[it - burn] = lp
    return Chain(samples, logps,
                 accepted_main / max(n_samples, 1), burn, seed, scale)


def mh_sample(space: ParamSpace, qoi_map, q_obs: np.ndarray,
              noise: NoiseModel, n_samples: int = 10_000,
              proposal_scale: float | np.ndarray = 0.1, seed: int = 0,
              x0: np.ndarray | None = None) -> Chain:
    """Posterior sampling for q_obs = F(p) + eps, eps ~ N(0, Sigma) with
    Sigma = Sigma_exp + Sigma_rom, under the uniform box prior."""
    q_obs = np.atleast_1d(np.asarray(q_obs, dtype=float))
    if not np.all(np.isfinite(q_obs)):
        raise ValueError("observed QoIs must be finite")
    loglike = _chol_loglike_factory(q_obs, noise.total)

    def log_target(p):
        if not space.contains(p):
            return -np.inf
        return loglike(np.atleast_1d(qoi_map(p)))

    if x0 is None:
        x0 = 0.5 * (space.lower + space.upper)
    scale = np.asarray(proposal_scale, dtype=float) * (space.upper - space.lower)
    return mh_chain(log_target, x0, n_samples, seed, scale)


@dataclass
class CredibleRegion:
    """Highest-density region built from histogram cells."""

    level: float
    mass: float
    interval: tuple[float, float] | None      # 1D span of selected cells
    cells: np.ndarray | None                  # selected cell centers (any dim)
    cell_mass: float                          # mass of one heaviest cell

    def contains(self, p) -> bool:
        if self.interval is not None:
            return self.interval[0] <= float(np.asarray(p).ravel()[0]) <= self.interval[1]
        raise NotImplementedError("containment test only for 1D regions")


def credible_region(chain: Chain, level: float = 0.90,
                    bins: int = 100) -> CredibleRegion:
    """Smallest set of histogram cells whose posterior mass reaches `level`.

    1D chains produce an HPD interval spanning the selected cells; 2D
    chains return the selected grid-cell centers.
    """
    if not 0 < level <= 1.0:
        raise ValueError("level must be in (0, 1]")
    samples = chain.samples
    if samples.shape[0] < 1000:
        raise ValueError("chain too short for a credible region")
    dim = samples.shape[1]
    if dim == 1:
        hist, edges = np.histogram(samples[:, 0], bins=bins)
        order = np.argsort(hist)[::-1]
        mass = np.cumsum(hist[order]) / samples.shape[0]
        take = order[: int(np.searchsorted(mass, level) + 1)]
        lo = edges[take.min()]
        hi = edges[take.max() + 1]
        return CredibleRegion(level, float(mass[take.size - 1]),
                              (float(lo), float(hi)), None,
                              float(hist[order[0]] / samples.shape[0]))
    if dim == 2:
        hist, xe, ye = np.histogram2d(samples[:, 0], samples[:, 1], bins=bins)
        flat = hist.ravel()
        order = np.argsort(flat)[::-1]
        mass = np.cumsum(flat[order]) / samples.shape[0]
        take = order[: int(np.searchsorted(mass, level) + 1)]
        xi, yi = np.unravel_index(take, hist.shape)
        centers = np.column_stack([(xe[xi] + xe[xi + 1]) / 2,
                                   (ye[yi] + ye[yi + 1]) / 2])
        return CredibleRegion(level, float(mass[take.size - 1]), None,
                              centers, float(flat[order[0]] / samples.shape[0]))
    raise ValueError("credible regions implemented for 1D and 2D chains")
