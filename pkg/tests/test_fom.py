import numpy as np
import pytest

from cardioml.fom import (
    ApConfig,
    BoParams,
    Dataset,
    Pulse,
    SpaceTimeField,
    Stimulus,
    Trajectory,
    ap1d_solve,
    ap_reaction,
    bo_rhs,
    bo_rhs_partials,
    bo_solve,
    even_indices,
    make_bo_dataset,
    pinned_params,
    pinned_stimulus,
    resting_state,
    subsample_field,
)

P = pinned_params()


# ---------------------------------------------------------------- cell rhs


def test_rest_state_u_v_w_derivatives_vanish():
    # with u = u_o both fast currents are gated off and i_so = 0
    rhs = bo_rhs(np.array([P.u_o, 1.0, 1.0, 0.0]), P)
    assert rhs[0] == 0.0
    assert rhs[1] == 0.0
    assert rhs[2] == 0.0


def test_full_resting_state_is_exact_equilibrium():
    rhs = bo_rhs(resting_state(P), P)
    assert np.all(rhs == 0.0)


def test_s_equation_balance_point():
    # at u = u_s the tanh vanishes, so s = 1/2 is stationary for the gate
    state = np.array([P.u_s, 0.3, 0.3, 0.5])
    rhs = bo_rhs(state, P)
    assert rhs[3] == pytest.approx(0.0, abs=1e-15)


def test_slow_inward_current_sign():
    # just above theta_w with w = s = 1 the slow inward current equals
    # -1/tau_si and therefore adds +1/tau_si to du/dt
    u = P.theta_w + 1e-6
    with_si = bo_rhs(np.array([u, 0.0, 1.0, 1.0]), P)[0]
    without = bo_rhs(np.array([u, 0.0, 1.0, 0.0]), P)[0]
    assert with_si - without == pytest.approx(1.0 / P.tau_si, rel=1e-12)


def test_rhs_partials_match_finite_differences():
    rng = np.random.default_rng(0)
    # stay away from the Heaviside thresholds so FD is valid
    states = []
    while len(states) < 20:
        st = rng.uniform([0.0, 0.0, 0.0, 0.0], [1.4, 1.0, 1.0, 1.0])
        margins = [abs(st[0] - th) for th in
                   (P.theta_v, P.theta_w, P.theta_o, P.theta_v_minus)]
        if min(margins) > 1e-3:
            states.append(st)
    h = 1e-7
    for st in states:
        jac, dfi = bo_rhs_partials(st, P)
        for j in range(4):
            dp, dm = st.copy(), st.copy()
            dp[j] += h
            dm[j] -= h
            fd = (bo_rhs(dp, P) - bo_rhs(dm, P)) / (2 * h)
            assert np.max(np.abs(jac[:, j] - fd)) < 1e-5 * max(1.0, np.max(np.abs(fd)))
        fd_fi = (bo_rhs(st, P.replace(tau_fi=P.tau_fi + h))
                 - bo_rhs(st, P.replace(tau_fi=P.tau_fi - h))) / (2 * h)
        assert np.max(np.abs(dfi - fd_fi)) < 1e-4 * max(1.0, np.max(np.abs(fd_fi)))


# ---------------------------------------------------------------- cell solve


def test_zero_stimulus_trajectory_constant():
    traj = bo_solve(P, Stimulus([]), dt=0.1, t_final=50.0)
    assert np.max(np.abs(traj.states - resting_state(P))) == 0.0


def test_stimulated_solve_produces_action_potential():
    stim = pinned_stimulus()
    traj = bo_solve(P, stim, dt=0.1, t_final=800.0)
    ref = bo_solve(P, stim, dt=0.01, t_final=800.0)
    for tr in (traj, ref):
        u = tr.channel("u")
        # depolarizes past theta_w within the stimulus window ...
        window = tr.times <= stim.pulses[0].start + stim.pulses[0].duration
        assert np.max(u[window]) > P.theta_w
        # ... and repolarizes below theta_v before the end
        assert u[-1] < P.theta_v
        assert np.max(u) > 1.0
    # the coarse solve tracks the dt/10 reference; the band is loose because
    # the upstroke is marginally resolved at the working step size
    shared = np.isin(ref.times.round(6), traj.times.round(6))
    assert np.max(np.abs(ref.states[shared] - traj.states)) < 0.35


def test_gating_bounds_along_physiological_solve():
    traj = bo_solve(P, pinned_stimulus(), dt=0.1, t_final=800.0)
    gates = traj.states[:, 1:]
    assert gates.min() >= -0.05 and gates.max() <= 1.05


def test_cell_solver_first_order_richardson():
    # Richardson on a switch-free segment (no Heaviside crossing in [0, 2]):
    # exposes the integrator's own order, uncontaminated by the
    # crossing-time quantization of the discontinuous right-hand side.
    y0 = np.array([0.5, 0.6, 0.7, 0.3])
    finals = []
    for dt in (0.02, 0.01, 0.005):
        finals.append(bo_solve(P, Stimulus([]), dt=dt, t_final=2.0,
                               initial=y0).states[-1])
    num = np.linalg.norm(finals[0] - finals[1])
    den = np.linalg.norm(finals[1] - finals[2])
    assert 1.8 < num / den < 2.2


def test_cell_solver_error_decreases_on_full_action_potential():
    # across the Heaviside switches the clean ratio is lost, but halving dt
    # must still shrink the error vs a fine reference
    stim = pinned_stimulus()
    ref = bo_solve(P, stim, dt=0.00625, t_final=100.0).states[-1]
    errs = [np.linalg.norm(bo_solve(P, stim, dt=dt, t_final=100.0).states[-1] - ref)
            for dt in (0.1, 0.05, 0.025)]
    assert errs[0] > errs[1] > errs[2]


def test_divergence_guard():
    bad = P.replace(tau_fi=1e-6)  # absurdly fast inward current
    with pytest.raises(FloatingPointError):
        bo_solve(bad, pinned_stimulus(), dt=0.5, t_final=100.0)


def test_t_final_must_be_multiple_of_dt():
    with pytest.raises(ValueError):
        bo_solve(P, Stimulus([]), dt=0.3, t_final=100.0)


# ---------------------------------------------------------------- datasets


@pytest.fixture(scope="module")
def traj800():
    return bo_solve(P, pinned_stimulus(), dt=0.1, t_final=800.0)


def test_dataset_counts(traj800):
    ds = make_bo_dataset(traj800, sigma=0.0)
    t_u, _ = ds.channel_block("u")
    assert t_u.size == 33  # t = 0, 25, ..., 800
    for c in ("v", "w", "s"):
        t_g, _ = ds.channel_block(c)
        assert t_g.size == 3  # t = 0, 300, 600
        assert np.allclose(t_g, [0.0, 300.0, 600.0])


def test_dataset_sigma_zero_exact(traj800):
    ds = make_bo_dataset(traj800, sigma=0.0)
    t_u, u_obs = ds.channel_block("u")
    exact = traj800.at_times(t_u)[:, 0]
    assert np.array_equal(u_obs, exact)
    assert ds.noise is None


def test_dataset_noise_statistics(traj800):
    sigma = 0.05
    clean = make_bo_dataset(traj800, sigma=0.0)
    draws = []
    for seed in range(250):
        noisy = make_bo_dataset(traj800, sigma=sigma, seed=seed)
        draws.append(noisy.value - clean.value)
    all_noise = np.concatenate(draws)  # 250 x 42 = 10500 draws
    assert all_noise.size > 10_000
    assert abs(all_noise.std() - sigma) / sigma < 0.05
    assert abs(all_noise.mean()) < 3 * sigma / np.sqrt(all_noise.size) * 3


def test_dataset_reproducible(traj800):
    a = make_bo_dataset(traj800, sigma=0.05, seed=7)
    b = make_bo_dataset(traj800, sigma=0.05, seed=7)
    assert np.array_equal(a.value, b.value)
    assert a.noise == {"sigma": 0.05, "seed": 7}


def test_dataset_beyond_trajectory_rejected(traj800):
    short = Trajectory(traj800.times[:100], traj800.states[:100], traj800.channels)
    with pytest.raises(ValueError):
        make_bo_dataset(short, sigma=0.0, t_final=800.0)


# ---------------------------------------------------------------- tissue solve


def small_cfg(**kv):
    base = dict(length=1.0, n_x=101, diffusivity=2e-4, k_reaction=8.0,
                alpha=0.15, gamma=0.002, mu1=0.2, mu2=0.3, b=0.15,
                dt=0.02, t_final=20.0)
    base.update(kv)
    return ApConfig(**base)


def test_ap_zero_initial_zero_stimulus_stays_zero():
    field = ap1d_solve(small_cfg(), Stimulus([]), store_every=100)
    assert np.all(field.values["v"] == 0.0)
    assert np.all(field.values["w"] == 0.0)


def test_ap_stability_violation_rejected():
    with pytest.raises(ValueError, match="stability|bound"):
        small_cfg(diffusivity=0.5)


def test_ap_zero_diffusion_matches_pointwise_ode():
    # with D = 0 every node runs the reaction ODE independently; oracle is
    # a separate forward-Euler integration of the two-variable system
    cfg = small_cfg(diffusivity=0.0, n_x=5, t_final=10.0)
    stim = Stimulus([Pulse(1.0, 1.0, 1.0, 0.3, 0.8)])
    field = ap1d_solve(cfg, stim, store_every=1)

    xs = cfg.xs
    n_steps = int(round(cfg.t_final / cfg.dt))
    v = np.zeros(cfg.n_x)
    w = np.zeros(cfg.n_x)
    for k in range(n_steps):
        t = k * cfg.dt
        active = 1.0 if 1.0 <= t < 2.0 else 0.0
        i_app = np.where((xs >= 0.3) & (xs <= 0.8), active, 0.0)
        rv, rw = ap_reaction(v, w, cfg)
        v = v + cfg.dt * (rv + i_app)
        w = w + cfg.dt * rw
    assert np.max(np.abs(field.values["v"][-1] - v)) < 1e-12
    assert np.max(np.abs(field.values["w"][-1] - w)) < 1e-12


def test_ap_uniform_stimulus_stays_uniform():
    cfg = small_cfg(t_final=10.0)
    stim = Stimulus([Pulse(0.5, 1.0, 1.0)])  # no spatial support = everywhere
    field = ap1d_solve(cfg, stim, store_every=50)
    for arr in field.values.values():
        assert np.max(arr.max(axis=1) - arr.min(axis=1)) < 1e-12


def test_ap_mirror_symmetry():
    cfg = small_cfg(t_final=15.0)
    left = Stimulus([Pulse(1.0, 1.0, 1.0, 0.2, 0.3)])
    right = Stimulus([Pulse(1.0, 1.0, 1.0, 0.7, 0.8)])
    f_left = ap1d_solve(cfg, left, store_every=100)
    f_right = ap1d_solve(cfg, right, store_every=100)
    assert np.max(np.abs(f_left.values["v"] - f_right.values["v"][:, ::-1])) < 1e-12


def test_ap_wave_propagates():
    cfg = small_cfg(t_final=30.0)
    stim = Stimulus([Pulse(0.5, 1.0, 1.0, 0.0, 0.05)])
    field = ap1d_solve(cfg, stim, store_every=10)
    v = field.values["v"]
    # activation reaches well beyond the stimulated region
    assert np.max(v[:, 50]) > 0.5


def test_ap_first_order_richardson():
    stim = Stimulus([Pulse(0.5, 1.0, 1.0, 0.0, 0.1)])
    finals = []
    for dt in (0.02, 0.01, 0.005):
        cfg = small_cfg(dt=dt, t_final=10.0)
        field = ap1d_solve(cfg, stim, store_every=int(round(10.0 / dt)))
        finals.append(np.concatenate([field.values["v"][-1], field.values["w"][-1]]))
    num = np.linalg.norm(finals[0] - finals[1])
    den = np.linalg.norm(finals[1] - finals[2])
    assert 1.8 < num / den < 2.2


def test_ap_stimulus_outside_domain_rejected():
    with pytest.raises(ValueError):
        ap1d_solve(small_cfg(), Stimulus([Pulse(0.0, 1.0, 1.0, 0.5, 1.5)]))


# ---------------------------------------------------------------- subsampling


def test_even_indices_identity_and_edges():
    assert np.array_equal(even_indices(7, 7), np.arange(7))
    assert np.array_equal(even_indices(10, 2), [0, 9])


def test_even_indices_matches_arithmetic_oracle():
    n, keep = 800, 100
    got = even_indices(n, keep)
    oracle = np.array([round(k * (n - 1) / (keep - 1)) for k in range(keep)])
    assert np.array_equal(got, oracle)
    assert got[0] == 0 and got[-1] == n - 1


def test_subsample_field_identity():
    cfg = small_cfg(n_x=11, t_final=1.0, dt=0.1)
    field = ap1d_solve(cfg, Stimulus([Pulse(0.0, 0.5, 1.0)]), store_every=1)
    ds = subsample_field(field, n_x_keep=11, n_t_keep=field.times.size)
    assert len(ds) == field.times.size * 11
    grid = ds.value.reshape(field.times.size, 11)
    assert np.array_equal(grid, field.values["v"])


def test_subsample_invalid_counts():
    cfg = small_cfg(n_x=11, t_final=1.0, dt=0.1)
    field = ap1d_solve(cfg, Stimulus([]), store_every=1)
    with pytest.raises(ValueError):
        subsample_field(field, n_x_keep=50, n_t_keep=2)


# ---------------------------------------------------------------- containers & IO


def test_trajectory_csv_round_trip(tmp_path, traj800):
    path = tmp_path / "traj.csv"
    traj800.to_csv(path)
    with open(path) as f:
        assert f.readline().strip() == "t,u,v,w,s"
        assert sum(1 for _ in f) == 8001
    back = Trajectory.from_csv(path)
    assert np.array_equal(back.times, traj800.times)
    assert np.array_equal(back.states, traj800.states)


def test_field_csv_and_binary_round_trip(tmp_path):
    cfg = small_cfg(n_x=7, t_final=0.5, dt=0.1)
    field = ap1d_solve(cfg, Stimulus([Pulse(0.0, 0.3, 1.0)]), store_every=1)
    csv_path = tmp_path / "field.csv"
    field.to_csv(csv_path)
    back = SpaceTimeField.from_csv(csv_path)
    assert np.array_equal(back.values["v"], field.values["v"])
    assert np.array_equal(back.values["w"], field.values["w"])

    field.to_binary(tmp_path / "field", dt=cfg.dt, params=cfg.as_dict())
    back2 = SpaceTimeField.from_binary(tmp_path / "field")
    assert np.array_equal(back2.values["v"], field.values["v"])


def test_dataset_csv_round_trip(tmp_path, traj800):
    ds = make_bo_dataset(traj800, sigma=0.05, seed=3)
    path = tmp_path / "obs.csv"
    ds.to_csv(path)
    back = Dataset.from_csv(path)
    assert np.array_equal(back.t, ds.t)
    assert np.array_equal(back.value, ds.value)
    assert list(back.channel) == list(ds.channel)
    assert back.noise == ds.noise


def test_stimulus_validation():
    with pytest.raises(ValueError):
        Pulse(0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        Stimulus([Pulse(0.0, 2.0, 1.0), Pulse(1.0, 2.0, 1.0)], forbid_overlap=True)
    s = Stimulus([Pulse(0.0, 2.0, 1.0), Pulse(1.0, 2.0, 0.5)])
    assert s.current(1.5) == pytest.approx(1.5)
