import math

import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp

from snl.grid import GridFunction, SpaceTimeField, TensorGrid
from snl.sde import (
    coupling_experiment,
    euler_maruyama,
    girsanov_weight,
    khasminskii_functional,
    krylov_mc,
    refine,
    sample_path,
    zvonkin_simulate,
)
from snl.zvonkin import build_map


def singular_drift(t, x):
    v = np.abs(x)
    with np.errstate(divide="ignore"):
        return np.where(v <= 1.0, v**-0.25, 0.0)


# -- Brownian paths ----------------------------------------------------------


def test_path_starts_at_zero():
    for seed in (0, 7, 123456):
        p = sample_path(seed, 1.0, 5, 2)
        assert np.all(p.values[0] == 0.0)


def test_refine_keeps_coarse_nodes_bitwise():
    p = sample_path(99, 2.0, 6, 3)
    q = refine(p)
    assert q.level == p.level + 1
    assert np.array_equal(q.values[::2], p.values)
    r = refine(q)
    assert np.array_equal(r.values[::4], p.values)


def test_same_seed_same_path():
    a = sample_path(5, 1.0, 8, 1)
    b = sample_path(5, 1.0, 8, 1)
    assert np.array_equal(a.values, b.values)
    c = sample_path(5, 1.0, 8, 1, path_index=1)
    assert not np.array_equal(a.values, c.values)


def test_building_at_level_equals_refining():
    direct = sample_path(17, 1.0, 7, 1)
    stepwise = sample_path(17, 1.0, 4, 1)
    for _ in range(3):
        stepwise = refine(stepwise)
    assert np.array_equal(direct.values, stepwise.values)


def test_increment_variance_band():
    level, T = 3, 1.0
    n_paths = 2000
    incs = []
    for i in range(n_paths):
        p = sample_path(1000, T, level, 1, path_index=i)
        incs.append(np.diff(p.values[:, 0]))
    incs = np.concatenate(incs)
    assert incs.size >= 10**4
    var = incs.var(ddof=1)
    dt = T * 2.0**-level
    band = 5.0 * dt * math.sqrt(2.0 / (incs.size - 1))
    assert abs(var - dt) < band


def test_terminal_variance_matches_horizon():
    n = 10**5
    T = 1.0
    w = np.array([sample_path(31, T, 0, 1, path_index=i).values[1, 0] for i in range(n)])
    var = w.var(ddof=1)
    stderr = T * math.sqrt(2.0 / (n - 1))
    assert abs(var - T) < 3 * stderr


def test_level_overflow():
    with pytest.raises(ValueError):
        sample_path(0, 1.0, 31, 1)


# -- Euler-Maruyama ----------------------------------------------------------


def test_pure_noise_is_exact():
    p = sample_path(12, 1.0, 9, 2)
    traj = euler_maruyama(None, 1.0, [0.0, 0.0], p)
    assert np.array_equal(traj.states, p.values)
    assert not traj.exploded


def test_constant_coefficients_exact_at_nodes():
    c = 0.8
    p = sample_path(13, 1.0, 8, 1)
    traj = euler_maruyama(lambda t, x: np.full(x.shape, c), 1.0, [0.25], p)
    want = 0.25 + c * p.times[:, None] + p.values
    assert np.max(np.abs(traj.states - want)) < 1e-12


def test_deterministic_repeats():
    p = sample_path(14, 1.0, 8, 1)
    t1 = euler_maruyama(singular_drift, 1.0, [0.5], p)
    t2 = euler_maruyama(singular_drift, 1.0, [0.5], p)
    assert np.array_equal(t1.states, t2.states)


def test_ode_limit_matches_reference():
    # sigma = 0 reduces to explicit Euler; reference from a tight ODE solve
    x0 = 0.3
    sol = solve_ivp(lambda t, y: np.cos(y), (0, 1), [x0], rtol=1e-12, atol=1e-12)
    ref = sol.y[0, -1]
    errors = []
    for level in (6, 9):
        p = sample_path(15, 1.0, level, 1)
        traj = euler_maruyama(lambda t, x: np.cos(x), 0.0, [x0], p)
        errors.append(abs(traj.states[-1, 0] - ref))
    rate = math.log2(errors[0] / errors[1]) / 3
    assert errors[1] < 1e-3
    assert rate > 0.8  # first-order in dt


def test_explosion_detection():
    p = sample_path(16, 1.0, 8, 1)
    traj = euler_maruyama(lambda t, x: 5.0 * x, 0.0, [1.0], p, drift_cap=1e6, radius_max=5.0)
    assert traj.exploded
    assert traj.exit_index is not None
    assert abs(traj.states[traj.exit_index, 0]) > 5.0
    # frozen after exit
    assert np.all(traj.states[traj.exit_index :, 0] == traj.states[traj.exit_index, 0])


def test_drift_cap_applies():
    p = sample_path(17, 1.0, 4, 1)
    traj = euler_maruyama(lambda t, x: np.full(x.shape, 1e9), 0.0, [0.0], p, drift_cap=2.0)
    # capped drift 2.0 integrates to exactly 2 t
    assert np.max(np.abs(traj.states[:, 0] - 2.0 * p.times)) < 1e-12


def test_non_finite_diffusion_reports_step():
    p = sample_path(18, 1.0, 4, 1)
    with pytest.raises(FloatingPointError, match="step"):
        euler_maruyama(None, lambda t, x: np.full(x.shape, np.nan), [0.0], p)


def test_girsanov_singular_sigma_rejected():
    with pytest.raises(np.linalg.LinAlgError, match="singular"):
        girsanov_weight(
            lambda t, x: np.ones(x.shape),
            lambda t, x: np.zeros(x.shape),
            [0.0],
            1.0,
            150,
            3,
            seed=54,
        )


# -- coupling ----------------------------------------------------------------


def test_coupling_identical_levels_zero():
    tab = coupling_experiment(None, 1.0, [0.0], range(10), (5, 6), 1.0, 1)
    assert tab.mean_errors[0] == 0.0


def test_coupling_driftless_control_exact_zero():
    tab = coupling_experiment(None, 1.0, [0.3], range(25), range(6, 11), 1.0, 1)
    assert all(e == 0.0 for e in tab.mean_errors)
    assert tab.rate == math.inf


def test_coupling_singular_drift_decays():
    tab = coupling_experiment(singular_drift, 1.0, [0.5], range(60), range(8, 13), 1.0, 1)
    assert all(a > b for a, b in zip(tab.mean_errors[:-1], tab.mean_errors[1:]))
    assert tab.rate >= 0.2
    assert sum(tab.excluded) == 0


def test_coupling_excludes_exploded():
    tab = coupling_experiment(
        lambda t, x: 5.0 * x, 1.0, [1.0], range(10), (6, 7), 1.0, 1, drift_cap=1e6, radius_max=3.0
    )
    assert all(x == 10 for x in tab.excluded)


# -- Krylov functional -------------------------------------------------------


def test_krylov_constant_one_returns_horizon_exactly():
    rep = krylov_mc(lambda t, x: np.ones(x.shape[:-1]), None, 1.0, [0.7], 1.0, 150, 5, seed=41)
    assert rep.estimate.mean == 1.0
    assert rep.estimate.stderr == 0.0


def test_krylov_zero_source():
    rep = krylov_mc(lambda t, x: np.zeros(x.shape[:-1]), None, 1.0, [0.0], 1.0, 128, 4, seed=42)
    assert rep.estimate.mean == 0.0


def test_krylov_rejects_tiny_sample_size():
    with pytest.raises(ValueError, match="n >= 100"):
        krylov_mc(lambda t, x: np.ones(x.shape[:-1]), None, 1.0, [0.0], 1.0, 50, 4)


def test_krylov_constant_one_exact_regardless_of_coefficients():
    rep = krylov_mc(
        lambda t, x: np.ones(x.shape[:-1]), singular_drift, 0.5, [0.2], 1.0, 120, 5, seed=46
    )
    assert rep.estimate.mean == 1.0
    assert rep.estimate.stderr == 0.0


def test_krylov_singular_source_matches_gaussian_quadrature():
    def f(t, x):
        v = np.abs(x[..., 0])
        with np.errstate(divide="ignore"):
            return np.where(v <= 1.0, v**-0.5, 0.0)

    def inner(s):
        val, _ = quad(lambda u: math.exp(-(u**4) / (2 * s)), 0.0, 1.0)
        return 4.0 * val / math.sqrt(2 * math.pi * s)

    oracle, quad_err = quad(inner, 0.0, 1.0, points=[0.0], limit=200)
    assert quad_err < 1e-6
    rep = krylov_mc(f, None, 1.0, [0.0], 1.0, 2000, 11, seed=43)
    assert abs(rep.estimate.mean - oracle) < 3.0 * rep.estimate.stderr
    # only the deterministic singular start node is dropped
    assert rep.excluded_nodes == 2000


def test_krylov_thread_determinism():
    def f(t, x):
        return np.abs(x[..., 0])

    a = krylov_mc(f, None, 1.0, [0.0], 1.0, 400, 6, seed=44, threads=1, batch=100)
    b = krylov_mc(f, None, 1.0, [0.0], 1.0, 400, 6, seed=44, threads=3, batch=100)
    assert a.estimate == b.estimate


def test_krylov_ratio_against_declared_norm():
    rep = krylov_mc(
        lambda t, x: np.ones(x.shape[:-1]), None, 1.0, [0.0], 1.0, 128, 4, seed=45, source_norm=2.0
    )
    assert rep.ratio == pytest.approx(0.5)


# -- Girsanov weight ---------------------------------------------------------


def test_girsanov_zero_drift_unity():
    est = girsanov_weight(lambda t, x: np.zeros(x.shape), 1.0, [0.0], 1.0, 200, 5, seed=50)
    assert est.mean == 1.0
    assert est.stderr == 0.0


def test_girsanov_constant_drift_lognormal():
    # rho = exp(-c W_T - c^2 T / 2) has mean exactly 1
    c = 0.8
    est = girsanov_weight(
        lambda t, x: np.full(x.shape, c), 1.0, [0.0], 1.0, 10**4, 6, seed=51
    )
    assert abs(est.mean - 1.0) < 3.0 * est.stderr
    # for constant drift the left-point sums telescope, so the two-sample
    # mean must equal the closed form evaluated on those very paths
    pair = girsanov_weight(lambda t, x: np.full(x.shape, c), 1.0, [0.0], 1.0, 2, 6, seed=51)
    closed = [
        math.exp(-c * sample_path(51, 1.0, 6, 1, path_index=i).values[-1, 0] - 0.5 * c * c)
        for i in (0, 1)
    ]
    assert pair.mean == pytest.approx(0.5 * sum(closed), rel=1e-12)


def test_girsanov_capped_singular_drift():
    est = girsanov_weight(singular_drift, 1.0, [0.5], 1.0, 4000, 8, seed=52, drift_cap=1e3)
    # weights are exponentials, so the mean is strictly positive
    assert est.mean > 0.0
    assert abs(est.mean - 1.0) < 3.0 * est.stderr


def test_girsanov_matrix_sigma():
    sig = np.array([[1.0, 0.2], [0.2, 0.8]])
    est = girsanov_weight(
        lambda t, x: np.stack([0.4 * np.ones(x.shape[:-1]), -0.3 * np.ones(x.shape[:-1])], -1),
        sig,
        [0.0, 0.0],
        1.0,
        4000,
        5,
        seed=53,
        dim=2,
    )
    assert abs(est.mean - 1.0) < 3.0 * est.stderr


# -- Khasminskii functional --------------------------------------------------


def test_khasminskii_zero_drift_is_one():
    rep = khasminskii_functional(
        lambda t, x: np.zeros(x.shape), 1.0, [0.0], 1.0, 1.0, 200, 5, seed=60
    )
    assert rep.estimate.mean == 1.0
    assert not rep.overflowed


def test_khasminskii_bounded_drift_bound():
    B, kappa, T = 0.5, 1.3, 1.0
    rep = khasminskii_functional(
        lambda t, x: B * np.sin(x), 1.0, [0.0], T, kappa, 500, 6, seed=61
    )
    assert rep.estimate.mean <= math.exp(kappa * B * B * T) + 1e-12
    assert not rep.overflowed


def test_khasminskii_singular_cap_stability():
    means = {}
    for cap in (1e3, 1e4):
        rep = khasminskii_functional(
            singular_drift, 1.0, [0.5], 1.0, 1.0, 2000, 8, seed=62, drift_cap=cap
        )
        assert not rep.overflowed
        means[cap] = rep.estimate.mean
    assert abs(means[1e4] - means[1e3]) / means[1e3] < 0.10


def test_khasminskii_overflow_flag():
    rep = khasminskii_functional(
        lambda t, x: np.full(x.shape, 50.0), 1.0, [0.0], 1.0, 1.0, 200, 4, seed=63
    )
    assert rep.overflowed
    assert rep.estimate.mean == math.inf


def test_khasminskii_rejects_nonpositive_kappa():
    with pytest.raises(ValueError):
        khasminskii_functional(singular_drift, 1.0, [0.5], 1.0, 0.0, 200, 4)


# -- transformed simulation ----------------------------------------------------


def grid_1d():
    return TensorGrid((8.0,), (256,))


def identity_sigma(grid):
    return GridFunction.from_function(
        grid, lambda X: np.ones(X.shape[:-1] + (1, 1)), "matrix"
    )


def test_zvonkin_simulate_zero_drift_identical():
    grid = grid_1d()
    T, M = 1.0, 64
    b = SpaceTimeField.constant_in_time(GridFunction.zeros(grid, "vector"), T, M)
    zmap = build_map(identity_sigma(grid), b, T, M)
    p = sample_path(70, T, 8, 1)
    direct = euler_maruyama(None, 1.0, [4.0], p)
    mapped = zvonkin_simulate(zmap, 1.0, [4.0], p)
    assert np.array_equal(direct.states, mapped.states)


def test_zvonkin_simulate_constant_drift_exact():
    grid = grid_1d()
    c, T, M = 0.6, 1.0, 128
    b = SpaceTimeField.constant_in_time(GridFunction.constant(grid, [c], "vector"), T, M)
    zmap = build_map(identity_sigma(grid), b, T, M)
    p = sample_path(71, T, 7, 1)
    traj = zvonkin_simulate(zmap, 1.0, [4.0], p)
    want = 4.0 + c * p.times[:, None] + p.values
    assert np.max(np.abs(traj.states - want)) < 1e-9


def test_zvonkin_simulate_cross_method_consistency():
    # smooth bump drift: the mapped simulation and direct Euler-Maruyama
    # approach each other as the path refines
    grid = TensorGrid((8.0,), (512,))
    T, M = 0.25, 256

    def bump(X):
        r = X[..., 0] - 4.0
        return (1.5 * np.exp(-((r / 0.6) ** 2)))[..., None]

    def bump_fn(t, x):
        r = x - 4.0
        return 1.5 * np.exp(-((r / 0.6) ** 2))

    b = SpaceTimeField.constant_in_time(GridFunction.from_function(grid, bump, "vector"), T, M)
    zmap = build_map(identity_sigma(grid), b, T, M)
    assert zmap.certificate
    sups = []
    for level in (4, 6, 8):
        worst = []
        for seed in range(8):
            p = sample_path(200 + seed, T, level, 1)
            direct = euler_maruyama(bump_fn, 1.0, [3.5], p)
            mapped = zvonkin_simulate(zmap, 1.0, [3.5], p)
            worst.append(np.max(np.abs(direct.states - mapped.states)))
        sups.append(float(np.mean(worst)))
    assert sups[-1] < sups[0]
    assert sups[-1] < 0.05


def test_zvonkin_simulate_requires_certificate():
    grid = grid_1d()
    T, M = 1.0, 256

    def strong(X):
        r = X[..., 0] - 4.0
        return (4.0 * np.exp(-((r / 0.4) ** 2)))[..., None]

    b = SpaceTimeField.constant_in_time(GridFunction.from_function(grid, strong, "vector"), T, M)
    zmap = build_map(identity_sigma(grid), b, T, M)
    assert not zmap.certificate
    p = sample_path(72, T, 4, 1)
    with pytest.raises(ValueError, match="certified"):
        zvonkin_simulate(zmap, 1.0, [4.0], p)
