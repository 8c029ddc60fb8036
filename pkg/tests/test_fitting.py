import numpy as np
import pytest

from qsl import fitting, laws
from qsl.errors import InsufficientData, NonFiniteObjective, NonPositiveDelta, SingularDesign
from qsl.fitting import HuberConfig
from qsl.lbfgs import OptimConfig, lbfgs_minimize

from synth import REF_C, REF_DELTAS, chinchilla_runs, delta_obs

FAST = OptimConfig(max_starts=50)


def quadratic(A, b):
    def fun(x):
        return float(0.5 * x @ A @ x - b @ x), A @ x - b
    return fun


def rosenbrock(x):
    f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
    return float(f), g


# Huber


def test_huber_values():
    cfg = HuberConfig(1.0)
    assert fitting.huber(0.5, cfg) == 0.125
    assert fitting.huber(-3.0, cfg) == 2.5
    assert fitting.huber(1.0, cfg) == 0.5
    assert fitting.huber(1e6, HuberConfig(np.inf)) == 0.5e12


def test_huber_grad_fd():
    cfg = HuberConfig(0.3)
    r = np.array([-2.0, -0.31, -0.1, 0.0, 0.2, 0.29, 5.0])
    eps = 1e-7
    fd = (fitting.huber(r + eps, cfg) - fitting.huber(r - eps, cfg)) / (2 * eps)
    assert np.allclose(fitting.huber_grad(r, cfg), fd, atol=1e-6)


def test_huber_config_validation():
    with pytest.raises(ValueError):
        HuberConfig(0.0)


# L-BFGS


def test_lbfgs_quadratic():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 6))
    A = M @ M.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    res = lbfgs_minimize(quadratic(A, b), np.zeros(6))
    assert res.converged
    assert np.allclose(res.x, np.linalg.solve(A, b), atol=1e-9)


def test_lbfgs_rosenbrock():
    res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]))
    assert res.converged
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
    # the trace is monotone non-increasing
    assert all(b <= a + 1e-15 for a, b in zip(res.trace, res.trace[1:]))


def test_lbfgs_at_stationary_point():
    res = lbfgs_minimize(rosenbrock, np.array([1.0, 1.0]))
    assert res.converged and res.n_iter == 0
    x, f = res
    assert f == 0.0 and np.array_equal(x, [1.0, 1.0])


def test_lbfgs_memory_one():
    res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), OptimConfig(memory=1, max_iters=5000))
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-5)


def test_lbfgs_non_finite_start():
    with pytest.raises(NonFiniteObjective):
        lbfgs_minimize(rosenbrock, np.array([np.nan, 0.0]))


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(memory=0)
    with pytest.raises(ValueError):
        OptimConfig(grad_tol=0)
    with pytest.raises(ValueError):
        OptimConfig(multistart_grid=[])


# Chinchilla


def test_chinchilla_objective_gradient():
    N, D, L = (np.array(c) for c in zip(*chinchilla_runs(0.01, seed=3)))
    for tie in (True, False):
        fun = fitting.chinchilla_objective(N, D, L, HuberConfig(0.005), tie, (20.0, 24.0))
        x = np.array([1.0, 2.0, 0.6, 0.3, 0.35][: 4 if tie else 5])
        _, g = fun(x)
        eps = 1e-6
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = eps
            fd = (fun(x + e)[0] - fun(x - e)[0]) / (2 * eps)
            assert fd == pytest.approx(g[j], rel=1e-5, abs=1e-9)


def test_fit_chinchilla_noiseless():
    res = fitting.fit_chinchilla(chinchilla_runs(), FAST)
    p = res.params
    assert p.alpha == pytest.approx(REF_C.alpha, rel=1e-3)
    assert p.beta == p.alpha
    assert p.E == pytest.approx(REF_C.E, rel=1e-3)
    assert res.r_squared > 0.9999
    assert res.n_starts_used == 50


def test_fit_chinchilla_untied():
    truth = laws.ChinchillaParams(E=1.8, A=400.0, alpha=0.34, B=900.0, beta=0.28)
    res = fitting.fit_chinchilla(chinchilla_runs(c=truth), FAST, constrain_alpha_eq_beta=False)
    assert res.params.alpha == pytest.approx(0.34, rel=1e-2)
    assert res.params.beta == pytest.approx(0.28, rel=1e-2)


def test_fit_chinchilla_deterministic():
    runs = chinchilla_runs(0.005, seed=7)
    a = fitting.fit_chinchilla(runs, OptimConfig(max_starts=20))
    b = fitting.fit_chinchilla(runs, OptimConfig(max_starts=20))
    assert a.params == b.params and a.objective == b.objective and a.start_index == b.start_index


def test_fit_chinchilla_threads_match(monkeypatch):
    runs = chinchilla_runs(0.005, seed=8)
    a = fitting.fit_chinchilla(runs, OptimConfig(max_starts=20))
    monkeypatch.setenv("QSL_THREADS", "4")
    b = fitting.fit_chinchilla(runs, OptimConfig(max_starts=20))
    assert a.params == b.params


def test_fit_chinchilla_insufficient():
    runs = chinchilla_runs()
    with pytest.raises(InsufficientData):
        fitting.fit_chinchilla(runs[:5])
    same_n = [r for r in runs if r[0] == 74e6] + [(74e6, 5e9, 4.0), (74e6, 7e9, 3.9)]
    with pytest.raises(InsufficientData):
        fitting.fit_chinchilla(same_n)


def test_fit_chinchilla_custom_grid():
    grid = [(5.0, 6.0, 0.5, 0.3)]
    res = fitting.fit_chinchilla(chinchilla_runs(), OptimConfig(multistart_grid=grid))
    assert res.n_starts_used == 1 and res.start_index == 0


# error law


def test_fit_delta_noiseless():
    res = fitting.fit_delta(delta_obs("w16a4"))
    d = REF_DELTAS["w16a4"]
    for name in ("k", "gamma_N", "gamma_D", "gamma_G"):
        assert getattr(res.params, name) == pytest.approx(getattr(d, name), rel=1e-6)


def test_fit_delta_matches_ols_under_squared_loss():
    obs = delta_obs("w4a16", sigma=0.05, seed=2)
    res = fitting.fit_delta(obs, huber_cfg=HuberConfig(np.inf))
    ols = fitting.fit_delta_ols(obs)
    for name in ("k", "gamma_N", "gamma_D", "gamma_G"):
        assert getattr(res.params, name) == pytest.approx(getattr(ols, name), abs=1e-6)


def test_fit_delta_robust_to_outlier():
    obs = delta_obs("w4a4")
    obs[5] = (*obs[5][:3], obs[5][3] * 5)
    robust = fitting.fit_delta(obs)
    ols = fitting.fit_delta_ols(obs)
    truth = REF_DELTAS["w4a4"]
    assert abs(robust.params.gamma_N - truth.gamma_N) < 0.1 * abs(ols.gamma_N - truth.gamma_N)


def test_fit_delta_scale_equivariance():
    obs = delta_obs("w4a4", sigma=0.02, seed=1)
    scaled = [(n, d, g, 3.0 * v) for n, d, g, v in obs]
    a = fitting.fit_delta(obs).params
    b = fitting.fit_delta(scaled).params
    assert b.k == pytest.approx(3.0 * a.k, rel=1e-6)
    assert b.gamma_N == pytest.approx(a.gamma_N, abs=1e-7)


def test_fit_delta_freeze_gamma_d():
    obs = delta_obs("w4a4")
    res = fitting.fit_delta(obs, huber_cfg=HuberConfig(np.inf), freeze_gamma_d=0.0)
    assert res.params.gamma_D == 0.0
    ols = fitting.fit_delta_ols(obs, freeze_gamma_d=0.0)
    assert res.params.gamma_N == pytest.approx(ols.gamma_N, abs=1e-6)


def test_fit_delta_errors():
    obs = delta_obs("w4a4")
    with pytest.raises(InsufficientData):
        fitting.fit_delta(obs[:3])
    bad = list(obs)
    bad[0] = (*bad[0][:3], -0.01)
    with pytest.raises(NonPositiveDelta):
        fitting.fit_delta(bad)
    one_g = [o for o in obs if o[2] == 32]
    with pytest.raises(SingularDesign):
        fitting.fit_delta_ols(one_g)
    with pytest.raises(InsufficientData):
        fitting.fit_delta(one_g)


def test_ablate_D_direction():
    with_d, without_d = fitting.ablate_D(delta_obs("w4a4", sigma=0.01, seed=4))
    assert with_d < without_d


def test_fit_metrics_hand_case():
    mse, r2 = fitting.fit_metrics([1.0, 2.0, 4.0], [1.0, 3.0, 5.0])
    assert mse == pytest.approx(2 / 3)
    assert r2 == pytest.approx(1 - 2 / 8)


def test_fit_report_fields():
    res = fitting.fit_delta(delta_obs("w4a4"))
    rep = res.report()
    assert {"objective", "converged", "n_starts_used", "r_squared", "mse", "objective_trace"} <= set(rep)
    assert rep["objective_trace"]
