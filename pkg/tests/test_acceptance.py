"""Acceptance battery: nine end-to-end checks with explicit budgets.

Each test prints one pass/fail line under ``pytest -v`` and asserts both the
statistical requirement and its wall-clock budget.  The ten-seed one-factor
recovery runs are shared through a module fixture so three tests reuse the
same fits.
"""

import time

import numpy as np
import pytest

from _reference import (
    SCALAR_BENCHMARK_TARGETS,
    cir_exact_transition,
    scalar_benchmark_params,
    scalar_benchmark_solution,
    uniform_prior_std,
)
from kpfilter.estimators import (
    ChangePointKalmanParticleFilter,
    GridPosteriorOracle,
    KalmanParticleFilter,
    NestedParticleFilter,
    total_variation,
)
from kpfilter.kalman import GaussianState, filter_pass
from kpfilter.models import ObservationMap, TransitionMoments, cir_exact_step
from kpfilter.particles import (
    cloud_moments,
    random_walk_jitter,
    resample_multinomial,
    resample_systematic,
    shrinkage_jitter,
    walk_scales,
)
from kpfilter.riccati import solve
from kpfilter.simulate import simulate_series

MATURITIES = np.arange(1.0, 31.0)
CIR_TRUTH = {"alpha": 0.45, "beta": 0.001, "sigma": 0.017}
CIR_PRIOR_SD = uniform_prior_std([(0.0, 1.0), (0.0, 0.01), (0.0, 0.1)])
HW_TRUTH = {
    "alpha1": 0.03,
    "alpha2": 0.23,
    "sigma1": 0.02,
    "sigma2": 0.02,
    "rho": -0.5,
}
HW_PRIOR_SD = uniform_prior_std(
    [(0.0, 0.4), (0.0, 0.4), (0.0, 0.1), (0.0, 0.1), (-0.8, -0.3)]
)
SEEDS = tuple(range(10))


def _recovery_ok(est, truth, prior_sd):
    """Mean within three posterior deviations and a five-fold prior shrink."""
    close = np.all(np.abs(est.theta_mean_ - truth) <= 3.0 * est.theta_std_)
    tight = np.all(est.theta_std_ <= 0.2 * prior_sd)
    return bool(close and tight)


def _describe(est, truth):
    err = np.abs(est.theta_mean_ - truth)
    with np.errstate(divide="ignore", invalid="ignore"):
        zscores = np.where(est.theta_std_ > 0, err / est.theta_std_, np.inf)
    return f"z={np.round(zscores, 1)} std={np.format_float_scientific(est.theta_std_.max(), 2)}"


@pytest.fixture(scope="module")
def cir_recovery_runs():
    """Ten one-factor datasets and their filter fits, with the fitting time."""
    runs = []
    start = time.perf_counter()
    for seed in SEEDS:
        series = simulate_series("cir", CIR_TRUTH, MATURITIES, 2000, 1e-8, seed=seed)
        est = KalmanParticleFilter(
            model="cir", n_particles=1000, discount=0.98, random_state=seed
        ).fit(series)
        runs.append((series, est))
    return runs, time.perf_counter() - start


def test_criterion_01_riccati_closed_form():
    start = time.perf_counter()
    horizons = np.array(sorted(SCALAR_BENCHMARK_TARGETS))
    sol = solve(scalar_benchmark_params(), horizons)
    targets = np.array([SCALAR_BENCHMARK_TARGETS[t] for t in horizons])
    errors = np.abs(sol.psi[:, 0] - targets)
    elapsed = time.perf_counter() - start
    assert np.allclose(sol.psi[:, 0], scalar_benchmark_solution(horizons), atol=1e-10)
    assert errors.max() < 1e-10, f"max closed-form error {errors.max():.3e}"
    assert elapsed < 1.0, f"took {elapsed:.2f}s, budget 1s"


def test_criterion_02_kalman_matches_quadrature():
    start = time.perf_counter()
    F, offset, q_var = 0.9, 0.02, 4e-4
    H = np.array([[1.0], [0.6]])
    H0 = np.array([0.01, -0.02])
    obs_var = 2.5e-3
    m0, p0 = 0.15, 0.04

    rng = np.random.default_rng(7)
    x = m0
    y = np.empty((5, 2))
    for k in range(5):
        x = F * x + offset + np.sqrt(q_var) * rng.standard_normal()
        y[k] = H[:, 0] * x + H0 + np.sqrt(obs_var) * rng.standard_normal(2)

    result = filter_pass(
        y,
        TransitionMoments(
            F=np.array([[F]]), offset=np.array([offset]), Q=np.array([[q_var]])
        ),
        ObservationMap(maturities=np.array([1.0, 2.0]), H=H, H0=H0),
        obs_var,
        GaussianState(np.array([m0]), np.array([[p0]])),
    )
    ll_filter = float(result.logliks.sum())

    xs = np.linspace(-1.1, 1.4, 4001)
    dens = np.exp(-0.5 * (xs - m0) ** 2 / p0) / np.sqrt(2.0 * np.pi * p0)
    kernel = np.exp(
        -0.5 * (xs[None, :] - (F * xs[:, None] + offset)) ** 2 / q_var
    ) / np.sqrt(2.0 * np.pi * q_var)
    ll_oracle = 0.0
    for k in range(5):
        pred = np.trapezoid(dens[:, None] * kernel, xs, axis=0)
        resid = y[k][:, None] - (H @ xs[None, :] + H0[:, None])
        like = np.prod(
            np.exp(-0.5 * resid**2 / obs_var) / np.sqrt(2.0 * np.pi * obs_var), axis=0
        )
        step = np.trapezoid(pred * like, xs)
        ll_oracle += np.log(step)
        dens = pred * like / step
    elapsed = time.perf_counter() - start

    assert abs(ll_filter - ll_oracle) < 1e-6, (
        f"filter {ll_filter:.10f} vs quadrature {ll_oracle:.10f}"
    )
    assert elapsed < 5.0, f"took {elapsed:.2f}s, budget 5s"


def test_criterion_03_grid_posterior_convergence():
    start = time.perf_counter()
    fixed = {k: v for k, v in HW_TRUTH.items() if k != "alpha1"}
    series = simulate_series("hw2", HW_TRUTH, MATURITIES, 300, 6e-7, seed=0)
    atoms = HW_TRUTH["alpha1"] + 1.5e-4 * np.arange(-4, 5)
    grid = atoms[:, None]
    oracle = GridPosteriorOracle(model="hw2", grid=grid, fixed=fixed).fit(series)

    def grid_tv(n_particles, seed):
        est = KalmanParticleFilter(
            model="hw2",
            n_particles=n_particles,
            fixed=fixed,
            switch_var=0.0,
            floor_var=0.0,
            start_phase="recursive",
            init_particles=grid[np.arange(n_particles) % atoms.size],
            resampling="multinomial",
            random_state=seed,
        ).fit(series)
        nearest = np.argmin(
            np.abs(est.last_thetas_[:, 0][:, None] - atoms[None, :]), axis=1
        )
        weights = np.zeros(atoms.size)
        np.add.at(weights, nearest, est.last_weights_)
        return total_variation(weights, oracle.final_weights_)

    tv_small = np.array([grid_tv(5000, seed) for seed in SEEDS])
    tv_large = np.array([grid_tv(20000, seed) for seed in SEEDS])
    trend = int(np.sum(tv_large < tv_small))
    elapsed = time.perf_counter() - start

    assert tv_small.mean() < 0.10, (
        f"mean TV {tv_small.mean():.4f} at N=5000, per-seed {np.round(tv_small, 4)}"
    )
    assert trend >= 8, (
        f"TV fell under 4x particles in {trend}/10 seeds "
        f"(N: {np.round(tv_small, 4)}, 4N: {np.round(tv_large, 4)})"
    )
    assert elapsed < 120.0, f"took {elapsed:.1f}s, budget 120s"


def test_criterion_04_one_factor_recovery(cir_recovery_runs):
    runs, elapsed = cir_recovery_runs
    truth = np.array([CIR_TRUTH["alpha"], CIR_TRUTH["beta"], CIR_TRUTH["sigma"]])
    verdicts = [_recovery_ok(est, truth, CIR_PRIOR_SD) for _, est in runs]
    detail = "; ".join(
        f"seed {seed}: {'ok' if ok else _describe(est, truth)}"
        for seed, ok, (_, est) in zip(SEEDS, verdicts, runs)
    )
    assert elapsed < 300.0, f"fits took {elapsed:.1f}s, budget 300s"
    assert sum(verdicts) >= 8, f"recovered in {sum(verdicts)}/10 runs: {detail}"


def test_criterion_05_replay_phase_length(cir_recovery_runs):
    runs, _ = cir_recovery_runs
    switches = [est.switch_step_ for _, est in runs]
    in_window = [s is not None and 100 <= s <= 1500 for s in switches]
    assert sum(in_window) >= 8, f"switch steps {switches} outside [100, 1500]"


def test_criterion_06_two_factor_recovery():
    start = time.perf_counter()
    truth = np.array([HW_TRUTH[name] for name in HW_TRUTH])
    verdicts = []
    details = []
    for seed in SEEDS:
        series = simulate_series("hw2", HW_TRUTH, MATURITIES, 2000, 6e-7, seed=seed)
        est = KalmanParticleFilter(
            model="hw2", n_particles=500, discount=0.98, random_state=seed
        ).fit(series)
        ok = _recovery_ok(est, truth, HW_PRIOR_SD)
        verdicts.append(ok)
        details.append(f"seed {seed}: {'ok' if ok else _describe(est, truth)}")
    elapsed = time.perf_counter() - start
    assert elapsed < 300.0, f"took {elapsed:.1f}s, budget 300s"
    assert sum(verdicts) >= 8, f"recovered in {sum(verdicts)}/10 runs: {'; '.join(details)}"


def test_criterion_07_change_point_reset():
    start = time.perf_counter()
    jump = {"alpha": 0.55, "beta": 0.0015, "sigma": 0.023}
    new_truth = np.array([jump["alpha"], jump["beta"], jump["sigma"]])
    verdicts = []
    details = []
    for seed in SEEDS:
        series = simulate_series(
            "cir",
            CIR_TRUTH,
            MATURITIES,
            4000,
            1e-8,
            seed=seed,
            change_points={2001: jump},
        )
        est = ChangePointKalmanParticleFilter(
            model="cir", n_particles=1000, reset_threshold=0.1, random_state=seed
        ).fit(series)
        resets = est.reset_steps_
        in_window = [step for step in resets if 2001 <= step <= 2051]
        detected = len(resets) == 1 and len(in_window) == 1
        recovered = _recovery_ok(est, new_truth, CIR_PRIOR_SD)
        verdicts.append(detected and recovered)
        details.append(
            f"seed {seed}: resets={len(resets)} in-window={len(in_window)} "
            f"recovered={recovered}"
        )
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0, f"took {elapsed:.1f}s, budget 600s"
    assert sum(verdicts) >= 8, (
        f"clean reset and recovery in {sum(verdicts)}/10 runs: {'; '.join(details)}"
    )


def test_criterion_08_marginalized_beats_nested(cir_recovery_runs):
    runs, _ = cir_recovery_runs
    start = time.perf_counter()
    truth = np.array([CIR_TRUTH["alpha"], CIR_TRUTH["beta"], CIR_TRUTH["sigma"]])
    scale = np.maximum(np.abs(truth), 1e-12)
    wins = []
    details = []
    for seed, (series, est) in zip(SEEDS, runs):
        baseline = NestedParticleFilter(
            model="cir", n_particles=500, inner_particles=150, random_state=seed
        ).fit(series)
        rmse_kpf = float(np.sqrt(np.mean(((est.theta_mean_ - truth) / scale) ** 2)))
        rmse_base = float(
            np.sqrt(np.mean(((baseline.theta_mean_ - truth) / scale) ** 2))
        )
        wins.append(rmse_kpf <= rmse_base)
        details.append(f"seed {seed}: {rmse_kpf:.3f} vs {rmse_base:.3f}")
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0, f"baseline fits took {elapsed:.1f}s, budget 600s"
    assert sum(wins) >= 8, (
        f"marginalized filter won {sum(wins)}/10 runs (RMSE kpf vs nested): "
        f"{'; '.join(details)}"
    )


def _check_shrinkage_moments():
    rng = np.random.default_rng(11)
    n = 4000
    thetas = rng.normal([0.4, -0.2], [0.05, 0.02], size=(n, 2))
    mean, cov = cloud_moments(thetas)
    bounds = np.array([[-10.0, 10.0], [-10.0, 10.0]])
    jittered = shrinkage_jitter(thetas, 0.95, bounds, rng, mean=mean, cov=cov)
    new_mean, new_cov = cloud_moments(jittered)
    mean_band = 6.0 * np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(new_mean - mean) < mean_band)
    cov_band = 6.0 * np.sqrt(
        (np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n
    )
    assert np.all(np.abs(new_cov - cov) < cov_band)


def _check_walk_moment_bound():
    rng = np.random.default_rng(12)
    n, v_cap = 4000, 5000.0**-1.5
    thetas = rng.normal([0.4, -0.2, 0.1], [0.3, 0.004, 1e-5], size=(n, 3))
    _, cov = cloud_moments(thetas)
    scales = walk_scales(np.diag(cov), 0.98, v_cap / 100.0, v_cap)
    assert np.all(scales**2 <= v_cap * (1.0 + 1e-12))
    bounds = np.array([[-10.0, 10.0]] * 3)
    moved = random_walk_jitter(thetas, scales, bounds, rng)
    second_moment = float(np.mean(np.sum((moved - thetas) ** 2, axis=1)))
    assert second_moment <= 3.0 * v_cap * (1.0 + 6.0 * np.sqrt(2.0 / n))
    assert abs(second_moment - np.sum(scales**2)) < 6.0 * np.sqrt(
        2.0 * np.sum(scales**4) / n
    )


def _check_resampling_unbiased():
    rng = np.random.default_rng(13)
    weights = rng.dirichlet(np.ones(12))
    n = 200000
    counts = np.bincount(resample_multinomial(weights, n, rng), minlength=12)
    band = 6.0 * np.sqrt(weights * (1.0 - weights) / n)
    assert np.all(np.abs(counts / n - weights) < band)
    counts = np.bincount(resample_systematic(weights, n, rng), minlength=12)
    assert np.all(np.abs(counts - n * weights) <= 1.0 + 1e-9)


def _check_sqrt_process_moments():
    rng = np.random.default_rng(14)
    n = 250000
    alpha, beta, sigma, x0, delta = 0.45, 0.001, 0.017, 0.02, 1.0 / 252.0
    mean, var = cir_exact_transition(alpha, beta, sigma, x0, delta)
    draws = cir_exact_step(
        np.float64(alpha),
        np.float64(beta),
        np.float64(sigma**2),
        np.full(n, x0),
        delta,
        rng,
    )
    assert abs(draws.mean() - mean) < 6.0 * np.sqrt(var / n)
    assert abs(draws.var() - var) < 0.03 * var


def _check_bounds_containment():
    rng = np.random.default_rng(15)
    bounds = np.array([[0.0, 1e-3], [-0.5, -0.3]])
    thetas = np.column_stack(
        [rng.uniform(0.0, 1e-3, 3000), rng.uniform(-0.5, -0.3, 3000)]
    )
    walked = random_walk_jitter(thetas, np.array([5e-4, 0.1]), bounds, rng)
    assert np.all(walked >= bounds[:, 0]) and np.all(walked <= bounds[:, 1])
    mean, cov = cloud_moments(thetas)
    shrunk = shrinkage_jitter(thetas, 0.9, bounds, rng, mean=mean, cov=cov)
    assert np.all(shrunk >= bounds[:, 0]) and np.all(shrunk <= bounds[:, 1])


def _check_determinism():
    series = simulate_series("cir", CIR_TRUTH, MATURITIES[:10], 60, 1e-8, seed=2)

    def signature(seed):
        est = KalmanParticleFilter(
            model="cir", n_particles=120, random_state=seed
        ).fit(series)
        return (
            est.trace_.theta_mean.tobytes(),
            est.trace_.theta_std.tobytes(),
            est.trace_.max_loglik.tobytes(),
            est.thetas_.tobytes(),
            est.last_weights_.tobytes(),
            est.trace_.switch_steps,
        )

    assert signature(3) == signature(3)
    assert signature(3) != signature(4)


def test_criterion_09_statistical_properties():
    checks = {
        "shrinkage preserves moments": _check_shrinkage_moments,
        "walk jitter moment bound": _check_walk_moment_bound,
        "resampling unbiased": _check_resampling_unbiased,
        "square-root step moments": _check_sqrt_process_moments,
        "jitter respects bounds": _check_bounds_containment,
        "fits are deterministic": _check_determinism,
    }
    for label, check in checks.items():
        start = time.perf_counter()
        check()
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0, f"{label} took {elapsed:.1f}s, budget 30s"
