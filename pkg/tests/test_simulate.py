import numpy as np
import pytest

from kpfilter.models import build_observation_map, get_family
from kpfilter.simulate import (
    ObservationSeries,
    make_observations,
    simulate_cir,
    simulate_factors,
    simulate_ou,
    simulate_series,
)

from _reference import cir_exact_transition


CIR_PARAMS = {"alpha": 0.45, "beta": 0.001, "sigma": 0.017}
MATURITIES = np.arange(1.0, 6.0)


def test_simulate_series_is_seed_deterministic():
    a = simulate_series("cir", CIR_PARAMS, MATURITIES, 50, 1e-8, seed=3)
    b = simulate_series("cir", CIR_PARAMS, MATURITIES, 50, 1e-8, seed=3)
    c = simulate_series("cir", CIR_PARAMS, MATURITIES, 50, 1e-8, seed=4)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.truth.x_path, b.truth.x_path)
    assert not np.array_equal(a.values, c.values)


def test_cir_path_stays_nonnegative():
    rng = np.random.default_rng(11)
    path = simulate_cir(0.45, 0.001, 0.017, 0.005, 3000, 1.0 / 252.0, rng)
    assert path.shape == (3001,)
    assert np.all(path >= 0.0)


def test_cir_path_matches_exact_transition_moments():
    rng = np.random.default_rng(5)
    dt = 1.0 / 252.0
    x0, reps = 0.005, 40000
    draws = np.array(
        [simulate_cir(0.45, 0.001, 0.017, x0, 1, dt, rng)[1] for _ in range(reps)]
    )
    mean_ref, var_ref = cir_exact_transition(0.45, 0.001, 0.017, x0, dt)
    assert abs(draws.mean() - mean_ref) < 5.0 * np.sqrt(var_ref / reps)
    assert abs(draws.var() - var_ref) < 0.05 * var_ref


def test_ou_path_matches_exact_transition_moments():
    rng = np.random.default_rng(7)
    alphas = np.array([0.03, 0.23])
    betas = np.array([0.01, 0.02])
    Sigma = np.diag([0.02, 0.02])
    dt, x0 = 0.5, np.array([0.04, 0.01])
    draws = np.stack(
        [simulate_ou(alphas, betas, Sigma, x0, 1, dt, rng)[1] for _ in range(30000)]
    )
    f = np.exp(-alphas * dt)
    mean_ref = f * x0 + (1.0 - f) * betas
    var_ref = np.diag(Sigma @ Sigma.T) * (1.0 - np.exp(-2.0 * alphas * dt)) / (2.0 * alphas)
    assert np.all(np.abs(draws.mean(axis=0) - mean_ref) < 5.0 * np.sqrt(var_ref / 30000))
    assert np.all(np.abs(draws.var(axis=0) - var_ref) < 0.05 * var_ref)


def test_observation_noise_has_requested_variance():
    rng = np.random.default_rng(2)
    family = get_family("cir")
    spec = family.build_spec(CIR_PARAMS)
    obs_map = build_observation_map(spec, np.arange(1.0, 31.0))
    x_path = np.full((2001, 1), 0.005)
    series = make_observations(x_path, obs_map, 1e-8, rng)
    clean = x_path[1:] @ obs_map.H.T + obs_map.H0
    resid = series.values - clean
    assert abs(resid.var() - 1e-8) < 0.05 * 1e-8
    assert series.n_steps == 2000
    assert series.n_obs == 30


def test_change_point_applies_from_named_step():
    n_steps = 40
    switch = {21: {"alpha": 0.55, "beta": 0.0015, "sigma": 0.023}}
    series = simulate_series(
        "cir", CIR_PARAMS, MATURITIES, n_steps, 1e-12, seed=0, change_points=switch
    )
    firsts = [first for first, _ in series.truth.segments]
    assert firsts == [1, 21]
    assert series.truth.segments[1][1]["alpha"] == 0.55
    # Rebuild the clean panel per segment: rows 0..19 price under the old
    # parameters, rows 20..39 under the new ones, sharing one factor path.
    family = get_family("cir")
    x_path = series.truth.x_path
    for first, params in series.truth.segments:
        stop = n_steps + 1 if first == 21 else 21
        obs_map = build_observation_map(family.build_spec(params), MATURITIES)
        clean = x_path[first:stop] @ obs_map.H.T + obs_map.H0
        resid = series.values[first - 1 : stop - 1] - clean
        assert np.max(np.abs(resid)) < 1e-4


def test_change_point_outside_range_rejected():
    with pytest.raises(ValueError):
        simulate_series(
            "cir", CIR_PARAMS, MATURITIES, 10, 1e-8, seed=0,
            change_points={11: {"alpha": 0.5}},
        )


def test_series_shape_validation():
    with pytest.raises(ValueError):
        ObservationSeries(
            times=np.arange(3.0),
            maturities=MATURITIES,
            values=np.zeros((2, MATURITIES.size)),
            obs_var=1e-8,
        )
    with pytest.raises(ValueError):
        ObservationSeries(
            times=np.arange(2.0),
            maturities=MATURITIES,
            values=np.zeros((2, MATURITIES.size)),
            obs_var=0.0,
        )


def test_factor_dispatch_covers_all_families():
    rng = np.random.default_rng(1)
    for name, params in (
        ("cir", CIR_PARAMS),
        ("hw2", {"alpha1": 0.03, "alpha2": 0.23, "sigma1": 0.02, "sigma2": 0.02, "rho": -0.5}),
        ("sv", {"alpha1": 0.1, "alpha2": 0.3, "beta2": 0.03, "sigma1": 0.3, "sigma2": 0.07, "rho": -0.5}),
    ):
        family = get_family(name)
        spec = family.build_spec(family.full_params(params))
        path = simulate_factors(spec, family.default_x0_mean, 5, 1.0 / 252.0, rng)
        assert path.shape == (6, family.dim)
        assert np.all(np.isfinite(path))
        if spec.scaled_diffusion:
            assert np.all(path[:, 0] >= 0.0)
