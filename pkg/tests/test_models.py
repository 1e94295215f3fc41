import numpy as np
import pytest

from kpfilter.models import (
    AffineModelSpec,
    build_observation_map,
    bond_price,
    cir_exact_step,
    decay_integrals,
    family_names,
    get_family,
    transition_moments,
    validate_admissibility,
    zero_rate,
)

from _reference import cir_exact_transition, cir_frozen_variance


CIR_TRUTH = {"alpha": 0.45, "beta": 0.001, "sigma": 0.017}
HW_TRUTH = {"alpha1": 0.03, "alpha2": 0.23, "sigma1": 0.02, "sigma2": 0.02, "rho": -0.5}


def test_family_registry():
    names = set(family_names())
    assert {"cir", "hw2", "sv"} <= names
    for name in names:
        family = get_family(name)
        assert family.name == name
        assert len(family.param_names) == len(set(family.param_names))
        assert set(family.default_priors) == set(family.param_names)
    with pytest.raises((KeyError, ValueError)):
        get_family("vasicek")


def test_cir_spec_fields():
    spec = get_family("cir").build_spec(CIR_TRUTH)
    assert spec.dim == 1
    assert spec.scaled_diffusion
    assert spec.n_nonneg == 1
    assert spec.alphas[0] == 0.45
    assert spec.beta[0] == 0.001
    assert spec.SigmaTilde[0, 0] == 0.017
    assert np.all(spec.Sigma == 0.0)
    assert validate_admissibility(spec) == []


def test_hw_spec_fields():
    spec = get_family("hw2").build_spec(HW_TRUTH)
    assert spec.dim == 2
    assert not spec.scaled_diffusion
    cov = spec.Sigma @ spec.Sigma.T
    # Both factors carry scale 0.02 and correlation rho.
    assert np.allclose(np.diag(cov), [0.02**2, 0.02**2], atol=1e-15)
    assert abs(cov[0, 1] - (-0.5) * 0.02 * 0.02) < 1e-15
    assert validate_admissibility(spec) == []


def test_sv_spec_fields():
    family = get_family("sv")
    spec = family.build_spec(
        {
            "alpha1": 0.1,
            "alpha2": 0.3,
            "beta2": 0.03,
            "sigma1": 0.3,
            "sigma2": 0.07,
            "rho": -0.5,
        }
    )
    assert spec.dim == 2
    assert spec.scaled_diffusion
    assert spec.n_nonneg == 1
    # The volatility factor reverts to the pinned long-run level.
    assert spec.beta[0] == 0.1
    assert spec.beta[1] == 0.03
    # Short rate is the second component alone.
    assert tuple(spec.gamma) == (0.0, -1.0)


def test_mixed_diffusion_flagged():
    spec = AffineModelSpec(
        alphas=[0.5],
        beta=[0.01],
        Sigma=[[0.1]],
        SigmaTilde=[[0.2]],
        gamma=[-1.0],
        n_nonneg=1,
    )
    problems = validate_admissibility(spec)
    assert any("exactly one" in msg for msg in problems)


def test_admissibility_catches_violations():
    family = get_family("cir")
    bad = family.build_spec({"alpha": -0.2, "beta": 0.001, "sigma": 0.017})
    assert validate_admissibility(bad)
    drifting_down = family.build_spec({"alpha": 0.45, "beta": -0.001, "sigma": 0.017})
    assert validate_admissibility(drifting_down)


def test_decay_integrals_small_rate_limit():
    # For alpha -> 0 the integral of exp(-alpha s) over [0, delta] tends to delta.
    g = decay_integrals(np.array([5e-15, 0.45]), 0.5)
    assert abs(g[0, 0] - 0.5) < 1e-12
    assert abs(g[1, 1] - -np.expm1(-0.9 * 0.5) / 0.9) < 1e-14
    assert abs(g[0, 1] - -np.expm1(-0.45 * 0.5) / 0.45) < 1e-14
    assert abs(g[0, 1] - g[1, 0]) == 0.0


def test_cir_transition_moments_freeze_driver():
    spec = get_family("cir").build_spec(CIR_TRUTH)
    delta = 1.0 / 252.0
    x = np.array([0.004])
    moments = transition_moments(spec, x, delta)
    mean_ref, _ = cir_exact_transition(0.45, 0.001, 0.017, 0.004, delta)
    assert abs(moments.F[0, 0] - np.exp(-0.45 * delta)) < 1e-14
    assert abs(moments.F[0, 0] * 0.004 + moments.offset[0] - mean_ref) < 1e-14
    assert abs(moments.Q[0, 0] - cir_frozen_variance(0.45, 0.017, 0.004, delta)) < 1e-18


def test_cir_frozen_variance_nears_exact_for_small_steps():
    _, var_exact = cir_exact_transition(0.45, 0.001, 0.017, 0.004, 1.0 / 252.0)
    var_frozen = cir_frozen_variance(0.45, 0.017, 0.004, 1.0 / 252.0)
    assert abs(var_exact - var_frozen) / var_exact < 0.01


def test_negative_driver_clamped_to_zero():
    spec = get_family("cir").build_spec(CIR_TRUTH)
    moments = transition_moments(spec, np.array([-0.003]), 1.0 / 252.0)
    assert moments.Q[0, 0] == 0.0


def test_hw_transition_covariance_closed_form():
    spec = get_family("hw2").build_spec(HW_TRUTH)
    delta = 1.0 / 252.0
    moments = transition_moments(spec, np.zeros(2), delta)
    cov = spec.Sigma @ spec.Sigma.T
    alphas = spec.alphas
    for i in range(2):
        for j in range(2):
            rate = alphas[i] + alphas[j]
            ref = cov[i, j] * -np.expm1(-rate * delta) / rate
            assert abs(moments.Q[i, j] - ref) < 1e-18


def test_cir_exact_sampler_matches_noncentral_moments(rng):
    alpha, beta, sigma = 0.45, 0.001, 0.017
    delta = 1.0 / 252.0
    x0 = 0.004
    draws = cir_exact_step(
        np.full(200_000, alpha),
        np.full(200_000, beta),
        np.full(200_000, sigma**2),
        np.full(200_000, x0),
        delta,
        rng,
    )
    mean_ref, var_ref = cir_exact_transition(alpha, beta, sigma, x0, delta)
    # Scaled noncentral chi-square: mean c(p + lambda), variance c^2(2p + 4lambda).
    decay = np.exp(-alpha * delta)
    c = sigma**2 * (1.0 - decay) / (4.0 * alpha)
    p = 4.0 * alpha * beta / sigma**2
    lam = x0 * 4.0 * alpha * decay / (sigma**2 * (1.0 - decay))
    assert abs(c * (p + lam) - mean_ref) < 1e-15
    assert abs(c * c * (2.0 * p + 4.0 * lam) - var_ref) < 1e-18
    assert abs(draws.mean() - mean_ref) < 4.0 * np.sqrt(var_ref / draws.size)
    sample_var = draws.var()
    # Fourth-moment CLT band for the variance estimate.
    kurt_proxy = np.mean((draws - draws.mean()) ** 4)
    assert abs(sample_var - var_ref) < 4.0 * np.sqrt(kurt_proxy / draws.size)


def test_cir_sampler_stays_nonnegative(rng):
    draws = cir_exact_step(
        np.full(5000, 0.45),
        np.full(5000, 0.001),
        np.full(5000, 0.017**2),
        np.full(5000, 1e-6),
        1.0 / 252.0,
        rng,
    )
    assert np.all(draws >= 0.0)


def test_bond_price_yield_round_trip():
    spec = get_family("cir").build_spec(CIR_TRUTH)
    omap = build_observation_map(spec, np.array([2.0, 7.0]))
    x = np.array([0.006])
    for row, tau in enumerate((2.0, 7.0)):
        phi = omap.H0[row] * tau
        psi = omap.H[row] * tau
        price = bond_price(phi, psi, x)
        assert 0.0 < price < 1.0
        assert abs(zero_rate(phi, psi, x, tau) - (-np.log(price) / tau)) < 1e-14
        assert abs(omap.expected(x)[row] - zero_rate(phi, psi, x, tau)) < 1e-14


def test_observation_map_requires_increasing_maturities():
    spec = get_family("cir").build_spec(CIR_TRUTH)
    with pytest.raises(ValueError):
        build_observation_map(spec, np.array([5.0, 1.0]))
