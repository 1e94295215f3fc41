"""Closed-form reference values used across the test modules.

Everything here is computed through formulas independent of the library
code paths under test, so agreement is evidence rather than tautology.
"""

import numpy as np

from kpfilter.riccati import RiccatiParams


def cir_closed_form(alpha, beta, sigma, tau):
    """Exponents of the square-root short-rate bond price.

    Returns ``(phi, psi)`` with the bond price ``exp(-phi - psi * x)``,
    using the standard discount-bond solution of the square-root model.
    """
    gbar = np.sqrt(alpha * alpha + 2.0 * sigma * sigma)
    den = (gbar + alpha) * np.expm1(gbar * tau) + 2.0 * gbar
    psi = 2.0 * np.expm1(gbar * tau) / den
    a_fac = (2.0 * gbar * np.exp(0.5 * (alpha + gbar) * tau) / den) ** (
        2.0 * alpha * beta / (sigma * sigma)
    )
    phi = -np.log(a_fac)
    return phi, psi


def cir_exact_transition(alpha, beta, sigma, x, delta):
    """Exact conditional mean and variance of the square-root diffusion."""
    decay = np.exp(-alpha * delta)
    mean = x * decay + beta * (1.0 - decay)
    var = (sigma * sigma / alpha) * x * (decay - decay * decay) + (
        sigma * sigma / (2.0 * alpha)
    ) * beta * (1.0 - decay) ** 2
    return mean, var


def cir_frozen_variance(alpha, sigma, x, delta):
    """One-step variance when the square-root driver is frozen at ``x``."""
    return sigma * sigma * max(x, 0.0) * -np.expm1(-2.0 * alpha * delta) / (2.0 * alpha)


def ou_psi(alpha_i, tau):
    """Loading of a constant-diffusion factor with mean reversion ``alpha_i``."""
    return -np.expm1(-alpha_i * tau) / alpha_i


def scalar_benchmark_params():
    """The one-dimensional Riccati benchmark with a known logistic-type solution.

    The loading equation reads ``psi' = -psi^2 - psi + 1`` with ``psi(0) = 0``;
    in the solver's convention that is quadratic slot -2, linear slot -1 and
    constant slot gamma = -1.
    """
    return RiccatiParams(
        a=np.zeros((1, 1)),
        b=np.zeros(1),
        c=0.0,
        alpha=np.array([[[-2.0]]]),
        beta=np.array([[-1.0]]),
        gamma=np.array([-1.0]),
    )


def scalar_benchmark_solution(t):
    """Closed form for ``psi' = -psi^2 - psi + 1, psi(0) = 0``."""
    root = np.sqrt(5.0)
    grow = np.exp(root * np.asarray(t, dtype=np.float64))
    return 2.0 * (grow - 1.0) / ((root + 1.0) * grow + root - 1.0)


SCALAR_BENCHMARK_TARGETS = {
    0.25: 0.2172199774091720580993,
    0.5: 0.3698063038171550606067,
    1.0: 0.5303297566215280387775,
    2.0: 0.6083200584862979200577,
}

SCALAR_BENCHMARK_TAYLOR = [
    0.0,
    1.0,
    -1.0 / 2.0,
    -1.0 / 6.0,
    7.0 / 24.0,
    -1.0 / 24.0,
    -17.0 / 144.0,
    67.0 / 1008.0,
]


def uniform_prior_std(bounds):
    """Standard deviation of a uniform law given ``(low, high)`` pairs."""
    arr = np.asarray(bounds, dtype=np.float64)
    return (arr[:, 1] - arr[:, 0]) / np.sqrt(12.0)
