"""Taylor-series solver for matrix Riccati ODE systems of exponentially affine bond prices.

The solver integrates the coupled scalar/vector system

    d/dt phi(t)   = 1/2 psi' a psi + b' psi - c
    d/dt psi_i(t) = 1/2 psi' alpha_i psi + beta_i' psi - gamma_i

with initial data ``psi(0) = u`` and ``phi(0) = 0``, by composing short Taylor
steps whose length adapts to the magnitude of the highest retained coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, check_increasing, check_symmetric

DT_MIN_DEFAULT = 1e-6
DT_MAX_DEFAULT = 0.5
BLOWUP_DEFAULT = 1e12


class RiccatiBlowupError(RuntimeError):
    """Raised when Taylor coefficients or the solution exceed the blow-up threshold."""


@dataclass(frozen=True)
class RiccatiParams:
    """Coefficient arrays of the affine Riccati system.

    Attributes
    ----------
    a : (d, d) ndarray
        Symmetric quadratic coefficient of the ``phi`` equation.
    b : (d,) ndarray
        Linear coefficient of the ``phi`` equation.
    c : float
        Constant forcing of the ``phi`` equation (entering with a minus sign).
    alpha : (d, d, d) ndarray
        ``alpha[i]`` is the symmetric quadratic coefficient of the ``psi_i`` equation.
    beta : (d, d) ndarray
        ``beta[i]`` is the linear coefficient vector of the ``psi_i`` equation.
    gamma : (d,) ndarray
        Constant forcings of the ``psi`` equations (entering with a minus sign).
    """

    a: np.ndarray
    b: np.ndarray
    c: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        b = as_float_array(self.b, "b", ndim=1)
        d = b.shape[0]
        a = check_symmetric(as_float_array(self.a, "a", shape=(d, d)), "a")
        alpha = as_float_array(self.alpha, "alpha", shape=(d, d, d))
        for i in range(d):
            check_symmetric(alpha[i], f"alpha[{i}]")
        beta = as_float_array(self.beta, "beta", shape=(d, d))
        gamma = as_float_array(self.gamma, "gamma", shape=(d,))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

    @property
    def dim(self) -> int:
        return self.b.shape[0]


@dataclass(frozen=True)
class RiccatiSolution:
    """Solution values of ``phi`` and ``psi`` at the requested horizons."""

    horizons: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    n_steps: int = field(default=0, compare=False)


def taylor_coeffs(params: RiccatiParams, u, order: int):
    """Taylor coefficients of ``phi`` and ``psi`` about the current point.

    Returns
    -------
    C : (order + 1,) ndarray
        Coefficients of ``phi``; ``C[0]`` is zero because ``phi`` accumulates
        separately across steps.
    D : (order + 1, d) ndarray
        Coefficients of ``psi`` with ``D[0] = u``.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    d = params.dim
    u = as_float_array(u, "u", shape=(d,))
    C = np.zeros(order + 1)
    D = np.zeros((order + 1, d))
    D[0] = u
    a, b, alpha, beta = params.a, params.b, params.alpha, params.beta
    C[1] = 0.5 * u @ a @ u + b @ u - params.c
    for i in range(d):
        D[1, i] = 0.5 * u @ alpha[i] @ u + beta[i] @ u - params.gamma[i]
    for k in range(1, order):
        # The quadratic terms share the Cauchy convolution of the psi coefficients.
        conv_a = 0.0
        conv_alpha = np.zeros(d)
        for n in range(k + 1):
            left = D[n]
            right = D[k - n]
            conv_a += left @ a @ right
            for i in range(d):
                conv_alpha[i] += left @ alpha[i] @ right
        C[k + 1] = (0.5 * conv_a + b @ D[k]) / (k + 1)
        D[k + 1] = (0.5 * conv_alpha + beta @ D[k]) / (k + 1)
    return C, D


def _step_size(tail_mag, remaining, order, tol, dt_min, dt_max):
    """Adaptive step length: error heuristic clamped to [dt_min, dt_max], capped by remaining."""
    if tail_mag > 0.0:
        dt = (tol / tail_mag) ** (1.0 / order)
        dt = min(max(dt, dt_min), dt_max)
    else:
        dt = dt_max
    return min(dt, remaining)


def solve(
    params: RiccatiParams,
    horizons,
    u0=None,
    *,
    order: int = 10,
    tol: float = 1e-12,
    dt_min: float = DT_MIN_DEFAULT,
    dt_max: float = DT_MAX_DEFAULT,
    blowup: float = BLOWUP_DEFAULT,
) -> RiccatiSolution:
    """Integrate the Riccati system and report ``(phi, psi)`` at each horizon.

    A single sweep runs from 0 to the largest horizon; intermediate horizons
    are landed on exactly because the step length never overshoots the next
    requested point.

    Parameters
    ----------
    params : RiccatiParams
        System coefficients.
    horizons : array-like
        Strictly increasing positive horizons at which to record the solution.
    u0 : array-like, optional
        Initial value of ``psi``; defaults to zeros.
    order : int
        Number of Taylor coefficients retained per step.
    tol : float
        Target truncation error per step.
    dt_min, dt_max : float
        Clamp applied to the adaptive step-length rule.
    blowup : float
        Magnitude threshold on coefficients and solution values beyond which
        a :class:`RiccatiBlowupError` is raised.

    Raises
    ------
    RiccatiBlowupError
        If the expansion or the solution leaves the finite trust region.
    """
    horizons = check_increasing(horizons, "horizons")
    if horizons.size == 0:
        raise ValueError("horizons must be non-empty")
    if horizons[0] <= 0:
        raise ValueError("horizons must be positive")
    d = params.dim
    u = np.zeros(d) if u0 is None else as_float_array(u0, "u0", shape=(d,)).copy()
    phi = 0.0
    t = 0.0
    n_steps = 0
    phis = np.empty(horizons.size)
    psis = np.empty((horizons.size, d))
    powers = np.arange(order, 0, -1)
    for j, target in enumerate(horizons):
        while target - t > 1e-12:
            remaining = target - t
            C, D = taylor_coeffs(params, u, order)
            tail = max(np.abs(C[order]), np.max(np.abs(D[order])))
            if not np.isfinite(tail) or tail > blowup:
                raise RiccatiBlowupError(
                    f"Taylor coefficients exploded near t={t:.6g} (magnitude {tail:.3g})"
                )
            dt = _step_size(tail, remaining, order, tol, dt_min, dt_max)
            # Horner evaluation of the increment polynomials at dt.
            phi_inc = 0.0
            u_new = np.zeros(d)
            for k in powers:
                phi_inc = (phi_inc + C[k]) * dt
                u_new = (u_new + D[k]) * dt
            phi += phi_inc
            u = u_new + D[0]
            t = target if dt >= remaining * (1 - 1e-12) else t + dt
            n_steps += 1
            if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > blowup:
                raise RiccatiBlowupError(
                    f"solution exceeded blow-up threshold near t={t:.6g}"
                )
        phis[j] = phi
        psis[j] = u
    return RiccatiSolution(horizons=horizons, phi=phis, psi=psis, n_steps=n_steps)
