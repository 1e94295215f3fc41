"""Synthetic factor paths and noisy yield observations.

Exact transition samplers are used wherever the model admits one (the
square-root one-factor process, Gaussian factor models); the stochastic
volatility model falls back to a frozen-diffusion substep scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ._validation import as_float_array, check_increasing, check_positive
from .models import (
    AffineModelSpec,
    ObservationMap,
    build_observation_map,
    cir_exact_step,
    decay_integrals,
    get_family,
)

TRADING_DT = 1.0 / 252.0


@dataclass(frozen=True)
class SimulationTruth:
    """Ground truth attached to a simulated series for later scoring.

    ``params`` maps parameter names to the values used per segment; a run
    with a single regime has one segment starting at step 0.
    """

    family: str
    segments: tuple[tuple[int, dict[str, float]], ...]
    x_path: np.ndarray
    dt: float
    obs_var: float
    seed: int | None = None

    @property
    def params(self) -> dict[str, float]:
        """Parameters of the first segment (the whole run when there is one)."""
        return dict(self.segments[0][1])


@dataclass(frozen=True)
class ObservationSeries:
    """Observed yield panel: one row per step, one column per maturity."""

    times: np.ndarray
    maturities: np.ndarray
    values: np.ndarray
    obs_var: float
    truth: SimulationTruth | None = field(default=None, compare=False)

    def __post_init__(self):
        times = as_float_array(self.times, "times", ndim=1)
        maturities = check_increasing(self.maturities, "maturities")
        values = as_float_array(
            self.values, "values", shape=(times.shape[0], maturities.shape[0])
        )
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "maturities", maturities)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "obs_var", check_positive(self.obs_var, "obs_var"))

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def n_obs(self) -> int:
        return self.maturities.shape[0]


def simulate_cir(alpha, beta, sigma, x0, n_steps, dt, rng):
    """Exact path of the square-root process, including the starting value.

    Returns an array of shape ``(n_steps + 1,)``.
    """
    check_positive(dt, "dt")
    path = np.empty(n_steps + 1)
    path[0] = float(x0)
    for k in range(n_steps):
        path[k + 1] = cir_exact_step(alpha, beta, sigma**2, path[k], dt, rng)
    return path


def simulate_ou(alphas, betas, Sigma, x0, n_steps, dt, rng):
    """Exact Gaussian path of a constant-diffusion mean-reverting process.

    Returns an array of shape ``(n_steps + 1, d)``.
    """
    alphas = as_float_array(alphas, "alphas", ndim=1)
    d = alphas.shape[0]
    betas = as_float_array(betas, "betas", shape=(d,))
    Sigma = as_float_array(Sigma, "Sigma", shape=(d, d))
    check_positive(dt, "dt")
    f = np.exp(-alphas * dt)
    offset = (1.0 - f) * betas
    Q = (Sigma @ Sigma.T) * decay_integrals(alphas, dt)
    w, v = np.linalg.eigh(0.5 * (Q + Q.T))
    factor = v * np.sqrt(np.maximum(w, 0.0))
    path = np.empty((n_steps + 1, d))
    path[0] = as_float_array(x0, "x0", shape=(d,))
    noise = rng.standard_normal((n_steps, d)) @ factor.T
    for k in range(n_steps):
        path[k + 1] = f * path[k] + offset + noise[k]
    return path


def simulate_sqrt_factor(alphas, betas, SigmaTilde, x0, n_steps, dt, rng, substeps=16):
    """Frozen-diffusion substep path for square-root-scaled diffusion models.

    Within each substep the diffusion matrix is held at its value implied by
    the current driver level, the driver is floored at zero, and the exact
    Gaussian transition of the frozen model is applied.  Returns shape
    ``(n_steps + 1, d)``.
    """
    alphas = as_float_array(alphas, "alphas", ndim=1)
    d = alphas.shape[0]
    betas = as_float_array(betas, "betas", shape=(d,))
    SigmaTilde = as_float_array(SigmaTilde, "SigmaTilde", shape=(d, d))
    check_positive(dt, "dt")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    sub = dt / substeps
    f = np.exp(-alphas * sub)
    offset = (1.0 - f) * betas
    base = (SigmaTilde @ SigmaTilde.T) * decay_integrals(alphas, sub)
    w, v = np.linalg.eigh(0.5 * (base + base.T))
    factor = v * np.sqrt(np.maximum(w, 0.0))
    path = np.empty((n_steps + 1, d))
    path[0] = as_float_array(x0, "x0", shape=(d,))
    x = path[0].copy()
    for k in range(n_steps):
        for _ in range(substeps):
            scale = np.sqrt(max(x[0], 0.0))
            z = rng.standard_normal(d)
            x = f * x + offset + scale * (factor @ z)
            x[0] = max(x[0], 0.0)
        path[k + 1] = x
    return path


def simulate_factors(spec: AffineModelSpec, x0, n_steps, dt, rng, substeps=16):
    """Dispatch to the exact sampler available for the spec's regime."""
    if spec.scaled_diffusion:
        if spec.dim == 1:
            return simulate_cir(
                spec.alphas[0], spec.beta[0], spec.SigmaTilde[0, 0], np.asarray(x0).reshape(-1)[0],
                n_steps, dt, rng,
            )[:, None]
        return simulate_sqrt_factor(
            spec.alphas, spec.beta, spec.SigmaTilde, x0, n_steps, dt, rng, substeps
        )
    return simulate_ou(spec.alphas, spec.beta, spec.Sigma, x0, n_steps, dt, rng)


def make_observations(
    x_path: np.ndarray,
    obs_map: ObservationMap,
    obs_var: float,
    rng,
    *,
    dt: float = TRADING_DT,
    truth: SimulationTruth | None = None,
) -> ObservationSeries:
    """Noisy yields along a factor path.

    ``x_path`` has shape ``(K + 1, d)``; the starting value stays latent and
    observations are emitted at steps ``1..K`` with i.i.d. ``N(0, obs_var)``
    errors per maturity.
    """
    x_path = np.atleast_2d(np.asarray(x_path, dtype=np.float64))
    obs_var = check_positive(obs_var, "obs_var")
    n_steps = x_path.shape[0] - 1
    clean = x_path[1:] @ obs_map.H.T + obs_map.H0
    noise = np.sqrt(obs_var) * rng.standard_normal(clean.shape)
    times = dt * np.arange(1, n_steps + 1)
    return ObservationSeries(
        times=times,
        maturities=obs_map.maturities,
        values=clean + noise,
        obs_var=obs_var,
        truth=truth,
    )


def simulate_series(
    family,
    params: Mapping[str, float] | list,
    maturities,
    n_steps: int,
    obs_var: float,
    seed=None,
    *,
    dt: float = TRADING_DT,
    x0=None,
    substeps: int = 16,
    change_points: Mapping[int, Mapping[str, float]] | None = None,
    riccati_order: int = 10,
    riccati_tol: float = 1e-12,
) -> ObservationSeries:
    """End-to-end synthetic experiment: factor path, observation map, noisy panel.

    ``change_points`` maps a step index to a replacement parameter mapping:
    that step is the first whose transition and observation use the new
    parameters, and the factor path continues across the change without
    restarting.  The returned series carries a :class:`SimulationTruth` with
    one entry per segment, keyed by each segment's first step.
    """
    family = get_family(family)
    rng = np.random.default_rng(seed)
    base = family.full_params(params if isinstance(params, Mapping) else dict(params))
    switches = sorted((int(k), dict(v)) for k, v in (change_points or {}).items())
    for step, _ in switches:
        if not 1 <= step <= n_steps:
            raise ValueError(f"change point step {step} outside [1, {n_steps}]")

    segments: list[tuple[int, dict[str, float]]] = [(1, dict(base))]
    for step, override in switches:
        segments.append((step, family.full_params({**segments[-1][1], **override})))

    if x0 is None:
        x0 = family.default_x0_mean
    x0 = as_float_array(x0, "x0", shape=(family.dim,))

    # x_path[j] is the factor value entering step j + 1; segment boundaries are
    # the first affected observation steps, so segment i covers panel rows
    # [first_i - 1, first_{i+1} - 1).
    x_path = np.empty((n_steps + 1, family.dim))
    x_path[0] = x0
    maturities = check_increasing(maturities, "maturities")
    clean = np.empty((n_steps, maturities.shape[0]))
    ends = [first for first, _ in segments[1:]] + [n_steps + 1]
    for (first, seg_params), stop in zip(segments, ends):
        if stop <= first:
            continue
        spec = family.build_spec(seg_params)
        chunk = simulate_factors(spec, x_path[first - 1], stop - first, dt, rng, substeps)
        x_path[first - 1 : stop] = chunk
        obs_map = build_observation_map(
            spec, maturities, order=riccati_order, tol=riccati_tol
        )
        clean[first - 1 : stop - 1] = x_path[first:stop] @ obs_map.H.T + obs_map.H0

    noise = np.sqrt(obs_var) * rng.standard_normal(clean.shape)
    try:
        stored_seed = None if seed is None else int(seed)
    except (TypeError, ValueError):
        stored_seed = None
    truth = SimulationTruth(
        family=family.name,
        segments=tuple((s, dict(p)) for s, p in segments),
        x_path=x_path,
        dt=dt,
        obs_var=obs_var,
        seed=stored_seed,
    )
    return ObservationSeries(
        times=dt * np.arange(1, n_steps + 1),
        maturities=maturities,
        values=clean + noise,
        obs_var=obs_var,
        truth=truth,
    )
