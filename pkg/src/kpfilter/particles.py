"""Weighted-cloud primitives: moments, jitter kernels, weights, resampling.

All operations treat a cloud as a ``(n, dim)`` matrix of parameter rows plus
a normalized weight vector; per-particle side arrays (filter states, factor
particles) ride along through resampling as *attachments*.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array

MAX_BOUND_TRIES = 100


class WeightCollapseError(RuntimeError):
    """Raised when every particle carries zero (or undefined) weight."""


@dataclass
class ParticleCloud:
    """Parameter particles with weights and resampling-aligned attachments."""

    thetas: np.ndarray
    weights: np.ndarray | None = None
    attachments: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))
        n = self.thetas.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            self.weights = as_float_array(self.weights, "weights", shape=(n,))
        for key, arr in self.attachments.items():
            if arr.shape[0] != n:
                raise ValueError(
                    f"attachment {key!r} has leading dimension {arr.shape[0]}, expected {n}"
                )

    @property
    def n(self) -> int:
        return self.thetas.shape[0]

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]

    def take(self, indices: np.ndarray) -> "ParticleCloud":
        """Cloud built from the given particle indices, with uniform weights."""
        return ParticleCloud(
            thetas=self.thetas[indices],
            weights=None,
            attachments={k: v[indices] for k, v in self.attachments.items()},
        )


def cloud_moments(thetas, weights=None):
    """Weighted mean and population covariance of a particle cloud.

    Uses the plain weighted second moment about the weighted mean (no
    small-sample correction), so a single particle has zero covariance and
    two equal-weight particles at ``+-1`` give variance 1.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    n = thetas.shape[0]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = as_float_array(weights, "weights", shape=(n,))
        total = weights.sum()
        if not total > 0:
            raise WeightCollapseError("weights sum to zero")
        weights = weights / total
    mean = weights @ thetas
    centered = thetas - mean
    cov = (centered * weights[:, None]).T @ centered
    return mean, 0.5 * (cov + cov.T)


def _inside(thetas, bounds):
    return np.all((thetas >= bounds[:, 0]) & (thetas <= bounds[:, 1]), axis=1)


def _rejection_fill(draw, n, bounds, rng):
    """Redraw out-of-bounds rows up to a retry budget, then clamp the stragglers.

    ``draw`` maps ``(row_indices, rng) -> proposals`` for those rows.  The
    returned array always lies inside the bounds box.
    """
    out = draw(np.arange(n), rng)
    alive = ~_inside(out, bounds)
    tries = 0
    while np.any(alive) and tries < MAX_BOUND_TRIES:
        idx = np.nonzero(alive)[0]
        out[idx] = draw(idx, rng)
        alive[idx] = ~_inside(out[idx], bounds)
        tries += 1
    if np.any(alive):
        np.clip(out, bounds[:, 0], bounds[:, 1], out=out)
    return out


def shrinkage_jitter(thetas, discount, bounds, rng, mean=None, cov=None):
    """Moment-preserving jitter: shrink toward the mean, add matched noise.

    Each row moves to ``a * theta + (1 - a) * mean`` plus a draw from
    ``N(0, (1 - a^2) * cov)`` with the full cloud covariance, so the cloud's
    first two moments are preserved in expectation.  Draws landing outside
    ``bounds`` are rejected and redrawn (then clamped after a retry budget).
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    bounds = as_float_array(bounds, "bounds", shape=(thetas.shape[1], 2))
    a = float(discount)
    if not 0.0 < a <= 1.0:
        raise ValueError(f"discount must lie in (0, 1], got {discount}")
    if mean is None or cov is None:
        mean, cov = cloud_moments(thetas)
    centers = a * thetas + (1.0 - a) * mean
    spread = (1.0 - a * a) * cov
    w, v = np.linalg.eigh(0.5 * (spread + spread.T))
    factor = v * np.sqrt(np.maximum(w, 0.0))

    def draw(idx, rng):
        z = rng.standard_normal((idx.shape[0], thetas.shape[1]))
        return centers[idx] + z @ factor.T

    return _rejection_fill(draw, thetas.shape[0], bounds, rng)


def random_walk_jitter(thetas, scales, bounds, rng):
    """Componentwise Gaussian random-walk jitter with per-coordinate scales.

    ``scales`` are standard deviations, broadcast over rows.  Out-of-bounds
    draws are rejected per row and finally clamped.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    dim = thetas.shape[1]
    bounds = as_float_array(bounds, "bounds", shape=(dim, 2))
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (dim,))
    if np.any(scales < 0):
        raise ValueError("jitter scales must be nonnegative")

    def draw(idx, rng):
        return thetas[idx] + scales * rng.standard_normal((idx.shape[0], dim))

    return _rejection_fill(draw, thetas.shape[0], bounds, rng)


def walk_scales(cov_diag, discount, floor_var, cap_var):
    """Random-walk jitter scales: ``(1 - a^2) * var`` clamped to [floor, cap]."""
    var = (1.0 - float(discount) ** 2) * np.asarray(cov_diag, dtype=np.float64)
    return np.sqrt(np.clip(var, floor_var, cap_var))


def normalize_log_weights(log_weights):
    """Stable normalization of log-weights.

    Returns ``(weights, log_total)`` where ``log_total`` is the log of the
    mean unnormalized weight's total, i.e. ``logsumexp(log_weights)``.
    Raises :class:`WeightCollapseError` when no particle has positive weight
    and :class:`ValueError` on NaN input.
    """
    logw = np.asarray(log_weights, dtype=np.float64)
    if np.any(np.isnan(logw)):
        raise ValueError("log-weights contain NaN")
    top = np.max(logw)
    if top == -np.inf:
        raise WeightCollapseError("all log-weights are -inf")
    shifted = np.exp(logw - top)
    total = shifted.sum()
    return shifted / total, float(top + np.log(total))


def resample_multinomial(weights, n, rng):
    """Independent draws from the weight distribution; returns particle indices."""
    weights = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="left")


def resample_systematic(weights, n, rng):
    """Single uniform offset, evenly spaced probes; lower-variance alternative."""
    weights = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    probes = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cdf, probes, side="left")


_RESAMPLERS = {"multinomial": resample_multinomial, "systematic": resample_systematic}


def resample_cloud(cloud: ParticleCloud, rng, method: str = "multinomial") -> ParticleCloud:
    """Resample a cloud (and its attachments) back to uniform weights."""
    try:
        sampler = _RESAMPLERS[method]
    except KeyError:
        raise ValueError(
            f"unknown resampling method {method!r}; available: {sorted(_RESAMPLERS)}"
        ) from None
    idx = sampler(cloud.weights, cloud.n, rng)
    return cloud.take(idx)


def pf_inner_step(particles, log_weights, propagate, log_obs_density, rng):
    """One bootstrap step of an inner factor-particle filter.

    Propagates the particles, scores them against the observation, reports
    the self-normalized marginal log-likelihood of the step, and resamples
    back to uniform weights.

    Parameters
    ----------
    particles : (m, d) ndarray
    log_weights : (m,) ndarray
        Incoming log-weights (typically uniform after the previous resample).
    propagate : callable
        ``(particles, rng) -> (m, d)`` transition sampler.
    log_obs_density : callable
        ``(particles) -> (m,)`` observation log-density at the propagated set.
    rng : numpy.random.Generator

    Returns
    -------
    (particles, log_weights, log_marginal) : tuple
        Resampled particles, uniform log-weights, and the step's marginal
        log-likelihood estimate.
    """
    moved = propagate(particles, rng)
    logl = np.asarray(log_obs_density(moved), dtype=np.float64)
    combined = np.asarray(log_weights, dtype=np.float64) + logl
    weights, log_total = normalize_log_weights(combined)
    prev_weights, prev_total = normalize_log_weights(np.asarray(log_weights, dtype=np.float64))
    log_marginal = log_total - prev_total
    idx = resample_multinomial(weights, moved.shape[0], rng)
    m = moved.shape[0]
    return moved[idx], np.full(m, -np.log(m)), float(log_marginal)
