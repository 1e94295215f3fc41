"""Reference Kalman filter for affine yield observations.

This module keeps the textbook covariance form: explicit innovation
covariance, Cholesky solves, Joseph-form posterior covariance.  The particle
engine uses a compressed information-form variant of the same recursion; this
implementation is the readable ground truth the engine is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._validation import as_float_array, check_positive
from .models import ObservationMap, TransitionMoments

LOG_2PI = float(np.log(2.0 * np.pi))
COND_LIMIT = 1e14
NEG_EIG_TOL = -1e-10


class DegenerateObservationError(RuntimeError):
    """Raised when the innovation covariance is numerically singular."""


@dataclass(frozen=True)
class GaussianState:
    """Gaussian factor belief with mean ``(d,)`` and covariance ``(d, d)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = as_float_array(self.mean, "mean", ndim=1)
        cov = as_float_array(self.cov, "cov", shape=(mean.shape[0], mean.shape[0]))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class UpdateResult:
    """Posterior state plus the innovation diagnostics of one update."""

    state: GaussianState
    loglik: float
    innovation: np.ndarray
    innovation_cov: np.ndarray


def psd_repair(cov: np.ndarray) -> np.ndarray:
    """Clip tiny negative eigenvalues of a symmetric matrix to zero.

    Eigenvalues below the tolerance ``-1e-10`` are treated as genuine
    indefiniteness and raise, rather than being silently absorbed.
    """
    cov = 0.5 * (cov + np.asarray(cov).T)
    w, v = np.linalg.eigh(cov)
    if np.any(w < NEG_EIG_TOL):
        raise ValueError(
            f"covariance has a significantly negative eigenvalue ({w.min():.3e})"
        )
    if np.any(w < 0.0):
        cov = (v * np.maximum(w, 0.0)) @ v.T
        cov = 0.5 * (cov + cov.T)
    return cov


def predict(state: GaussianState, moments: TransitionMoments) -> GaussianState:
    """Propagate the belief through one linear-Gaussian transition."""
    F, offset, Q = moments.F, moments.offset, moments.Q
    mean = F @ state.mean + offset
    cov = F @ state.cov @ F.T + Q
    return GaussianState(mean=mean, cov=psd_repair(cov))


def update(state: GaussianState, y, H, H0, obs_var: float) -> UpdateResult:
    """Condition the belief on one observation vector ``y = H x + H0 + noise``.

    ``obs_var`` is the common variance of the independent observation errors.
    Raises :class:`DegenerateObservationError` when the innovation covariance
    has a condition estimate above 1e14 or its factorization fails.
    """
    y = as_float_array(y, "y", ndim=1)
    H = as_float_array(H, "H", shape=(y.shape[0], state.dim))
    H0 = as_float_array(H0, "H0", shape=(y.shape[0],))
    obs_var = check_positive(obs_var, "obs_var")
    n_obs = y.shape[0]

    innovation = y - H @ state.mean - H0
    PHt = state.cov @ H.T
    S = H @ PHt + obs_var * np.eye(n_obs)
    S = 0.5 * (S + S.T)
    if np.linalg.cond(S) > COND_LIMIT:
        raise DegenerateObservationError(
            "innovation covariance is numerically singular (condition > 1e14)"
        )
    try:
        factor = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - cond check fires first
        raise DegenerateObservationError(str(exc)) from exc
    gain = cho_solve(factor, PHt.T).T
    mean = state.mean + gain @ innovation
    closure = np.eye(state.dim) - gain @ H
    cov = closure @ state.cov @ closure.T + obs_var * (gain @ gain.T)
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    maha = innovation @ cho_solve(factor, innovation)
    loglik = -0.5 * (n_obs * LOG_2PI + log_det + maha)
    return UpdateResult(
        state=GaussianState(mean=mean, cov=psd_repair(cov)),
        loglik=float(loglik),
        innovation=innovation,
        innovation_cov=S,
    )


@dataclass(frozen=True)
class FilterResult:
    """Per-step marginal log-likelihoods and the final (optionally all) states."""

    logliks: np.ndarray
    state: GaussianState
    states: tuple[GaussianState, ...] | None = None


def filter_pass(
    y: np.ndarray,
    transitions: TransitionMoments
    | Sequence[TransitionMoments]
    | Callable[[int, GaussianState], TransitionMoments],
    obs_map: ObservationMap,
    obs_var: float,
    init: GaussianState,
    *,
    return_states: bool = False,
) -> FilterResult:
    """Run the predict/update recursion over an observation window.

    Parameters
    ----------
    y : (K, L) ndarray
        One observation vector per step.
    transitions : TransitionMoments, sequence, or callable
        Either constant moments, one entry per step, or a callable
        ``(step_index, prior_state) -> TransitionMoments`` evaluated on the
        belief carried into each step (used when the transition covariance
        depends on the current factor estimate).
    obs_map : ObservationMap
        Affine observation map applied at every step.
    obs_var : float
        Observation-error variance.
    init : GaussianState
        Belief before the first transition.
    return_states : bool
        Also record the posterior state after every update.
    """
    y = as_float_array(y, "y", ndim=2)
    n_steps = y.shape[0]
    if y.shape[1] != obs_map.n_obs:
        raise ValueError(
            f"y has {y.shape[1]} columns but the observation map expects {obs_map.n_obs}"
        )
    if callable(transitions):
        get_moments = transitions
    elif isinstance(transitions, TransitionMoments):
        get_moments = lambda k, state: transitions
    else:
        seq = list(transitions)
        if len(seq) != n_steps:
            raise ValueError(f"expected {n_steps} transition entries, got {len(seq)}")
        get_moments = lambda k, state: seq[k]

    state = init
    logliks = np.empty(n_steps)
    states = [] if return_states else None
    for k in range(n_steps):
        state = predict(state, get_moments(k, state))
        result = update(state, y[k], obs_map.H, obs_map.H0, obs_var)
        state = result.state
        logliks[k] = result.loglik
        if states is not None:
            states.append(state)
    return FilterResult(
        logliks=logliks,
        state=state,
        states=tuple(states) if states is not None else None,
    )
