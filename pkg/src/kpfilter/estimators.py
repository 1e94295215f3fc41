"""Online Bayesian calibration estimators for affine yield-curve models.

The estimators follow the scikit-learn convention: constructors only store
hyperparameters, ``fit`` consumes an :class:`~kpfilter.simulate.ObservationSeries`
and sets trailing-underscore attributes, chief among them a per-step
:class:`PosteriorTrace`.

* :class:`KalmanParticleFilter` marginalizes the factors per parameter
  particle with a Kalman recursion and alternates between a replay phase
  (moment-preserving jitter plus full re-filtering of the current segment)
  and a recursive phase (clamped random-walk jitter plus a single carried
  Kalman step).
* :class:`ChangePointKalmanParticleFilter` adds a likelihood-drop reset rule
  for piecewise-constant parameters.
* :class:`NestedParticleFilter` is the likelihood-free baseline: factor
  particles nested inside each parameter particle.
* :class:`GridPosteriorOracle` computes the exact sequential posterior on a
  fixed parameter grid for validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from . import _engine
from .kalman import GaussianState, filter_pass
from .models import build_observation_map, get_family, transition_moments
from .particles import (
    WeightCollapseError,
    cloud_moments,
    normalize_log_weights,
    random_walk_jitter,
    resample_multinomial,
    resample_systematic,
    shrinkage_jitter,
    walk_scales,
)
from .simulate import ObservationSeries

PHASE_REPLAY = "replay"
PHASE_RECURSIVE = "recursive"
PHASE_NESTED = "nested"


@dataclass(frozen=True)
class PosteriorTrace:
    """Per-step record of a sequential calibration run.

    ``steps`` holds 1-based global step indices.  ``switch_steps`` lists, per
    segment, the first step handled recursively; ``reset_steps`` lists the
    steps at which a parameter change was declared.
    """

    param_names: tuple[str, ...]
    steps: np.ndarray
    phase: np.ndarray
    reset: np.ndarray
    max_loglik: np.ndarray
    theta_mean: np.ndarray
    theta_std: np.ndarray
    jitter_std: np.ndarray
    state_mean: np.ndarray | None
    state_var: np.ndarray | None
    switch_steps: tuple[int, ...] = ()
    reset_steps: tuple[int, ...] = ()

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]

    @property
    def switch_step(self):
        """First step of the recursive phase in the first segment, if reached."""
        return self.switch_steps[0] if self.switch_steps else None


def total_variation(p, q) -> float:
    """Total variation distance between two discrete distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.sum(np.abs(p - q)))


def _weighted_stats(values, weights):
    """Weighted mean and standard deviation along axis 0."""
    mean = weights @ values
    var = weights @ (values - mean) ** 2
    return mean, np.sqrt(np.maximum(var, 0.0))


class _TraceRecorder:
    """Accumulates per-step rows and freezes them into a PosteriorTrace."""

    def __init__(self, n_steps, param_names, state_dim, record_state):
        self.param_names = tuple(param_names)
        k, d = n_steps, len(param_names)
        self.steps = np.arange(1, k + 1)
        self.phase = np.empty(k, dtype="<U9")
        self.reset = np.zeros(k, dtype=bool)
        self.max_loglik = np.full(k, np.nan)
        self.theta_mean = np.full((k, d), np.nan)
        self.theta_std = np.full((k, d), np.nan)
        self.jitter_std = np.full((k, d), np.nan)
        if record_state:
            self.state_mean = np.full((k, state_dim), np.nan)
            self.state_var = np.full((k, state_dim), np.nan)
        else:
            self.state_mean = None
            self.state_var = None
        self.switch_steps: list[int] = []
        self.reset_steps: list[int] = []

    def record(self, row, phase, max_ll, mean, std, jitter, reset=False,
               state_mean=None, state_var=None):
        self.phase[row] = phase
        self.reset[row] = reset
        self.max_loglik[row] = max_ll
        self.theta_mean[row] = mean
        self.theta_std[row] = std
        self.jitter_std[row] = jitter
        if self.state_mean is not None and state_mean is not None:
            self.state_mean[row] = state_mean
            self.state_var[row] = state_var

    def freeze(self) -> PosteriorTrace:
        return PosteriorTrace(
            param_names=self.param_names,
            steps=self.steps,
            phase=self.phase,
            reset=self.reset,
            max_loglik=self.max_loglik,
            theta_mean=self.theta_mean,
            theta_std=self.theta_std,
            jitter_std=self.jitter_std,
            state_mean=self.state_mean,
            state_var=self.state_var,
            switch_steps=tuple(self.switch_steps),
            reset_steps=tuple(self.reset_steps),
        )


class _ParamSpace:
    """Free/fixed split of a family's parameters plus prior bounds."""

    def __init__(self, family, fixed, priors):
        self.family = family
        fixed = dict(fixed or {})
        unknown = set(fixed) - set(family.param_names)
        if unknown:
            raise ValueError(f"fixed contains unknown parameter(s): {sorted(unknown)}")
        self.fixed = {k: float(v) for k, v in fixed.items()}
        self.free_names = tuple(n for n in family.param_names if n not in self.fixed)
        if not self.free_names:
            raise ValueError("at least one parameter must be left free")
        merged = dict(family.default_priors)
        merged.update(priors or {})
        bounds = []
        for name in self.free_names:
            if name not in merged:
                raise ValueError(f"no prior bounds for parameter {name!r}")
            lo, hi = (float(v) for v in merged[name])
            if not lo < hi:
                raise ValueError(f"prior bounds for {name!r} must satisfy lo < hi")
            bounds.append((lo, hi))
        self.bounds = np.array(bounds)
        names = list(family.param_names)
        self.free_idx = np.array([names.index(n) for n in self.free_names], dtype=np.intp)
        fixed_names = [n for n in names if n in self.fixed]
        self.fixed_idx = np.array([names.index(n) for n in fixed_names], dtype=np.intp)
        self.fixed_vals = np.array([self.fixed[n] for n in fixed_names])

    @property
    def dim(self) -> int:
        return len(self.free_names)

    def expand(self, thetas_free: np.ndarray) -> np.ndarray:
        """Full parameter matrix with fixed columns filled in."""
        n = thetas_free.shape[0]
        full = np.empty((n, len(self.family.param_names)))
        full[:, self.free_idx] = thetas_free
        if self.fixed_idx.size:
            full[:, self.fixed_idx] = self.fixed_vals
        return full

    def sample_prior(self, n, rng) -> np.ndarray:
        return rng.uniform(self.bounds[:, 0], self.bounds[:, 1], size=(n, self.dim))


def _uniform_dt(times: np.ndarray) -> float:
    """Common step length of an observation grid starting at one step past 0."""
    dts = np.diff(np.concatenate([[0.0], times]))
    dt = float(np.mean(dts))
    if dt <= 0 or np.max(np.abs(dts - dt)) > 1e-8 * max(dt, 1.0):
        raise ValueError("observation times must be uniformly spaced")
    return dt


def _resolve_series(series) -> ObservationSeries:
    if not isinstance(series, ObservationSeries):
        raise TypeError("fit expects an ObservationSeries")
    if series.n_steps == 0:
        raise ValueError("series has no observations")
    return series


class _BatchPricer:
    """Per-step Riccati pricing of a particle batch, with de-duplication.

    When the current jitter is exactly zero the particle set collapses onto
    few distinct parameter rows, so the exponent sweep runs once per distinct
    row and the results are scattered back.
    """

    def __init__(self, space, taus, order, tol):
        self.space = space
        self.taus = np.ascontiguousarray(taus)
        self.order = int(order)
        self.tol = float(tol)
        d = space.family.dim
        self._eye = np.arange(d)

    def __call__(self, thetas_free, dedup):
        space = self.space
        family = space.family
        if dedup and thetas_free.shape[0] > 1:
            uniq, inverse = np.unique(thetas_free, axis=0, return_inverse=True)
        else:
            uniq, inverse = thetas_free, None
        batch = family.batch_model(space.expand(uniq))
        n, d = batch.alphas.shape
        beta_mat = np.zeros((n, d, d))
        beta_mat[:, self._eye, self._eye] = -batch.alphas
        phis, psis, ok = _engine.riccati_sweep_batch(
            -batch.gmat, batch.phi_quad, -batch.gmat, batch.psi_quad,
            batch.drift, batch.c, beta_mat, batch.gamma,
            self.taus, self.order, self.tol,
            1e-6, 0.5, 1e12,
        )
        H = psis / self.taus[None, :, None]
        H0 = phis / self.taus[None, :]
        bad = ~ok
        if np.any(bad):
            H[bad] = 0.0
            H0[bad] = 0.0
        Ht = np.ascontiguousarray(np.swapaxes(H, 1, 2))
        G = Ht @ H
        HtH0 = (Ht @ H0[:, :, None])[:, :, 0]
        H0sq = np.einsum("nl,nl->n", H0, H0)
        if inverse is not None:
            return batch, H, H0, Ht, G, HtH0, H0sq, ok, inverse
        return batch, H, H0, Ht, G, HtH0, H0sq, ok, None


class KalmanParticleFilter(BaseEstimator):
    """Sequential posterior over static model parameters via marginalized filtering.

    Each parameter particle carries the Gaussian factor belief implied by a
    Kalman recursion under its parameters; particle weights use the exact
    conditional likelihood of the newest observation.  Early on, while the
    parameter cloud is still wide, every step re-runs the filter over the
    whole history after a moment-preserving shrinkage jitter (replay phase);
    once the largest jittered coordinate variance drops to the switch level,
    the filter moves to a single carried Kalman step per observation with a
    clamped random-walk jitter (recursive phase) and stays there.

    Parameters
    ----------
    model : str or ModelFamily
        Model family name (``"cir"``, ``"hw2"``, ``"sv"``).
    n_particles : int
        Parameter-particle count N.
    discount : float
        Shrinkage discount ``a`` in (0, 1]; jitter variance is ``1 - a^2``
        times the cloud variance.
    switch_var : float, optional
        Variance level that ends the replay phase and caps the recursive
        jitter; defaults to ``N ** -1.5``.
    floor_var : float, optional
        Lower clamp of the recursive jitter variance; defaults to
        ``switch_var / 100``.
    priors : dict, optional
        Per-parameter ``(low, high)`` uniform prior bounds overriding the
        family defaults.
    fixed : dict, optional
        Parameters pinned to known values and excluded from estimation.
    x0_mean, x0_cov : array-like, optional
        Gaussian prior on the initial factor state; family defaults apply.
    riccati_order, riccati_tol : int, float
        Taylor order and per-step tolerance of the exponent solver.
    resampling : str
        ``"multinomial"`` (default) or ``"systematic"``.
    start_phase : str
        ``"auto"`` (default) or ``"recursive"`` to skip the replay phase.
    init_particles : ndarray, optional
        Explicit ``(n_particles, n_free)`` initial parameter rows in place
        of prior draws.
    replay_cap : int, optional
        Truncate replay windows to this many trailing steps (exploratory;
        full replay is the default behavior).
    record_state : bool
        Also trace the factor posterior mean and variance.
    random_state : int or numpy Generator, optional

    Attributes
    ----------
    trace_ : PosteriorTrace
    theta_mean_, theta_std_ : final posterior summaries, one entry per free parameter
    param_names_ : tuple of free parameter names
    switch_step_ : first recursive step of the first segment (None if never)
    thetas_, state_means_, state_covs_ : final particle cloud and carried beliefs
    last_weights_, last_thetas_ : final-step importance weights and their support
        (before the closing resample), handy for weighted posterior summaries
    """

    _detect_resets = False

    def __init__(
        self,
        model="cir",
        n_particles=1000,
        discount=0.98,
        switch_var=None,
        floor_var=None,
        priors=None,
        fixed=None,
        x0_mean=None,
        x0_cov=None,
        riccati_order=10,
        riccati_tol=1e-12,
        resampling="multinomial",
        start_phase="auto",
        init_particles=None,
        replay_cap=None,
        record_state=False,
        random_state=None,
    ):
        self.model = model
        self.n_particles = n_particles
        self.discount = discount
        self.switch_var = switch_var
        self.floor_var = floor_var
        self.priors = priors
        self.fixed = fixed
        self.x0_mean = x0_mean
        self.x0_cov = x0_cov
        self.riccati_order = riccati_order
        self.riccati_tol = riccati_tol
        self.resampling = resampling
        self.start_phase = start_phase
        self.init_particles = init_particles
        self.replay_cap = replay_cap
        self.record_state = record_state
        self.random_state = random_state

    # -- configuration ------------------------------------------------------

    def _reset_log_threshold(self):
        return None

    def _setup(self):
        family = get_family(self.model)
        if family.dim > 2:
            raise ValueError("particle engine supports state dimensions 1 and 2")
        space = _ParamSpace(family, self.fixed, self.priors)
        n = int(self.n_particles)
        if n < 1:
            raise ValueError("n_particles must be positive")
        a = float(self.discount)
        if not 0.0 < a <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        v_switch = float(self.switch_var) if self.switch_var is not None else n ** -1.5
        v_floor = float(self.floor_var) if self.floor_var is not None else v_switch / 100.0
        if v_switch < 0 or v_floor < 0 or v_floor > v_switch:
            raise ValueError("need 0 <= floor_var <= switch_var")
        if self.start_phase not in ("auto", "recursive"):
            raise ValueError("start_phase must be 'auto' or 'recursive'")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValueError("resampling must be 'multinomial' or 'systematic'")
        x0_mean = np.asarray(
            family.default_x0_mean if self.x0_mean is None else self.x0_mean,
            dtype=np.float64,
        ).reshape(family.dim)
        x0_cov = np.asarray(
            family.default_x0_cov if self.x0_cov is None else self.x0_cov,
            dtype=np.float64,
        ).reshape(family.dim, family.dim)
        return family, space, n, a, v_switch, v_floor, x0_mean, x0_cov

    def _init_thetas(self, space, n, rng):
        if self.init_particles is not None:
            thetas = np.array(self.init_particles, dtype=np.float64)
            if thetas.shape != (n, space.dim):
                raise ValueError(
                    f"init_particles must have shape {(n, space.dim)}, got {thetas.shape}"
                )
            return thetas
        return space.sample_prior(n, rng)

    # -- main loop ----------------------------------------------------------

    def fit(self, series, y=None):
        """Run the filter over the series and populate the trace."""
        series = _resolve_series(series)
        family, space, n, a, v_switch, v_floor, x0_mean, x0_cov = self._setup()
        rng = np.random.default_rng(self.random_state)
        resampler = (
            resample_multinomial if self.resampling == "multinomial" else resample_systematic
        )
        log_b = self._reset_log_threshold()
        dt = _uniform_dt(series.times)
        h = series.obs_var
        y_mat = series.values
        n_steps, n_obs = y_mat.shape
        ysq = np.einsum("kl,kl->k", y_mat, y_mat)
        pricer = _BatchPricer(space, series.maturities, self.riccati_order, self.riccati_tol)
        d = family.dim

        recorder = _TraceRecorder(n_steps, space.free_names, d, self.record_state)
        thetas = self._init_thetas(space, n, rng)
        B = np.tile(x0_mean, (n, 1))
        P = np.tile(x0_cov, (n, 1, 1))
        seg_first = 0  # 0-based row where the current segment starts
        recursive = self.start_phase == "recursive"
        if recursive:
            recorder.switch_steps.append(1)
        prev_max_ll = None
        cap = None if self.replay_cap is None else int(self.replay_cap)
        final_weights = None
        final_support = None

        for row in range(n_steps):
            mean, cov = cloud_moments(thetas)
            diag = np.clip(np.diag(cov), 0.0, None)
            if not recursive:
                spread = np.max((1.0 - a * a) * diag)
                if not spread > v_switch:
                    recursive = True
                    recorder.switch_steps.append(row + 1)
            if recursive:
                scales = walk_scales(diag, a, v_floor, v_switch)
                if np.all(scales == 0.0):
                    jittered = thetas
                    dedup = True
                else:
                    jittered = random_walk_jitter(thetas, scales, space.bounds, rng)
                    dedup = False
                jitter_sd = scales
            else:
                jitter_sd = np.sqrt((1.0 - a * a) * diag)
                dedup = bool(np.all(jitter_sd == 0.0))
                jittered = (
                    thetas
                    if dedup
                    else shrinkage_jitter(thetas, a, space.bounds, rng, mean=mean, cov=cov)
                )

            batch, H, H0, Ht, G, HtH0, H0sq, ok, inverse = pricer(jittered, dedup)
            if inverse is not None:
                alphas_all, betas_all, gmat_all = (
                    batch.alphas[inverse], batch.betas[inverse], batch.gmat[inverse]
                )
                G_all, HtH0_all, H0sq_all = G[inverse], HtH0[inverse], H0sq[inverse]
                ok_all = ok[inverse]
            else:
                alphas_all, betas_all, gmat_all = batch.alphas, batch.betas, batch.gmat
                G_all, HtH0_all, H0sq_all, ok_all = G, HtH0, H0sq, ok

            y_k = y_mat[row]
            if recursive:
                Hty_k = np.ascontiguousarray(Ht @ y_k)
                H0ty_k = H0 @ y_k
                if inverse is not None:
                    Hty_k, H0ty_k = np.ascontiguousarray(Hty_k[inverse]), H0ty_k[inverse]
                B_new, P_new, ll, kal_ok = _engine.kalman_step_batch(
                    alphas_all, betas_all, gmat_all, batch.scaled,
                    B, P, G_all, HtH0_all, H0sq_all,
                    Hty_k, H0ty_k, float(ysq[row]), h, dt, n_obs,
                )
            else:
                first = seg_first if cap is None else max(seg_first, row + 1 - cap)
                window = y_mat[first : row + 1]
                Hty_w = np.ascontiguousarray(np.swapaxes(Ht @ window.T, 1, 2))
                H0ty_w = H0 @ window.T
                if inverse is not None:
                    Hty_w = np.ascontiguousarray(Hty_w[inverse])
                    H0ty_w = np.ascontiguousarray(H0ty_w[inverse])
                B_new, P_new, ll, kal_ok = _engine.kalman_replay_batch(
                    alphas_all, betas_all, gmat_all, batch.scaled,
                    x0_mean, x0_cov, G_all, HtH0_all, H0sq_all,
                    Hty_w, H0ty_w, np.ascontiguousarray(ysq[first : row + 1]),
                    h, dt, n_obs,
                )
            ll = np.where(ok_all & kal_ok, ll, -np.inf)
            max_ll = float(np.max(ll))

            if (
                log_b is not None
                and recursive
                and prev_max_ll is not None
                and max_ll < log_b + prev_max_ll
            ):
                # Parameter change declared: drop this update, restart the
                # cloud from the priors, and begin a new segment next step.
                thetas = self._init_thetas(space, n, rng)
                B = np.tile(x0_mean, (n, 1))
                P = np.tile(x0_cov, (n, 1, 1))
                seg_first = row + 1
                recursive = self.start_phase == "recursive"
                prev_max_ll = None
                recorder.reset_steps.append(row + 1)
                if recursive and row + 1 < n_steps:
                    recorder.switch_steps.append(row + 2)
                r_mean, r_cov = cloud_moments(thetas)
                recorder.record(
                    row, PHASE_RECURSIVE, max_ll, r_mean,
                    np.sqrt(np.clip(np.diag(r_cov), 0.0, None)),
                    np.zeros(space.dim), reset=True,
                    state_mean=x0_mean, state_var=np.diag(x0_cov),
                )
                continue

            try:
                weights, _ = normalize_log_weights(ll)
            except WeightCollapseError:
                raise WeightCollapseError(
                    f"every particle diverged at step {row + 1}"
                ) from None
            t_mean, t_std = _weighted_stats(jittered, weights)
            if self.record_state:
                s_mean = weights @ B_new
                second = weights @ (np.einsum("nii->ni", P_new) + B_new**2)
                s_var = np.maximum(second - s_mean**2, 0.0)
            else:
                s_mean = s_var = None
            recorder.record(
                row, PHASE_RECURSIVE if recursive else PHASE_REPLAY, max_ll,
                t_mean, t_std, jitter_sd,
                state_mean=s_mean, state_var=s_var,
            )
            if recursive:
                prev_max_ll = max_ll

            final_weights = weights
            final_support = jittered
            idx = resampler(weights, n, rng)
            thetas = jittered[idx]
            B = B_new[idx]
            P = P_new[idx]

        self._finalize(recorder, space, thetas, B, P, n_steps)
        self.last_weights_ = final_weights
        self.last_thetas_ = final_support
        return self

    def _finalize(self, recorder, space, thetas, B, P, n_steps):
        trace = recorder.freeze()
        self.trace_ = trace
        self.param_names_ = space.free_names
        self.theta_mean_ = trace.theta_mean[-1].copy()
        self.theta_std_ = trace.theta_std[-1].copy()
        self.switch_step_ = trace.switch_step
        self.reset_steps_ = trace.reset_steps
        self.thetas_ = thetas
        self.state_means_ = B
        self.state_covs_ = P
        self.n_steps_ = n_steps


class ChangePointKalmanParticleFilter(KalmanParticleFilter):
    """Kalman particle filter with a reset rule for piecewise-constant parameters.

    In the recursive phase, a drop of the best particle's conditional
    log-likelihood by more than ``log(reset_threshold)`` relative to the
    previous step declares a parameter change: the observation is dropped,
    the cloud restarts from the priors and a fresh segment (replay phase
    first) begins at the next step.

    Parameters are those of :class:`KalmanParticleFilter` plus
    ``reset_threshold`` in [0, 1); 0 disables resets.
    """

    def __init__(
        self,
        model="cir",
        n_particles=1000,
        discount=0.98,
        switch_var=None,
        floor_var=None,
        priors=None,
        fixed=None,
        x0_mean=None,
        x0_cov=None,
        riccati_order=10,
        riccati_tol=1e-12,
        resampling="multinomial",
        start_phase="auto",
        init_particles=None,
        replay_cap=None,
        record_state=False,
        random_state=None,
        reset_threshold=0.1,
    ):
        super().__init__(
            model=model,
            n_particles=n_particles,
            discount=discount,
            switch_var=switch_var,
            floor_var=floor_var,
            priors=priors,
            fixed=fixed,
            x0_mean=x0_mean,
            x0_cov=x0_cov,
            riccati_order=riccati_order,
            riccati_tol=riccati_tol,
            resampling=resampling,
            start_phase=start_phase,
            init_particles=init_particles,
            replay_cap=replay_cap,
            record_state=record_state,
            random_state=random_state,
        )
        self.reset_threshold = reset_threshold

    def _reset_log_threshold(self):
        b = float(self.reset_threshold)
        if not 0.0 <= b < 1.0:
            raise ValueError("reset_threshold must lie in [0, 1)")
        if b == 0.0:
            return None
        return float(np.log(b))


class NestedParticleFilter(BaseEstimator):
    """Two-layer particle filter baseline with simulated factor particles.

    Each of ``n_particles`` parameter rows carries ``inner_particles`` factor
    particles propagated through the exact (or substepped) transition
    sampler; the parameter weight is the inner average observation
    likelihood.  The parameter jitter is a fixed-variance truncated Gaussian
    random walk.

    Parameters follow :class:`KalmanParticleFilter` where shared;
    ``jitter_var`` defaults to ``n_particles ** -1.5``.
    """

    def __init__(
        self,
        model="cir",
        n_particles=500,
        inner_particles=150,
        jitter_var=None,
        priors=None,
        fixed=None,
        x0_mean=None,
        x0_cov=None,
        riccati_order=10,
        riccati_tol=1e-12,
        substeps=16,
        record_state=False,
        random_state=None,
    ):
        self.model = model
        self.n_particles = n_particles
        self.inner_particles = inner_particles
        self.jitter_var = jitter_var
        self.priors = priors
        self.fixed = fixed
        self.x0_mean = x0_mean
        self.x0_cov = x0_cov
        self.riccati_order = riccati_order
        self.riccati_tol = riccati_tol
        self.substeps = substeps
        self.record_state = record_state
        self.random_state = random_state

    def fit(self, series, y=None):
        series = _resolve_series(series)
        family = get_family(self.model)
        space = _ParamSpace(family, self.fixed, self.priors)
        n = int(self.n_particles)
        m = int(self.inner_particles)
        if n < 1 or m < 1:
            raise ValueError("n_particles and inner_particles must be positive")
        v_jitter = float(self.jitter_var) if self.jitter_var is not None else n ** -1.5
        scales = np.full(space.dim, np.sqrt(v_jitter))
        rng = np.random.default_rng(self.random_state)
        dt = _uniform_dt(series.times)
        h = series.obs_var
        y_mat = series.values
        n_steps, n_obs = y_mat.shape
        ysq = np.einsum("kl,kl->k", y_mat, y_mat)
        pricer = _BatchPricer(space, series.maturities, self.riccati_order, self.riccati_tol)
        d = family.dim
        x0_mean = np.asarray(
            family.default_x0_mean if self.x0_mean is None else self.x0_mean, dtype=np.float64
        ).reshape(d)
        x0_cov = np.asarray(
            family.default_x0_cov if self.x0_cov is None else self.x0_cov, dtype=np.float64
        ).reshape(d, d)

        recorder = _TraceRecorder(n_steps, space.free_names, d, self.record_state)
        thetas = space.sample_prior(n, rng)
        x = family.sample_x0(x0_mean, x0_cov, (n, m), rng)
        log_m = np.log(m)
        base_const = n_obs * (np.log(2.0 * np.pi) + np.log(h))

        for row in range(n_steps):
            thetas = random_walk_jitter(thetas, scales, space.bounds, rng)
            batch, H, H0, Ht, G, HtH0, H0sq, ok, _ = pricer(thetas, False)
            x = family.batch_transition(batch, x, dt, rng, substeps=self.substeps)
            y_k = y_mat[row]
            Hty_k = Ht @ y_k
            H0ty_k = H0 @ y_k
            quad = (
                np.einsum("nmd,nde,nme->nm", x, G, x)
                - 2.0 * np.einsum("nmd,nd->nm", x, Hty_k)
                + 2.0 * np.einsum("nmd,nd->nm", x, HtH0)
                + (ysq[row] - 2.0 * H0ty_k + H0sq)[:, None]
            )
            ll = -0.5 * (base_const + np.maximum(quad, 0.0) / h)
            ll[~ok] = -np.inf
            log_marg = logsumexp(ll, axis=1) - log_m
            alive = np.isfinite(log_marg)
            if not np.any(alive):
                raise WeightCollapseError(
                    f"every parameter particle diverged at step {row + 1}"
                )
            # Inner resample: multinomial counts per parameter row.
            shifted = ll - np.max(np.where(np.isfinite(ll), ll, -np.inf), axis=1, keepdims=True)
            with np.errstate(invalid="ignore"):
                probs = np.exp(shifted)
            probs[~np.isfinite(probs)] = 0.0
            fallback = ~alive
            probs[fallback] = 1.0
            probs /= probs.sum(axis=1, keepdims=True)
            counts = rng.multinomial(m, probs)
            flat = x.reshape(n * m, d)
            x = np.repeat(flat, counts.ravel(), axis=0).reshape(n, m, d)

            weights, _ = normalize_log_weights(np.where(alive, log_marg, -np.inf))
            t_mean, t_std = _weighted_stats(thetas, weights)
            if self.record_state:
                inner_mean = x.mean(axis=1)
                inner_second = (x**2).mean(axis=1)
                s_mean = weights @ inner_mean
                s_var = np.maximum(weights @ inner_second - s_mean**2, 0.0)
            else:
                s_mean = s_var = None
            recorder.record(
                row, PHASE_NESTED, float(np.max(log_marg)), t_mean, t_std, scales,
                state_mean=s_mean, state_var=s_var,
            )
            idx = resample_multinomial(weights, n, rng)
            thetas = thetas[idx]
            x = x[idx]

        trace = recorder.freeze()
        self.trace_ = trace
        self.param_names_ = space.free_names
        self.theta_mean_ = trace.theta_mean[-1].copy()
        self.theta_std_ = trace.theta_std[-1].copy()
        self.thetas_ = thetas
        self.n_steps_ = n_steps
        return self


class GridPosteriorOracle(BaseEstimator):
    """Exact sequential posterior on a fixed parameter grid.

    For every grid row the factor process is filtered once with the
    reference Kalman recursion; the grid posterior after each step follows
    from the accumulated log-likelihoods plus the prior log-weights.  Exact
    whenever the model is linear-Gaussian under every grid point (constant
    diffusion); under square-root diffusion it inherits the same frozen
    covariance approximation the filters use.

    Parameters
    ----------
    model : str or ModelFamily
    grid : (G, n_free) array-like
        Parameter rows (free parameters in family order).
    log_prior : (G,) array-like, optional
        Unnormalized prior log-weights, uniform by default.
    fixed, x0_mean, x0_cov, riccati_order, riccati_tol : as in
        :class:`KalmanParticleFilter`.

    Attributes
    ----------
    grid_ : (G, n_free) ndarray
    log_weights_, weights_ : (K, G) ndarrays of per-step posteriors
    final_weights_ : (G,) ndarray
    """

    def __init__(
        self,
        model="cir",
        grid=None,
        log_prior=None,
        fixed=None,
        x0_mean=None,
        x0_cov=None,
        riccati_order=10,
        riccati_tol=1e-12,
    ):
        self.model = model
        self.grid = grid
        self.log_prior = log_prior
        self.fixed = fixed
        self.x0_mean = x0_mean
        self.x0_cov = x0_cov
        self.riccati_order = riccati_order
        self.riccati_tol = riccati_tol

    def fit(self, series, y=None):
        series = _resolve_series(series)
        family = get_family(self.model)
        space = _ParamSpace(family, self.fixed, None)
        if self.grid is None:
            raise ValueError("grid must be provided")
        grid = np.atleast_2d(np.asarray(self.grid, dtype=np.float64))
        if grid.shape[1] != space.dim:
            raise ValueError(
                f"grid has {grid.shape[1]} columns, expected {space.dim} free parameters"
            )
        n_grid = grid.shape[0]
        if self.log_prior is None:
            log_prior = np.zeros(n_grid)
        else:
            log_prior = np.asarray(self.log_prior, dtype=np.float64).reshape(n_grid)
        dt = _uniform_dt(series.times)
        d = family.dim
        x0_mean = np.asarray(
            family.default_x0_mean if self.x0_mean is None else self.x0_mean, dtype=np.float64
        ).reshape(d)
        x0_cov = np.asarray(
            family.default_x0_cov if self.x0_cov is None else self.x0_cov, dtype=np.float64
        ).reshape(d, d)
        init = GaussianState(mean=x0_mean, cov=x0_cov)

        full = space.expand(grid)
        cum = np.empty((series.n_steps, n_grid))
        for g in range(n_grid):
            params = dict(zip(family.param_names, full[g]))
            spec = family.build_spec(params)
            obs_map = build_observation_map(
                spec, series.maturities, order=self.riccati_order, tol=self.riccati_tol
            )
            result = filter_pass(
                series.values,
                lambda k, state, spec=spec: transition_moments(spec, state.mean, dt),
                obs_map,
                series.obs_var,
                init,
            )
            cum[:, g] = np.cumsum(result.logliks)
        log_post = cum + log_prior
        log_post -= logsumexp(log_post, axis=1, keepdims=True)
        self.grid_ = grid
        self.log_weights_ = log_post
        self.weights_ = np.exp(log_post)
        self.final_weights_ = self.weights_[-1].copy()
        self.param_names_ = space.free_names
        return self
