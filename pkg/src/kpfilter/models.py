"""Affine term-structure model specifications and their state-space building blocks.

A model describes a ``d``-dimensional factor process

    dx_t = A (beta - x_t) dt + (Sigma + SigmaTilde * sqrt(max(x_t[0], 0))) dW_t

with diagonal mean-reversion matrix ``A`` and exactly one of ``Sigma`` /
``SigmaTilde`` nonzero, together with a short rate ``r = c + gamma' x`` whose
bond prices are exponentially affine.  The module provides

* :class:`AffineModelSpec` plus admissibility checks,
* discrete-time transition moments for the Kalman recursion,
* the mapping onto :class:`~kpfilter.riccati.RiccatiParams`,
* yield-curve observation maps built from a single Riccati sweep,
* named model families (``cir``, ``hw2``, ``sv``) that translate flat
  parameter vectors into specs, both one at a time and in vectorized batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import riccati
from ._validation import as_float_array, check_increasing, check_positive

SERIES_SWITCH = 1e-8


@dataclass(frozen=True)
class AffineModelSpec:
    """Parameters of an affine factor model with diagonal mean reversion.

    Attributes
    ----------
    alphas : (d,) ndarray
        Diagonal of the mean-reversion matrix ``A``.
    beta : (d,) ndarray
        Long-run mean of the factor process.
    Sigma : (d, d) ndarray
        Constant diffusion loading; must be zero when ``SigmaTilde`` is used.
    SigmaTilde : (d, d) ndarray
        Square-root diffusion loading scaled by ``sqrt(x[0])``; must be zero
        when ``Sigma`` is used.
    gamma : (d,) ndarray
        Factor loadings of the short rate.
    c : float
        Constant part of the short rate.
    n_nonneg : int
        Number of leading components constrained to be nonnegative.
    """

    alphas: np.ndarray
    beta: np.ndarray
    Sigma: np.ndarray
    SigmaTilde: np.ndarray
    gamma: np.ndarray
    c: float = 0.0
    n_nonneg: int = 0

    def __post_init__(self):
        alphas = as_float_array(self.alphas, "alphas", ndim=1)
        d = alphas.shape[0]
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "beta", as_float_array(self.beta, "beta", shape=(d,)))
        object.__setattr__(self, "Sigma", as_float_array(self.Sigma, "Sigma", shape=(d, d)))
        object.__setattr__(
            self, "SigmaTilde", as_float_array(self.SigmaTilde, "SigmaTilde", shape=(d, d))
        )
        object.__setattr__(self, "gamma", as_float_array(self.gamma, "gamma", shape=(d,)))
        object.__setattr__(self, "c", float(self.c))
        if not 0 <= self.n_nonneg <= d:
            raise ValueError(f"n_nonneg must lie in [0, {d}], got {self.n_nonneg}")

    @property
    def dim(self) -> int:
        return self.alphas.shape[0]

    @property
    def scaled_diffusion(self) -> bool:
        """True when the diffusion is the square-root kind driven by ``x[0]``."""
        return bool(np.any(self.SigmaTilde != 0.0))

    def diffusion_factor(self) -> np.ndarray:
        """The active diffusion loading matrix."""
        return self.SigmaTilde if self.scaled_diffusion else self.Sigma


def validate_admissibility(spec: AffineModelSpec) -> list[str]:
    """Check the stationarity/positivity conditions of a spec.

    Returns a list of human-readable violation messages; an empty list means
    the spec is admissible.  The conditions keep the constrained components
    nonnegative and the factor process well defined:

    * exactly one of ``Sigma`` and ``SigmaTilde`` is nonzero,
    * ``A beta`` is nonnegative in every constrained component,
    * the constant-diffusion covariance vanishes on the constrained block,
    * under square-root diffusion with no constrained component the constant
      part must vanish entirely, and rows/columns of the covariance touching
      constrained components other than the driver must vanish.

    A diagonal ``A`` automatically satisfies the usual cross-coupling
    conditions (no feedback from unconstrained into constrained components,
    nonpositive off-diagonal mean reversion), so those are not re-checked.
    """
    problems: list[str] = []
    p = spec.n_nonneg
    sigma_zero = not np.any(spec.Sigma != 0.0)
    tilde_zero = not np.any(spec.SigmaTilde != 0.0)
    if sigma_zero == tilde_zero:
        problems.append("exactly one of Sigma and SigmaTilde must be nonzero")
        return problems
    drift = spec.alphas * spec.beta
    for i in range(p):
        if drift[i] < 0:
            problems.append(
                f"A beta must be nonnegative on constrained components; component {i} is {drift[i]:.6g}"
            )
    if tilde_zero:
        cov = spec.Sigma @ spec.Sigma.T
        if p and np.any(cov[:p, :p] != 0.0):
            problems.append(
                "constant diffusion must not load on the nonnegative components"
            )
    else:
        if p == 0:
            problems.append(
                "square-root diffusion requires at least one nonnegative component"
            )
        else:
            cov = spec.SigmaTilde @ spec.SigmaTilde.T
            for i in range(1, p):
                if np.any(cov[i, :] != 0.0) or np.any(cov[:, i] != 0.0):
                    problems.append(
                        f"square-root covariance must vanish on constrained component {i}"
                    )
        if spec.beta[0] < 0:
            problems.append("long-run mean of the driving component must be nonnegative")
    return problems


@dataclass(frozen=True)
class TransitionMoments:
    """One-step conditional moments ``x' | x ~ N(F x + offset, Q)``."""

    F: np.ndarray
    offset: np.ndarray
    Q: np.ndarray


def decay_integrals(alphas: np.ndarray, delta: float) -> np.ndarray:
    """Matrix of integrals ``g_ij = (1 - exp(-(a_i + a_j) delta)) / (a_i + a_j)``.

    The limit ``g_ij -> delta`` is used when ``|a_i + a_j| * delta`` falls
    below a switch threshold, which keeps the expression exact at zero mean
    reversion and stable near it.
    """
    s = alphas[:, None] + alphas[None, :]
    small = np.abs(s) * delta < SERIES_SWITCH
    safe = np.where(small, 1.0, s)
    return np.where(small, delta, -np.expm1(-safe * delta) / safe)


def transition_moments(spec: AffineModelSpec, x_prev, delta: float) -> TransitionMoments:
    """Discrete-time Gaussian transition moments over a step of length ``delta``.

    For square-root diffusion the covariance freezes the driver at its value
    in ``x_prev`` (floored at zero), which is the approximation the filter
    uses throughout.
    """
    delta = check_positive(delta, "delta")
    x_prev = as_float_array(x_prev, "x_prev", shape=(spec.dim,))
    f = np.exp(-spec.alphas * delta)
    F = np.diag(f)
    offset = (1.0 - f) * spec.beta
    D = spec.diffusion_factor()
    scale = max(x_prev[0], 0.0) if spec.scaled_diffusion else 1.0
    Q = (D @ D.T) * decay_integrals(spec.alphas, delta) * scale
    return TransitionMoments(F=F, offset=offset, Q=0.5 * (Q + Q.T))


def riccati_params(spec: AffineModelSpec) -> riccati.RiccatiParams:
    """Riccati coefficients of the bond-price exponents for this spec.

    With constant diffusion the ``phi`` equation carries the quadratic term
    ``Sigma Sigma'`` and the ``psi`` equations are linear; with square-root
    diffusion the quadratic ``SigmaTilde SigmaTilde'`` moves into the
    equation of the loading on the driving component and ``phi`` is linear
    in ``psi``.
    """
    d = spec.dim
    cov = spec.diffusion_factor()
    cov = cov @ cov.T
    # The exponents solve equations whose quadratic term is -1/2 psi' cov psi
    # (yield convexity), so the covariance enters the solver negated.
    alpha = np.zeros((d, d, d))
    if spec.scaled_diffusion:
        a = np.zeros((d, d))
        alpha[0] = -cov
    else:
        a = -cov
    beta = -np.diag(spec.alphas)
    return riccati.RiccatiParams(
        a=a, b=spec.alphas * spec.beta, c=spec.c, alpha=alpha, beta=beta, gamma=spec.gamma
    )


@dataclass(frozen=True)
class ObservationMap:
    """Affine map from factors to observed zero-coupon yields.

    The model-implied yield with maturity ``tau`` is ``(phi + psi' x) / tau``,
    so the observation equation reads ``y = H x + H0 + noise`` with rows
    ``H = psi' / tau`` and intercepts ``H0 = phi / tau``.
    """

    maturities: np.ndarray
    H: np.ndarray
    H0: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.maturities.shape[0]

    def expected(self, x) -> np.ndarray:
        """Noise-free observation vector at factor value ``x``."""
        return self.H @ np.asarray(x, dtype=np.float64) + self.H0


def build_observation_map(
    spec: AffineModelSpec,
    maturities,
    *,
    order: int = 10,
    tol: float = 1e-12,
) -> ObservationMap:
    """Observation map rows ``psi(tau)'/tau`` and intercepts ``phi(tau)/tau``.

    A single Riccati sweep to the largest maturity records every requested
    maturity on the way.
    """
    maturities = check_increasing(maturities, "maturities")
    if maturities.size == 0 or maturities[0] <= 0:
        raise ValueError("maturities must be positive and non-empty")
    sol = riccati.solve(riccati_params(spec), maturities, order=order, tol=tol)
    H = sol.psi / maturities[:, None]
    H0 = sol.phi / maturities
    return ObservationMap(maturities=maturities, H=H, H0=H0)


def bond_price(phi: float, psi, x) -> float:
    """Zero-coupon bond price ``exp(-phi - psi' x)``."""
    psi = np.asarray(psi, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return float(np.exp(-phi - psi @ x))


def zero_rate(phi: float, psi, x, tau: float) -> float:
    """Continuously compounded yield ``-log P / tau = (phi + psi' x) / tau``."""
    psi = np.asarray(psi, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return float((phi + psi @ x) / tau)


@dataclass(frozen=True)
class BatchModel:
    """Vectorized model arrays for a batch of parameter vectors.

    All leading dimensions equal the batch size ``n``.  ``gmat`` holds the
    outer product of the active diffusion loading; ``phi_quad`` / ``psi_quad``
    flag which Riccati equations carry a quadratic term (the ``phi`` equation
    under constant diffusion, the first ``psi`` equation under square-root
    diffusion).
    """

    alphas: np.ndarray  # (n, d)
    betas: np.ndarray  # (n, d)
    gmat: np.ndarray  # (n, d, d)
    drift: np.ndarray  # (n, d) rows A beta
    gamma: np.ndarray  # (d,)
    c: float
    scaled: bool

    @property
    def n(self) -> int:
        return self.alphas.shape[0]

    @property
    def dim(self) -> int:
        return self.alphas.shape[1]

    @property
    def phi_quad(self) -> bool:
        return not self.scaled

    @property
    def psi_quad(self) -> bool:
        return self.scaled


class ModelFamily:
    """A named parametrization mapping flat parameter vectors to model specs.

    Subclasses fix the state dimension, the short-rate loadings and the
    diffusion regime, and declare the ordered free-parameter names together
    with default priors and a default factor-state prior.
    """

    name: str = ""
    param_names: tuple[str, ...] = ()
    dim: int = 0
    n_nonneg: int = 0
    default_priors: dict[str, tuple[float, float]] = {}
    default_x0_mean: np.ndarray
    default_x0_cov: np.ndarray

    def full_params(self, params: Mapping[str, float]) -> dict[str, float]:
        unknown = set(params) - set(self.param_names)
        if unknown:
            raise ValueError(
                f"unknown parameter(s) for family '{self.name}': {sorted(unknown)}"
            )
        missing = [n for n in self.param_names if n not in params]
        if missing:
            raise ValueError(f"family '{self.name}' missing parameter(s): {missing}")
        return {n: float(params[n]) for n in self.param_names}

    def build_spec(self, params: Mapping[str, float]) -> AffineModelSpec:
        """Model spec for a single named-parameter mapping."""
        values = self.full_params(params)
        theta = np.array([values[n] for n in self.param_names])
        batch = self.batch_model(theta[None, :])
        d = self.dim
        cov_factor = _cholesky_like(batch.gmat[0])
        zero = np.zeros((d, d))
        if batch.scaled:
            sigma, sigma_tilde = zero, cov_factor
        else:
            sigma, sigma_tilde = cov_factor, zero
        return AffineModelSpec(
            alphas=batch.alphas[0],
            beta=batch.betas[0],
            Sigma=sigma,
            SigmaTilde=sigma_tilde,
            gamma=batch.gamma,
            c=batch.c,
            n_nonneg=self.n_nonneg,
        )

    def batch_model(self, thetas: np.ndarray) -> BatchModel:
        """Vectorized model arrays for a ``(n, n_params)`` parameter matrix."""
        raise NotImplementedError

    def batch_transition(self, batch: BatchModel, x, delta, rng, substeps=16):
        """Draw one exact (or near-exact) transition step for nested filtering.

        ``x`` has shape ``(n, m, d)``: ``m`` factor particles per parameter
        row.  Returns an array of the same shape.
        """
        raise NotImplementedError

    def sample_x0(self, mean, cov, size, rng):
        """Draw factor starting values, clipping constrained components at zero."""
        mean = as_float_array(mean, "x0_mean", shape=(self.dim,))
        cov = as_float_array(cov, "x0_cov", shape=(self.dim, self.dim))
        draws = rng.multivariate_normal(mean, cov, size=size, method="eigh")
        if self.n_nonneg:
            draws[..., : self.n_nonneg] = np.maximum(draws[..., : self.n_nonneg], 0.0)
        return draws


def _cholesky_like(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular factor of a PSD matrix, tolerating zero rows."""
    d = cov.shape[0]
    jitter = 0.0
    for _ in range(3):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-300)
    w, v = np.linalg.eigh(cov)
    return v @ np.diag(np.sqrt(np.maximum(w, 0.0)))


class CIRFamily(ModelFamily):
    """One-factor square-root short-rate model, parameters (alpha, beta, sigma)."""

    name = "cir"
    param_names = ("alpha", "beta", "sigma")
    dim = 1
    n_nonneg = 1
    default_priors = {"alpha": (0.0, 1.0), "beta": (0.0, 0.01), "sigma": (0.0, 0.1)}
    default_x0_mean = np.array([0.005])
    default_x0_cov = np.array([[0.01]])

    def batch_model(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        n = thetas.shape[0]
        alphas = thetas[:, :1].copy()
        betas = thetas[:, 1:2].copy()
        gmat = (thetas[:, 2] ** 2).reshape(n, 1, 1)
        return BatchModel(
            alphas=alphas,
            betas=betas,
            gmat=gmat,
            drift=alphas * betas,
            gamma=np.array([-1.0]),
            c=0.0,
            scaled=True,
        )

    def batch_transition(self, batch, x, delta, rng, substeps=16):
        alpha = batch.alphas[:, 0][:, None]
        beta = batch.betas[:, 0][:, None]
        sigma2 = batch.gmat[:, 0, 0][:, None]
        return cir_exact_step(alpha, beta, sigma2, x[..., 0], delta, rng)[..., None]


def cir_exact_step(alpha, beta, sigma2, x, delta, rng):
    """Exact square-root-process transition draw, vectorized over ``x``.

    Uses the noncentral chi-square representation as a Poisson mixture of
    gamma variates, which remains valid when the degrees of freedom
    ``4 alpha beta / sigma^2`` drop below one or reach zero.  Rows with
    ``sigma^2 = 0`` collapse to the deterministic mean path.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    x = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    decay = np.exp(-alpha * delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(
            np.abs(alpha) * delta < SERIES_SWITCH,
            delta,
            -np.expm1(-alpha * delta) / np.where(alpha == 0.0, 1.0, alpha),
        )
    mean_path = decay * x + beta * (1.0 - decay)
    scale = sigma2 * g / 4.0
    deterministic = scale <= 0.0
    safe_scale = np.where(deterministic, 1.0, scale)
    lam = np.where(deterministic, 0.0, decay * x / safe_scale)
    df = np.maximum(
        np.where(deterministic, 0.0, 4.0 * alpha * beta / np.where(sigma2 == 0, 1.0, sigma2)),
        0.0,
    )
    shape = np.broadcast_shapes(lam.shape, df.shape, x.shape)
    lam = np.broadcast_to(lam, shape)
    df = np.broadcast_to(df, shape)
    # Poisson draws overflow for extreme noncentrality; those entries are so
    # concentrated that a moment-matched Gaussian is exact to within 1e-6.
    huge = lam > 1e12
    counts = rng.poisson(np.where(huge, 0.0, lam) / 2.0)
    draws = 2.0 * safe_scale * rng.standard_gamma(df / 2.0 + counts)
    if np.any(huge):
        var = safe_scale**2 * (2.0 * df + 4.0 * lam)
        gauss = np.broadcast_to(mean_path, shape) + np.sqrt(var) * rng.standard_normal(shape)
        draws = np.where(huge, np.maximum(gauss, 0.0), draws)
    return np.where(np.broadcast_to(deterministic, shape), mean_path, draws)


class TwoFactorGaussianFamily(ModelFamily):
    """Mean-zero two-factor Gaussian model, parameters (alpha1, alpha2, sigma1, sigma2, rho)."""

    name = "hw2"
    param_names = ("alpha1", "alpha2", "sigma1", "sigma2", "rho")
    dim = 2
    n_nonneg = 0
    default_priors = {
        "alpha1": (0.0, 0.4),
        "alpha2": (0.0, 0.4),
        "sigma1": (0.0, 0.1),
        "sigma2": (0.0, 0.1),
        "rho": (-0.8, -0.3),
    }
    default_x0_mean = np.zeros(2)
    default_x0_cov = np.eye(2) * 0.1

    def batch_model(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        n = thetas.shape[0]
        alphas = thetas[:, :2].copy()
        s1, s2, rho = thetas[:, 2], thetas[:, 3], thetas[:, 4]
        gmat = np.empty((n, 2, 2))
        gmat[:, 0, 0] = s1**2
        gmat[:, 0, 1] = gmat[:, 1, 0] = s1 * s2 * rho
        gmat[:, 1, 1] = s2**2
        betas = np.zeros((n, 2))
        return BatchModel(
            alphas=alphas,
            betas=betas,
            gmat=gmat,
            drift=np.zeros((n, 2)),
            gamma=np.array([-1.0, -1.0]),
            c=0.0,
            scaled=False,
        )

    def batch_transition(self, batch, x, delta, rng, substeps=16):
        n, m, d = x.shape
        f = np.exp(-batch.alphas * delta)
        q = batch.gmat * decay_integrals_batch(batch.alphas, delta)
        chol = _chol2_batch(q)
        z = rng.standard_normal((n, m, d))
        mean = f[:, None, :] * x + ((1.0 - f) * batch.betas)[:, None, :]
        return mean + np.einsum("nde,nme->nmd", chol, z)


def decay_integrals_batch(alphas: np.ndarray, delta: float) -> np.ndarray:
    """Batched version of :func:`decay_integrals` for ``(n, d)`` decay rates."""
    s = alphas[:, :, None] + alphas[:, None, :]
    small = np.abs(s) * delta < SERIES_SWITCH
    safe = np.where(small, 1.0, s)
    return np.where(small, delta, -np.expm1(-safe * delta) / safe)


def _chol2_batch(q: np.ndarray) -> np.ndarray:
    """Closed-form lower Cholesky factors of a batch of 2x2 PSD matrices."""
    out = np.zeros_like(q)
    l11 = np.sqrt(np.maximum(q[:, 0, 0], 0.0))
    out[:, 0, 0] = l11
    safe = np.where(l11 > 0.0, l11, 1.0)
    l21 = np.where(l11 > 0.0, q[:, 1, 0] / safe, 0.0)
    out[:, 1, 0] = l21
    out[:, 1, 1] = np.sqrt(np.maximum(q[:, 1, 1] - l21**2, 0.0))
    return out


class StochasticVolFamily(ModelFamily):
    """Two-factor model with a square-root volatility driver.

    The state is ``(v, x)`` where ``v`` scales the diffusion of both
    components and only ``x`` loads on the short rate.  Free parameters are
    ``(alpha1, alpha2, beta2, sigma1, sigma2, rho)``; the long-run mean of
    the volatility component is fixed at 0.1.
    """

    name = "sv"
    param_names = ("alpha1", "alpha2", "beta2", "sigma1", "sigma2", "rho")
    dim = 2
    n_nonneg = 1
    vol_mean = 0.1
    default_priors = {
        "alpha1": (0.0, 1.0),
        "alpha2": (0.0, 1.0),
        "beta2": (0.0, 0.1),
        "sigma1": (0.0, 0.8),
        "sigma2": (0.0, 0.2),
        "rho": (-1.0, 1.0),
    }
    default_x0_mean = np.array([0.1, 0.0])
    default_x0_cov = np.eye(2) * 0.01

    def batch_model(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        n = thetas.shape[0]
        alphas = thetas[:, :2].copy()
        betas = np.column_stack([np.full(n, self.vol_mean), thetas[:, 2]])
        s1, s2, rho = thetas[:, 3], thetas[:, 4], thetas[:, 5]
        gmat = np.empty((n, 2, 2))
        gmat[:, 0, 0] = s1**2
        gmat[:, 0, 1] = gmat[:, 1, 0] = s1 * s2 * rho
        gmat[:, 1, 1] = s2**2
        return BatchModel(
            alphas=alphas,
            betas=betas,
            gmat=gmat,
            drift=alphas * betas,
            gamma=np.array([0.0, -1.0]),
            c=0.0,
            scaled=True,
        )

    def batch_transition(self, batch, x, delta, rng, substeps=16):
        n, m, d = x.shape
        sub = delta / substeps
        f = np.exp(-batch.alphas * sub)
        chol = _chol2_batch(batch.gmat * decay_integrals_batch(batch.alphas, sub))
        offset = ((1.0 - f) * batch.betas)[:, None, :]
        out = x.copy()
        for _ in range(substeps):
            scale = np.maximum(out[..., 0], 0.0)
            z = rng.standard_normal((n, m, d))
            noise = np.einsum("nde,nme->nmd", chol, z) * np.sqrt(scale)[..., None]
            out = f[:, None, :] * out + offset + noise
            out[..., 0] = np.maximum(out[..., 0], 0.0)
        return out


_FAMILIES: dict[str, ModelFamily] = {
    f.name: f for f in (CIRFamily(), TwoFactorGaussianFamily(), StochasticVolFamily())
}


def get_family(name) -> ModelFamily:
    """Look up a model family by name, or pass an instance through."""
    if isinstance(name, ModelFamily):
        return name
    try:
        return _FAMILIES[name]
    except KeyError:
        raise ValueError(
            f"unknown model family {name!r}; available: {sorted(_FAMILIES)}"
        ) from None


def family_names() -> Sequence[str]:
    return tuple(sorted(_FAMILIES))
