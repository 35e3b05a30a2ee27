"""Grouped mean-field variational Bayes for the surrogate-based inverse problem.

The model is

    y = sum_i (prod_j a_ij) V_i + eps,          eps ~ N(0, sigma_y^2 I)
    a_ij | theta_j ~ N(mu_ij(theta_j), s^2(theta_j))   (GP predictive)
    theta_j ~ N(theta0, sigma0^2)

and the variational family factorizes over groups G_k = {theta_k, a_1k..a_N1k}.
Given theta_k the optimal factor is Gaussian in a_{.,k} with precision 2 Sigma
and linear coefficient beta, which is what makes the theta marginal and the
(theta_k, a_pk) joint available in closed form up to 1D/2D quadrature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .errors import NumericalError, ValidationError
from .gp import GPBank
from .kle import KLBasis
from .mesh import GridMesh, interpolation_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThetaPrior:
    theta0: float = 0.0
    sigma0: float = 1.0

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValidationError(f"prior std must be positive, got {self.sigma0}")

    def logpdf(self, theta):
        """Log density up to the normalizing constant."""
        return -0.5 * ((np.asarray(theta) - self.theta0) / self.sigma0) ** 2


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Point observations y of u with i.i.d. Gaussian noise.

    ``V[i]`` holds the i-th spatial mode sampled at the observation points.
    """

    locations: np.ndarray
    values: np.ndarray
    sigma_y: float
    V: np.ndarray

    def __post_init__(self):
        m = self.values.shape[0]
        if m < 1:
            raise ValidationError("need at least one observation")
        if self.locations.shape != (m, 2):
            raise ValidationError(f"locations must be ({m}, 2), got {self.locations.shape}")
        if not self.sigma_y > 0:
            raise ValidationError(f"sigma_y must be positive, got {self.sigma_y}")
        if self.V.ndim != 2 or self.V.shape[1] != m:
            raise ValidationError(f"V must be (N1, {m}), got {self.V.shape}")

    @classmethod
    def from_modes(cls, mesh: GridMesh, v: np.ndarray, locations, values, sigma_y: float):
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        interp = interpolation_matrix(mesh, locations)
        V = np.asarray((interp @ np.asarray(v, dtype=float).T).T).reshape(-1, locations.shape[0])
        return cls(locations, np.asarray(values, dtype=float).ravel(), float(sigma_y), V)

    @property
    def n_obs(self) -> int:
        return self.values.size

    @property
    def n_modes(self) -> int:
        return self.V.shape[0]

    def misfit(self, predicted) -> float:
        """||y - predicted||_2 / sqrt(M)."""
        return float(np.linalg.norm(self.values - predicted) / np.sqrt(self.n_obs))


@dataclass(frozen=True)
class VBConfig:
    theta_min: float = -5.0
    theta_max: float = 5.0
    theta_intervals: int = 50
    refine_theta: bool = True  # second pass zoomed onto the mass of q(theta)
    a_window: float = 5.0  # half-width in conditional standard deviations
    a_intervals: int = 50
    tol_theta: float = 1e-10
    tol_a: float = 1e-10
    max_iters: int = 100

    def __post_init__(self):
        if not (self.theta_max > self.theta_min and self.theta_intervals >= 2
                and self.a_window > 0 and self.a_intervals >= 2
                and self.tol_theta > 0 and self.tol_a > 0 and self.max_iters >= 1):
            raise ValidationError(f"invalid VB configuration {self}")


@dataclass
class VBState:
    """Variational moments; ``a_mean[i, j]`` and ``a_var[i, j]`` for a_ij."""

    theta_mean: np.ndarray
    theta_var: np.ndarray
    a_mean: np.ndarray
    a_var: np.ndarray
    prior: ThetaPrior = field(default_factory=ThetaPrior)
    # last evaluated q*(theta_k) on its quadrature nodes, per k (normalized)
    q_nodes: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, gps: GPBank, prior: ThetaPrior = ThetaPrior()) -> "VBState":
        n1, n2 = gps.shape
        theta = np.zeros(n2)
        a_mean = np.empty((n1, n2))
        for j in range(n2):
            a_mean[:, j] = gps.mean(j, 0.0)
        a_var = np.full((n1, n2), float(gps.variance(0.0)))
        return cls(theta, np.full(n2, prior.sigma0**2), a_mean, a_var, prior)

    def copy(self) -> "VBState":
        return VBState(self.theta_mean.copy(), self.theta_var.copy(), self.a_mean.copy(),
                       self.a_var.copy(), self.prior, dict(self.q_nodes))


def compute_R_moments(state: VBState, k: int):
    """E R_m, E R_m^2 and E R_m R_n with R_m = prod_{j != k} a_mj.

    Factors are independent across j and across m, so the cross moment is the
    product of means; its diagonal holds E R_m^2.
    """
    mean = np.delete(state.a_mean, k, axis=1)
    second = mean**2 + np.delete(state.a_var, k, axis=1)
    er = np.prod(mean, axis=1)
    er2 = np.prod(second, axis=1)
    err = np.prod(mean[:, None, :] * mean[None, :, :], axis=2)
    np.fill_diagonal(err, er2)
    return er, er2, err


@dataclass(frozen=True, eq=False)
class _GroupTerms:
    """Quantities of the group-k factor that do not depend on theta_k."""

    gram: np.ndarray  # E(R_m R_n) V_m.V_n / sigma_y^2
    proj: np.ndarray  # E(R_m) V_m.y / sigma_y^2


def _group_terms(state: VBState, obs: ObservationSet, k: int) -> _GroupTerms:
    _, _, err = compute_R_moments(state, k)
    s2 = obs.sigma_y**2
    er = np.prod(np.delete(state.a_mean, k, axis=1), axis=1)
    return _GroupTerms(err * (obs.V @ obs.V.T) / s2, er * (obs.V @ obs.values) / s2)


def sigma_beta(theta_k, state: VBState, obs: ObservationSet, gps: GPBank, k: int,
               _terms: _GroupTerms | None = None):
    """Sigma(theta_k) of shape (..., N1, N1) and beta(theta_k) of shape (..., N1)."""
    theta_k = np.asarray(theta_k, dtype=float)
    terms = _terms or _group_terms(state, obs, k)
    mu = np.moveaxis(gps.mean(k, theta_k), 0, -1)  # (..., N1)
    var = gps.variance(theta_k)[..., None]
    sigma = np.broadcast_to(0.5 * terms.gram, theta_k.shape + terms.gram.shape).copy()
    idx = np.arange(terms.gram.shape[0])
    sigma[..., idx, idx] += 0.5 / var
    beta = terms.proj + mu / var
    return sigma, beta


def _chol(sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Sigma(theta) is not positive definite; check sigma_y and "
                             "the GP variance") from exc


def _quad_form_inv(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """b^T Sigma^-1 b from a batched Cholesky factor."""
    if b.shape[-1] == 0:
        return np.zeros(b.shape[:-1])
    z = np.linalg.solve(chol, b[..., None])[..., 0]
    return (z**2).sum(-1)


def _log_q_theta(theta, state, obs, gps, k, terms=None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    sigma, beta = sigma_beta(theta, state, obs, gps, k, terms)
    mu = np.moveaxis(gps.mean(k, theta), 0, -1)
    var = gps.variance(theta)
    n1 = beta.shape[-1]
    logq = state.prior.logpdf(theta) - 0.5 * n1 * np.log(var)
    if n1:
        chol = _chol(sigma)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
        logq = logq - 0.5 * logdet + 0.25 * _quad_form_inv(chol, beta) \
            - (mu**2).sum(-1) / (2.0 * var)
    if not np.isfinite(logq).all():
        raise NumericalError(f"non-finite log q(theta_{k})")
    return logq


def q_theta_unnormalized(theta_k, state: VBState, obs: ObservationSet, gps: GPBank,
                         k: int) -> np.ndarray:
    """q*(theta_k) on the given points, scaled so that its maximum is 1."""
    logq = _log_q_theta(theta_k, state, obs, gps, k)
    return np.exp(logq - logq.max())


def _trapz_nodes(lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(lo, hi, n + 1)


def theta_nodes(state, obs, gps, k, config: VBConfig, terms=None):
    """Quadrature nodes and log q on them; optionally refined onto the bulk of q."""
    nodes = _trapz_nodes(config.theta_min, config.theta_max, config.theta_intervals)
    logq = _log_q_theta(nodes, state, obs, gps, k, terms)
    if config.refine_theta:
        keep = np.flatnonzero(logq >= logq.max() - 40.0)
        lo = nodes[max(keep[0] - 1, 0)]
        hi = nodes[min(keep[-1] + 1, nodes.size - 1)]
        nodes = _trapz_nodes(lo, hi, config.theta_intervals)
        logq = _log_q_theta(nodes, state, obs, gps, k, terms)
    return nodes, logq


def _normalized(nodes, logq):
    q = np.exp(logq - logq.max())
    z = trapezoid(q, nodes)
    if not (z > 0 and np.isfinite(z)):
        raise NumericalError("normalizer of q(theta) underflowed")
    return q / z


def update_theta(state: VBState, obs: ObservationSet, gps: GPBank, k: int,
                 config: VBConfig = VBConfig()) -> tuple[float, float]:
    nodes, logq = theta_nodes(state, obs, gps, k, config)
    mean, var, q = theta_moments(nodes, logq)
    state.theta_mean[k], state.theta_var[k] = mean, var
    state.q_nodes[k] = (nodes, q)
    return mean, var


def theta_moments(nodes, logq) -> tuple[float, float, np.ndarray]:
    """Mean, variance and normalized density from a log density on trapezoid nodes."""
    q = _normalized(nodes, logq)
    mean = float(trapezoid(q * nodes, nodes))
    var = float(trapezoid(q * (nodes - mean) ** 2, nodes))
    return mean, max(var, 0.0), q


def a_conditional(theta_k, state, obs, gps, p: int, k: int, terms=None):
    """Exponent C0 + L a - P a^2 / 2 of q*(theta_k, a_pk) after integrating out a_{-p,k}.

    Returns (C0, L, P) on the given theta points.
    """
    theta_k = np.asarray(theta_k, dtype=float)
    terms = terms or _group_terms(state, obs, k)
    sigma, beta = sigma_beta(theta_k, state, obs, gps, k, terms)
    mu = np.moveaxis(gps.mean(k, theta_k), 0, -1)
    var = gps.variance(theta_k)
    n1 = beta.shape[-1]
    rest = np.delete(np.arange(n1), p)
    s_r = sigma[..., rest[:, None], rest[None, :]]
    b = beta[..., rest]
    c = terms.gram[rest, p]  # coupling of a_pk with the other a_mk
    chol = _chol(s_r) if rest.size else None
    if rest.size:
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
        sb = np.linalg.solve(s_r, b[..., None])[..., 0]
        cb = sb @ c
        cc = _quad_form_inv(chol, np.broadcast_to(c, b.shape))
        bb = (b * sb).sum(-1)
    else:
        logdet = cb = cc = bb = np.zeros(theta_k.shape)
    prec = 2.0 * sigma[..., p, p] - 0.5 * cc
    lin = beta[..., p] - 0.5 * cb
    c0 = state.prior.logpdf(theta_k) - 0.5 * n1 * np.log(var) - 0.5 * logdet \
        + 0.25 * bb - (mu**2).sum(-1) / (2.0 * var)
    if not (prec > 0).all():
        raise NumericalError(f"conditional precision of a_{p},{k} is not positive")
    return c0, lin, prec


def update_a(state: VBState, obs: ObservationSet, gps: GPBank, p: int, k: int,
             config: VBConfig = VBConfig(), _terms=None) -> tuple[float, float]:
    """Moments of a_pk from 2D trapezoid quadrature of q*(theta_k, a_pk)."""
    terms = _terms or _group_terms(state, obs, k)
    nodes, _ = theta_nodes(state, obs, gps, k, config, terms)
    c0, lin, prec = a_conditional(nodes, state, obs, gps, p, k, terms)
    centre, width = lin / prec, config.a_window / np.sqrt(prec)
    t = np.linspace(-1.0, 1.0, config.a_intervals + 1)
    a = centre[:, None] + width[:, None] * t[None, :]  # (G, A)
    logq = c0[:, None] + lin[:, None] * a - 0.5 * prec[:, None] * a**2
    q = np.exp(logq - logq.max())
    inner = [trapezoid(q * a**r, a, axis=1) for r in range(3)]
    z, m1, m2 = (trapezoid(x, nodes) for x in inner)
    if not (z > 0 and np.isfinite(z)):
        raise NumericalError("normalizer of q(theta, a) underflowed")
    mean = float(m1 / z)
    var = max(float(m2 / z) - mean**2, 0.0)
    state.a_mean[p, k], state.a_var[p, k] = mean, var
    return mean, var


@dataclass
class VBHistory:
    delta_mu: list = field(default_factory=list)  # ||E theta_new - E theta_old||_2
    theta_mean: list = field(default_factory=list)
    delta_theta: list = field(default_factory=list)
    delta_a: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iters(self) -> int:
        return len(self.delta_mu)


def sweep(state: VBState, obs: ObservationSet, gps: GPBank, config: VBConfig) -> None:
    """One pass over the groups in ascending j, then ascending i."""
    n1, n2 = gps.shape
    for k in range(n2):
        terms = _group_terms(state, obs, k)
        update_theta(state, obs, gps, k, config)
        for p in range(n1):
            update_a(state, obs, gps, p, k, config, terms)


def run_vb(gps: GPBank, obs: ObservationSet, config: VBConfig = VBConfig(),
           prior: ThetaPrior = ThetaPrior(), state: VBState | None = None):
    """Coordinate ascent until both the theta and the a means stop moving."""
    if gps.shape[0] != obs.n_modes:
        raise ValidationError(f"GP bank has {gps.shape[0]} terms, observations {obs.n_modes}")
    state = state.copy() if state is not None else VBState.initial(gps, prior)
    hist = VBHistory()
    for it in range(1, config.max_iters + 1):
        theta_old, a_old = state.theta_mean.copy(), state.a_mean.copy()
        sweep(state, obs, gps, config)
        d_theta = float(np.sum((state.theta_mean - theta_old) ** 2))
        d_a = float(np.sum((state.a_mean - a_old) ** 2))
        hist.delta_mu.append(np.sqrt(d_theta))
        hist.delta_theta.append(d_theta)
        hist.delta_a.append(d_a)
        hist.theta_mean.append(state.theta_mean.copy())
        log.debug("VB iteration %d: delta_mu=%.3e delta_a=%.3e", it, np.sqrt(d_theta), d_a)
        if d_theta <= config.tol_theta and d_a <= config.tol_a:
            hist.converged = True
            break
    if not hist.converged:
        log.warning("VB did not converge in %d iterations", config.max_iters)
    return state, hist


def posterior_log_kappa(state: VBState, basis: KLBasis) -> tuple[np.ndarray, np.ndarray]:
    """Nodal mean and variance of log kappa under independent theta factors."""
    if state.theta_mean.size != basis.n_terms:
        raise ValidationError("state and basis disagree on the number of KL terms")
    modes = basis.modes
    return state.theta_mean @ modes, state.theta_var @ modes**2


def surrogate_prediction(state: VBState, obs: ObservationSet) -> np.ndarray:
    """sum_i prod_j E a_ij V_i at the observation points."""
    return np.prod(state.a_mean, axis=1) @ obs.V
