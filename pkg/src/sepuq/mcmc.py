"""Metropolis-within-Gibbs sampling of (theta, a) on the surrogate posterior.

Each sweep proposes, for every j, a random-walk move of theta_j that carries
the column a_{., j} along with the GP mean (a' = a + mu(theta') - mu(theta),
a volume-preserving and symmetric map), followed by a random-walk move of
every a_ij.  The likelihood never touches the PDE: it only needs the cached
products prod_j a_ij and the sampled modes V_i.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import NumericalError, ValidationError
from .gp import GPBank
from .kle import KLBasis
from .vb import ObservationSet, ThetaPrior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 100_000
    burn_in: int = 10_000
    step_theta: float = 0.05
    step_a: float = 0.02  # in units of sigma_a
    thin: int = 10
    seed: int = 0
    adapt_every: int = 100
    target_accept: tuple = (0.25, 0.40)
    chunk: int = 1000
    check_every: int = 10_000

    def __post_init__(self):
        if not (0 <= self.burn_in < self.iterations):
            raise ValidationError(f"need 0 <= burn_in < iterations, got {self.burn_in}, "
                                  f"{self.iterations}")
        if not (self.step_theta > 0 and self.step_a > 0 and self.thin >= 1
                and self.adapt_every >= 1 and self.chunk >= 1 and self.check_every >= 1):
            raise ValidationError(f"invalid MCMC configuration {self}")
        lo, hi = self.target_accept
        if not 0 < lo < hi < 1:
            raise ValidationError(f"invalid acceptance window {self.target_accept}")


@dataclass(frozen=True, eq=False)
class Target:
    """Posterior density of (theta, a); ``y`` may be empty (prior-only target)."""

    gps: GPBank
    y: np.ndarray
    V: np.ndarray
    sigma_y: float
    prior: ThetaPrior = ThetaPrior()

    @classmethod
    def from_observations(cls, gps: GPBank, obs: ObservationSet | None,
                          prior: ThetaPrior = ThetaPrior()) -> "Target":
        n1 = gps.shape[0]
        if obs is None:
            return cls(gps, np.zeros(0), np.zeros((n1, 0)), 1.0, prior)
        if obs.n_modes != n1:
            raise ValidationError(f"GP bank has {n1} terms, observations {obs.n_modes}")
        return cls(gps, np.ascontiguousarray(obs.values), np.ascontiguousarray(obs.V),
                   obs.sigma_y, prior)


def log_posterior(theta, a, target: Target) -> float:
    """Unnormalized log density: Gaussian likelihood, GP prior on a, Gaussian prior on theta."""
    theta = np.asarray(theta, dtype=float)
    a = np.asarray(a, dtype=float)
    n1, n2 = target.gps.shape
    if theta.shape != (n2,) or a.shape != (n1, n2):
        raise ValidationError(f"expected theta ({n2},) and a ({n1}, {n2})")
    pred = np.prod(a, axis=1) @ target.V
    val = -0.5 * float(np.sum((target.y - pred) ** 2)) / target.sigma_y**2
    for j in range(n2):
        mu, var = target.gps.predict(j, theta[j])
        val += float(-0.5 * np.sum((a[:, j] - mu) ** 2) / var - 0.5 * n1 * np.log(var))
    val += float(np.sum(target.prior.logpdf(theta)))
    if not np.isfinite(val):
        raise NumericalError("non-finite log posterior")
    return val


@dataclass(eq=False)
class ChainState:
    """Current point of the chain plus the caches the sweep kernel maintains."""

    target: Target
    theta: np.ndarray
    a: np.ndarray
    step_theta: np.ndarray
    step_a: np.ndarray
    prod: np.ndarray = field(init=False)
    pred: np.ndarray = field(init=False)
    col_mu: np.ndarray = field(init=False)
    col_var: np.ndarray = field(init=False)
    col_lp: np.ndarray = field(init=False)
    loglik: np.ndarray = field(init=False)

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        self.a = np.array(self.a, dtype=float)
        self.refresh()

    @classmethod
    def initial(cls, target: Target, config: McmcConfig = McmcConfig(), theta=None):
        """Start at theta (default 0) with a on the GP mean."""
        n1, n2 = target.gps.shape
        theta = np.zeros(n2) if theta is None else np.asarray(theta, dtype=float)
        a = np.empty((n1, n2))
        for j in range(n2):
            a[:, j] = target.gps.mean(j, theta[j])
        return cls(target, theta, a, np.full(n2, config.step_theta),
                   np.full((n1, n2), config.step_a * target.gps.hyper.sigma_a))

    def refresh(self):
        """Recompute every cache from (theta, a)."""
        t = self.target
        n1, n2 = t.gps.shape
        self.prod = np.prod(self.a, axis=1)
        self.pred = self.prod @ t.V
        self.col_mu = np.empty((n1, n2))
        self.col_var = np.empty(n2)
        self.col_lp = np.empty(n2)
        for j in range(n2):
            self.col_mu[:, j], var = t.gps.predict(j, self.theta[j])
            self.col_var[j] = var
            self.col_lp[j] = -0.5 * np.sum((self.a[:, j] - self.col_mu[:, j]) ** 2) / var \
                - 0.5 * n1 * np.log(var)
        self.loglik = np.array([-0.5 * np.sum((t.y - self.pred) ** 2) / t.sigma_y**2])

    @property
    def log_posterior(self) -> float:
        return float(self.loglik[0] + self.col_lp.sum()
                     + np.sum(self.target.prior.logpdf(self.theta)))

    def check_cache(self, rtol: float = 1e-8) -> float:
        """Compare the cached log posterior with a recomputation; return the gap."""
        exact = log_posterior(self.theta, self.a, self.target)
        gap = abs(self.log_posterior - exact)
        if gap > rtol * max(1.0, abs(exact)):
            raise NumericalError(f"cached log posterior drifted by {gap:.3e}")
        return gap


def _draws(rng: np.random.Generator, n: int, n1: int, n2: int):
    # uniforms in (0, 1] so that log(u) is finite
    return (rng.standard_normal((n, n2)), 1.0 - rng.random((n, n2)),
            rng.standard_normal((n, n1, n2)), 1.0 - rng.random((n, n1, n2)))


def step(state: ChainState, rng: np.random.Generator, n_sweeps: int = 1):
    """Advance the chain by ``n_sweeps`` sweeps in place.

    Returns (theta trace (n_sweeps, N2), accepted theta moves (N2,),
    accepted a moves (N1, N2)).
    """
    t = state.target
    n1, n2 = t.gps.shape
    zt, ut, za, ua = _draws(rng, n_sweeps, n1, n2)
    acc_t = np.zeros(n2, dtype=np.int64)
    acc_a = np.zeros((n1, n2), dtype=np.int64)
    trace = np.empty((n_sweeps, n2))
    h = t.gps.hyper
    _kernels.sweep_chunk(state.theta, state.a, state.prod, state.pred, state.col_mu,
                         state.col_var, state.col_lp, state.loglik,
                         t.y, t.V, float(t.sigma_y), float(t.prior.theta0), float(t.prior.sigma0),
                         t.gps.inputs, t.gps.weights, t.gps.lower,
                         float(h.sigma_a**2), float(h.sigma_1**2), float(h.length),
                         state.step_theta, state.step_a, zt, ut, za, ua, acc_t, acc_a, trace)
    return trace, acc_t, acc_a


def _adapt(steps: np.ndarray, rate: np.ndarray, window) -> None:
    lo, hi = window
    steps[rate < lo] *= 0.7
    steps[rate > hi] *= 1.3


@dataclass
class ChainResult:
    samples: np.ndarray  # thinned post-burn-in theta, (n_kept, N2)
    accept_theta: np.ndarray
    accept_a: np.ndarray
    step_theta: np.ndarray
    step_a: np.ndarray
    seconds: float
    sweeps: int
    final: ChainState = field(repr=False)
    warnings: list = field(default_factory=list)

    @property
    def theta_mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def theta_std(self) -> np.ndarray:
        return self.samples.std(axis=0)

    @property
    def running_mean(self) -> np.ndarray:
        """Running mean of E theta_j over the kept samples."""
        n = np.arange(1, self.samples.shape[0] + 1)[:, None]
        return np.cumsum(self.samples, axis=0) / n

    @property
    def seconds_per_sweep(self) -> float:
        return self.seconds / max(self.sweeps, 1)

    def log_kappa_moments(self, basis: KLBasis, batch: int = 2000):
        """Posterior mean and std of log kappa at the nodes."""
        modes = basis.modes
        s1 = np.zeros(modes.shape[1])
        s2 = np.zeros(modes.shape[1])
        for start in range(0, self.samples.shape[0], batch):
            lk = self.samples[start:start + batch] @ modes
            s1 += lk.sum(0)
            s2 += (lk**2).sum(0)
        n = self.samples.shape[0]
        mean = s1 / n
        return mean, np.sqrt(np.maximum(s2 / n - mean**2, 0.0))


def run_chain(gps: GPBank, obs: ObservationSet | None, config: McmcConfig = McmcConfig(),
              prior: ThetaPrior = ThetaPrior(), theta0=None) -> ChainResult:
    """Adaptive burn-in, then a fixed-proposal chain thinned by ``config.thin``."""
    target = Target.from_observations(gps, obs, prior)
    state = ChainState.initial(target, config, theta0)
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()

    done = 0
    while done < config.burn_in:
        n = min(config.adapt_every, config.burn_in - done)
        _, acc_t, acc_a = step(state, rng, n)
        _adapt(state.step_theta, acc_t / n, config.target_accept)
        _adapt(state.step_a, acc_a / n, config.target_accept)
        done += n

    kept = []
    acc_t = np.zeros(state.theta.size)
    acc_a = np.zeros(state.a.shape)
    next_check = done + config.check_every
    while done < config.iterations:
        n = min(config.chunk, config.iterations - done)
        trace, at, aa = step(state, rng, n)
        acc_t += at
        acc_a += aa
        # sweep index s (1-based) is kept when (s - burn_in) % thin == 0
        idx = np.arange(done + 1, done + n + 1)
        kept.append(trace[(idx - config.burn_in) % config.thin == 0])
        done += n
        if done >= next_check:
            state.check_cache()
            next_check += config.check_every
    seconds = time.perf_counter() - start

    n_post = config.iterations - config.burn_in
    rate_t, rate_a = acc_t / n_post, acc_a / n_post
    warnings = []
    for name, rate in (("theta", rate_t), ("a", rate_a)):
        if rate.size and (rate.min() < 0.05 or rate.max() > 0.95):
            msg = (f"{name} acceptance rates span [{rate.min():.3f}, {rate.max():.3f}], "
                   f"outside [0.05, 0.95]")
            log.warning(msg)
            warnings.append(msg)
    samples = np.concatenate(kept) if kept else np.zeros((0, state.theta.size))
    return ChainResult(samples, rate_t, rate_a, state.step_theta.copy(), state.step_a.copy(),
                       seconds, config.iterations, state, warnings)


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Monte-Carlo standard error of the mean of a correlated series (per column)."""
    x = np.asarray(x, dtype=float)
    n = (x.shape[0] // n_batches) * n_batches
    if n == 0:
        raise ValidationError("series shorter than the number of batches")
    means = x[:n].reshape(n_batches, -1, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)
