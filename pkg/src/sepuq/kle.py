"""Truncated Karhunen-Loeve parametrization of the log-permeability."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError
from .mesh import GridMesh


@dataclass(frozen=True)
class CovarianceSpec:
    """Isotropic squared-exponential covariance sigma_gf^2 exp(-|x-y|^2 / (2 l0^2))."""

    sigma_gf: float = 0.2
    l0: float = 0.1

    def __post_init__(self):
        if not (self.sigma_gf > 0 and self.l0 > 0):
            raise ValidationError(f"covariance needs sigma_gf > 0 and l0 > 0, got {self}")

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
        return self.sigma_gf**2 * np.exp(-0.5 * d2 / self.l0**2)


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Leading KL eigenpairs on a mesh.

    ``eigenfields`` are orthonormal under the lumped nodal weights and
    ``modes[k] = sqrt(eigenvalues[k]) * eigenfields[k]``, so that
    ``log kappa = theta @ modes``.
    """

    eigenvalues: np.ndarray
    eigenfields: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    trace: float
    spectrum: np.ndarray = field(repr=False)  # every discrete eigenvalue, descending

    @property
    def n_terms(self) -> int:
        return self.eigenvalues.size

    @property
    def n_computed(self) -> int:
        return self.spectrum.size

    @property
    def modes(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)[:, None] * self.eigenfields

    def truncate(self, n: int) -> "KLBasis":
        if not 0 <= n <= self.n_terms:
            raise ValidationError(f"cannot truncate {self.n_terms} modes to {n}")
        return KLBasis(self.eigenvalues[:n], self.eigenfields[:n], self.weights,
                       self.trace, self.spectrum)


def weighted_covariance(mesh: GridMesh, cov: CovarianceSpec) -> np.ndarray:
    """Symmetric matrix W^1/2 C W^1/2 with lumped weights W."""
    w = np.sqrt(mesh.lumped_weights())
    return w[:, None] * cov(mesh.coords, mesh.coords) * w[None, :]


def build_kl_basis(mesh: GridMesh, cov: CovarianceSpec, n_terms: int) -> KLBasis:
    n = mesh.n_nodes
    if not 0 <= n_terms <= n:
        raise ValidationError(f"requested {n_terms} KL terms on a mesh with {n} nodes")
    w = mesh.lumped_weights()
    mat = weighted_covariance(mesh, cov)
    lam, psi = scipy.linalg.eigh(mat)
    lam, psi = lam[::-1], psi[:, ::-1]
    if lam[-1] < -1e-10 * lam[0]:
        raise NumericalError(
            f"discrete covariance is not positive semidefinite (min eigenvalue {lam[-1]:.3e})")
    lam = np.clip(lam, 0.0, None)

    phi = (psi[:, :n_terms] / np.sqrt(w)[:, None]).T
    # sign convention: the largest-magnitude nodal entry is positive
    idx = np.argmax(np.abs(phi), axis=1)
    signs = np.sign(phi[np.arange(n_terms), idx])
    phi *= signs[:, None]
    trace = float(np.trace(mat))
    return KLBasis(lam[:n_terms].copy(), np.ascontiguousarray(phi), w, trace, lam)


def energy_ratio(basis: KLBasis, n: int) -> float:
    """Fraction of the discrete trace captured by the leading ``n`` modes."""
    if not 0 <= n <= basis.n_computed:
        raise ValidationError(f"energy ratio for {n} of {basis.n_computed} computed modes")
    return float(basis.spectrum[:n].sum() / basis.trace)


def log_kappa(basis: KLBasis, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.n_terms,):
        raise ValidationError(f"theta has shape {theta.shape}, expected ({basis.n_terms},)")
    if not np.isfinite(theta).all():
        raise ValidationError("theta contains non-finite values")
    return theta @ basis.modes if basis.n_terms else np.zeros(basis.weights.size)


def kappa(basis: KLBasis, theta) -> np.ndarray:
    return np.exp(log_kappa(basis, theta))


def sample_theta(rng: np.random.Generator, n_terms: int, size=None) -> np.ndarray:
    """Standard normal KL coefficients, i.i.d. across terms."""
    shape = (n_terms,) if size is None else (size, n_terms)
    return rng.standard_normal(shape)
