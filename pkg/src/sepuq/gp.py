"""Gaussian-process interpolation of the tabulated parametric modes.

Every a_{i,j} is tabulated on the same theta grid, so all GPs share one
kernel factorization; :class:`GPBank` stores it once together with the
solved weights of every (i, j) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class GPHyper:
    sigma_a: float = 1.0
    sigma_1: float = 1e-3
    length: float = 1.0

    def __post_init__(self):
        if not (self.sigma_a > 0 and self.sigma_1 > 0 and self.length > 0):
            raise ValidationError(f"GP hyperparameters must be positive, got {self}")


def se_kernel(x, y, hyper: GPHyper) -> np.ndarray:
    x = np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float)
    return hyper.sigma_a**2 * np.exp(-0.5 * ((x - y) / hyper.length) ** 2)


def _factor(inputs: np.ndarray, hyper: GPHyper):
    gram = se_kernel(inputs, inputs, hyper) + hyper.sigma_1**2 * np.eye(inputs.size)
    try:
        return scipy.linalg.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"GP kernel matrix is not positive definite: {exc}") from exc


@dataclass(frozen=True, eq=False)
class GPModel:
    """Posterior of one zero-mean GP given noisy values ``targets`` at ``inputs``."""

    inputs: np.ndarray
    targets: np.ndarray
    hyper: GPHyper
    chol: tuple = field(repr=False)
    weights: np.ndarray = field(repr=False)  # (K + s1^2 I)^-1 z


def fit(inputs, targets, hyper: GPHyper = GPHyper()) -> GPModel:
    inputs = np.asarray(inputs, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    if inputs.size != targets.size or inputs.size == 0:
        raise ValidationError(f"GP fit needs matching nonempty inputs/targets, "
                              f"got {inputs.size} and {targets.size}")
    chol = _factor(inputs, hyper)
    return GPModel(inputs, targets, hyper, chol, scipy.linalg.cho_solve(chol, targets))


def predict(model: GPModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance (noise included) at ``x``."""
    x = np.asarray(x, dtype=float)
    kx = se_kernel(x, model.inputs, model.hyper)
    mean = kx @ model.weights
    v = scipy.linalg.solve_triangular(model.chol[0], np.atleast_2d(kx).T, lower=True)
    var = model.hyper.sigma_a**2 - (v**2).sum(0) + model.hyper.sigma_1**2
    return mean, var.reshape(mean.shape)


@dataclass(frozen=True, eq=False)
class GPBank:
    """Independent GPs for every a_{i,j}, sharing one training grid.

    ``weights[i, j]`` is (K + s1^2 I)^-1 applied to the tabulated a_{i,j};
    ``lower`` is the Cholesky factor of K + s1^2 I.
    """

    inputs: np.ndarray
    hyper: GPHyper
    weights: np.ndarray
    lower: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, inputs, tables, hyper: GPHyper = GPHyper()) -> "GPBank":
        """``tables`` has shape (N1, N2, n_grid)."""
        inputs = np.asarray(inputs, dtype=float).ravel()
        tables = np.asarray(tables, dtype=float)
        if tables.ndim != 3 or tables.shape[-1] != inputs.size:
            raise ValidationError(f"tables must be (N1, N2, {inputs.size}), got {tables.shape}")
        chol = _factor(inputs, hyper)
        flat = tables.reshape(-1, inputs.size).T
        weights = scipy.linalg.cho_solve(chol, flat).T.reshape(tables.shape) if flat.size else \
            np.zeros(tables.shape)
        return cls(inputs, hyper, weights, np.tril(chol[0]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape[:2]

    def variance(self, x) -> np.ndarray:
        """Predictive variance; identical for every (i, j)."""
        x = np.asarray(x, dtype=float)
        kx = se_kernel(x, self.inputs, self.hyper).reshape(-1, self.inputs.size)
        v = scipy.linalg.solve_triangular(self.lower, kx.T, lower=True)
        quad = (v**2).sum(0).reshape(x.shape)
        return self.hyper.sigma_a**2 - quad + self.hyper.sigma_1**2

    def mean(self, j: int, x) -> np.ndarray:
        """Predictive means of a_{., j} at ``x``; shape (N1,) + shape(x)."""
        kx = se_kernel(x, self.inputs, self.hyper)
        return np.tensordot(self.weights[:, j], kx, axes=([1], [-1]))

    def predict(self, j: int, x) -> tuple[np.ndarray, np.ndarray]:
        return self.mean(j, x), self.variance(x)
