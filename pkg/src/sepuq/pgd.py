"""Fully separable surrogate u(x, theta) ~ sum_i prod_j a_ij(theta_j) v_i(x).

Terms are added greedily.  Each new term minimizes the Galerkin energy of
the current residual by alternating between one FEM solve for the spatial
factor and closed-form updates of each parametric factor on the theta grid.
All parametric integrals factorize because log kappa is linear in theta:

    int kappa(x, theta) prod_j a_j(theta_j) b_j(theta_j) dtheta
        = prod_j sum_q w_q exp(alpha_q phi_j(x)) a_j(alpha_q) b_j(alpha_q)

The residual is never formed strongly; :class:`ResidualLedger` evaluates
<f_n, test> = <f, test> - sum_m B(term_m, test) in weak form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .kle import KLBasis
from .mesh import GridMesh, l2_norm, sample_at_points, solve_linear

log = logging.getLogger(__name__)


MEASURES = ("gaussian", "lebesgue")


@dataclass(frozen=True)
class ThetaGrid:
    """Evenly spaced grid on [theta_min, theta_max] with trapezoid weights.

    ``measure`` selects the parametric measure used by the surrogate's
    Galerkin integrals: ``"gaussian"`` weights the trapezoid rule by the
    standard normal prior density, ``"lebesgue"`` uses plain d(theta).
    """

    theta_min: float = -5.0
    theta_max: float = 5.0
    n_grid: int = 21
    measure: str = "gaussian"

    def __post_init__(self):
        if not (self.theta_max > self.theta_min and self.n_grid >= 2):
            raise ValidationError(f"invalid theta grid {self}")
        if self.measure not in MEASURES:
            raise ValidationError(f"unknown parametric measure {self.measure!r}")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.theta_min, self.theta_max, self.n_grid)

    @property
    def spacing(self) -> float:
        return (self.theta_max - self.theta_min) / (self.n_grid - 1)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.n_grid, self.spacing)
        w[[0, -1]] *= 0.5
        return w

    @property
    def quadrature_weights(self) -> np.ndarray:
        if self.measure == "lebesgue":
            return self.weights
        pts = self.points
        return self.weights * np.exp(-0.5 * pts**2) / np.sqrt(2.0 * np.pi)

    def check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        eps = 1e-12 * (self.theta_max - self.theta_min)
        if not np.isfinite(theta).all() or (theta < self.theta_min - eps).any() \
                or (theta > self.theta_max + eps).any():
            raise ValidationError(
                f"theta outside [{self.theta_min}, {self.theta_max}]: {theta}")
        return np.clip(theta, self.theta_min, self.theta_max)

    def locate(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Left grid index and fractional offset for linear interpolation."""
        theta = self.check(theta)
        s = (theta - self.theta_min) / self.spacing
        idx = np.minimum(np.floor(s).astype(np.int64), self.n_grid - 2)
        return idx, s - idx

    def snap(self, theta) -> np.ndarray:
        """Nearest grid point (after clipping into range)."""
        theta = np.clip(np.asarray(theta, dtype=float), self.theta_min, self.theta_max)
        k = np.rint((theta - self.theta_min) / self.spacing)
        return self.points[k.astype(np.int64)]


@dataclass(frozen=True)
class PGDTolerances:
    tol_a: float = 1e-6
    tol_v: float = 1e-6
    tol_f: float = 1e-8  # relative to the initial residual estimate
    max_sweeps: int = 50

    def __post_init__(self):
        if not (self.tol_a > 0 and self.tol_v > 0 and self.tol_f > 0 and self.max_sweeps >= 1):
            raise ValidationError(f"tolerances must be positive, got {self}")


class _Factorized:
    """exp(alpha_q phi_j(x)) for every mode, grid point and node."""

    def __init__(self, basis: KLBasis, grid: ThetaGrid):
        self.basis, self.grid = basis, grid
        self.modes = basis.modes
        self.w = grid.quadrature_weights
        with np.errstate(over="raise"):
            try:
                self.exp = np.exp(grid.points[None, :, None] * self.modes[:, None, :])
            except FloatingPointError as exc:
                raise NumericalError("overflow in exp(theta * phi)") from exc

    def moments(self, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
        """(..., N2, nodes): sum_q w_q e^{alpha_q phi_j} a_j(alpha_q) b_j(alpha_q)."""
        return np.einsum("jqx,...jq->...jx", self.exp, self.w * rows_a * rows_b)

    def moment(self, j: int, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
        return np.einsum("qx,...q->...x", self.exp[j], self.w * rows_a * rows_b)


def _prod_except(m: np.ndarray, j: int | None) -> np.ndarray:
    """Product over the mode axis (-2) skipping index ``j``."""
    if j is None:
        return np.prod(m, axis=-2)
    return np.prod(np.delete(m, j, axis=-2), axis=-2)


def kappa_moment_field(basis: KLBasis, grid: ThetaGrid, rows_a, rows_b,
                       skip_j: int | None = None, theta_j_value: float | None = None,
                       _fac: _Factorized | None = None) -> np.ndarray:
    """Factorized int kappa prod_j a_j b_j d(theta) as a nodal field.

    With ``skip_j`` set, the j-th integral is replaced by the pointwise factor
    exp(theta_j_value * phi_j), i.e. the slice at fixed theta_j.
    """
    rows_a = np.asarray(rows_a, dtype=float)
    rows_b = np.asarray(rows_b, dtype=float)
    shape = (basis.n_terms, grid.n_grid)
    if rows_a.shape != shape or rows_b.shape != shape:
        raise ValidationError(f"rows must have shape {shape}")
    if (skip_j is None) != (theta_j_value is None):
        raise ValidationError("skip_j and theta_j_value must be given together")
    fac = _fac or _Factorized(basis, grid)
    field_ = _prod_except(fac.moments(rows_a, rows_b), skip_j)
    if skip_j is not None:
        with np.errstate(over="raise"):
            try:
                field_ = field_ * np.exp(theta_j_value * fac.modes[skip_j])
            except FloatingPointError as exc:
                raise NumericalError("overflow in exp(theta * phi)") from exc
    if field_.ndim == 0:
        field_ = np.full(basis.weights.size, float(field_))
    return field_


@dataclass
class ResidualLedger:
    """Weak-form residual <f_n, .> = <f, .> - sum_m B(a_m (x) v_m, .)."""

    mesh: GridMesh
    basis: KLBasis
    grid: ThetaGrid
    f: np.ndarray
    v: list = field(default_factory=list)
    a: list = field(default_factory=list)
    _fac: _Factorized | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._fac is None:
            self._fac = _Factorized(self.basis, self.grid)
        self.load = self.mesh.ops.mass @ self.f  # nodal <f, hat_n>

    def with_terms(self, v, a) -> "ResidualLedger":
        return ResidualLedger(self.mesh, self.basis, self.grid, self.f,
                              self.v + list(v), self.a + list(a), self._fac)

    @property
    def n_terms(self) -> int:
        return len(self.v)

    def apply(self, rows, w) -> float:
        """<f_n, b (x) w> for parametric rows ``b`` (N2, n_grid) and nodal ``w``."""
        rows = np.asarray(rows, dtype=float)
        w = np.asarray(w, dtype=float)
        val = float(self.load @ w) * float(np.prod(rows @ self._fac.w))
        if self.n_terms:
            vm = np.asarray(self.v)
            am = np.asarray(self.a)
            dens = self.mesh.ops.energy_densities(vm, w)
            coef = _prod_except(self._fac.moments(am, rows[None]), None)
            val -= float(np.einsum("mx,mx->", coef, dens))
        return val

    def nodal_residual(self, rows=None) -> np.ndarray:
        """<f_n, b (x) hat_x> for every node x (constant b by default)."""
        if rows is None:
            rows = np.ones((self.basis.n_terms, self.grid.n_grid))
        res = self.load * float(np.prod(rows @ self._fac.w))
        if self.n_terms:
            coef = _prod_except(self._fac.moments(np.asarray(self.a), rows[None]), None)
            res = res - self.mesh.ops.apply(coef, np.asarray(self.v))
        return res

    def dual_norm(self) -> float:
        """max over interior hats of |<f_n, c (x) hat>| / (||c||_L2 ||hat||_H1), c constant."""
        res = self.nodal_residual()[self.mesh.free]
        if res.size == 0:
            return 0.0
        hat_h1 = self.mesh.ops.hat_h1_norm
        c_l2 = np.sqrt(float(self._fac.w.sum()) ** self.basis.n_terms)
        return float(np.abs(res).max() / (hat_h1 * c_l2))


def residual_ledger_apply(ledger: ResidualLedger, rows, w) -> float:
    return ledger.apply(rows, w)


@dataclass
class TermDiagnostics:
    energy: float  # E_n = 1/2 ||t||^2 - <f_{n-1}, t>
    norm_sq: float  # ||a_n (x) v_n||^2 in the tensor energy norm
    projection: float  # <f_{n-1}, a_n (x) v_n>
    residual: float  # dual-norm estimate of f_n after accepting the term
    sweeps: int
    converged: bool

    @property
    def decrement(self) -> float:
        """||u_{n-1}||^2 - ||u_n||^2 = 2 <f_{n-1}, t> - ||t||^2."""
        return 2.0 * self.projection - self.norm_sq


@dataclass(eq=False)
class SeparableSolution:
    mesh: GridMesh
    basis: KLBasis
    grid: ThetaGrid
    f: np.ndarray
    v: np.ndarray  # (n_terms, n_nodes)
    a: np.ndarray  # (n_terms, N2, n_grid)
    diagnostics: list = field(default_factory=list)
    initial_residual: float = 0.0

    @property
    def n_terms(self) -> int:
        return self.v.shape[0]

    @property
    def n_params(self) -> int:
        return self.basis.n_terms

    def ledger(self) -> ResidualLedger:
        return ResidualLedger(self.mesh, self.basis, self.grid, self.f, list(self.v), list(self.a))

    def coefficients(self, theta) -> np.ndarray:
        """prod_j a_ij(theta_j) for every term, with linear interpolation in theta."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValidationError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        if self.n_terms == 0:
            return np.zeros(0)
        idx, frac = self.grid.locate(theta)
        cols = np.arange(self.n_params)
        vals = (1 - frac) * self.a[:, cols, idx] + frac * self.a[:, cols, idx + 1]
        return np.prod(vals, axis=1)


class PGDBuilder:
    """State of the greedy enrichment; one term is under construction at a time."""

    def __init__(self, mesh: GridMesh, basis: KLBasis, grid: ThetaGrid, f,
                 tols: PGDTolerances = PGDTolerances()):
        self.mesh, self.basis, self.grid, self.tols = mesh, basis, grid, tols
        self.f = np.broadcast_to(np.asarray(f, dtype=float), (mesh.n_nodes,)).copy()
        self.fac = _Factorized(basis, grid)
        self.ledger = ResidualLedger(mesh, basis, grid, self.f, _fac=self.fac)
        self.diagnostics: list[TermDiagnostics] = []
        self._start_term()

    # -- current term ---------------------------------------------------
    def _start_term(self):
        n2, g = self.basis.n_terms, self.grid.n_grid
        self.a = np.ones((n2, g))
        self.v = np.zeros(self.mesh.n_nodes)
        self.v[self.mesh.free] = 1.0
        self._refresh_moments()

    def _refresh_moments(self):
        self.m_aa = self.fac.moments(self.a, self.a)  # (N2, nodes)
        self.s = self.a @ self.fac.w  # (N2,)
        if self.ledger.n_terms:
            self.m_cross = self.fac.moments(np.asarray(self.ledger.a), self.a[None])  # (m, N2, nodes)
        else:
            self.m_cross = np.zeros((0, self.basis.n_terms, self.mesh.n_nodes))

    def _refresh_moment(self, j: int):
        self.m_aa[j] = self.fac.moment(j, self.a[j], self.a[j])
        self.s[j] = self.a[j] @ self.fac.w
        if self.ledger.n_terms:
            self.m_cross[:, j] = self.fac.moment(j, np.asarray(self.ledger.a)[:, j], self.a[j])

    def solve_spatial_mode(self) -> np.ndarray:
        """Galerkin solve for v with the parametric factors frozen."""
        ops = self.mesh.ops
        kbar = _prod_except(self.m_aa, None)
        if np.ndim(kbar) == 0:
            kbar = np.full(self.mesh.n_nodes, float(kbar))
        rhs = self.ledger.load * float(np.prod(self.s))
        if self.ledger.n_terms:
            rhs = rhs - ops.apply(_prod_except(self.m_cross, None), np.asarray(self.ledger.v))
        v = np.zeros(self.mesh.n_nodes)
        v[self.mesh.free] = solve_linear(ops.stiffness(kbar), rhs[self.mesh.free])
        return self.set_spatial_mode(v)

    def set_spatial_mode(self, v) -> np.ndarray:
        """Install ``v`` as the current spatial factor and refresh the cached integrals."""
        ops = self.mesh.ops
        v = np.asarray(v, dtype=float).copy()
        self.v = v
        self._dens = ops.energy_density(v, v)
        self._dens_cross = (ops.energy_densities(np.asarray(self.ledger.v), v)
                            if self.ledger.n_terms else np.zeros((0, self.mesh.n_nodes)))
        self._load_v = float(self.ledger.load @ v)
        return v

    def update_parametric_mode(self, j: int) -> np.ndarray:
        """Pointwise minimizer a_j(alpha_q) = Num_q / Den_q with v and a_{k != j} frozen."""
        e_j = self.fac.exp[j]  # (G, nodes)
        den = e_j @ (_prod_except(self.m_aa, j) * self._dens)
        num = np.full(self.grid.n_grid, self._load_v * float(np.prod(np.delete(self.s, j))))
        if self.ledger.n_terms:
            cross = e_j @ (_prod_except(self.m_cross, j) * self._dens_cross).T  # (G, m)
            num -= (cross * np.asarray(self.ledger.a)[:, j, :].T).sum(1)
        if not (den > 0).all():
            raise NumericalError(f"nonpositive denominator updating mode {j}; spatial mode is degenerate")
        self.a[j] = num / den
        self._refresh_moment(j)
        return self.a[j]

    def _normalize(self):
        """Unit max-abs parametric rows (largest entry +1), scale moved into v."""
        if self.basis.n_terms == 0:
            return
        idx = np.argmax(np.abs(self.a), axis=1)
        c = self.a[np.arange(self.basis.n_terms), idx]
        if (c == 0).any():
            raise NumericalError("parametric mode vanished identically")
        self.a /= c[:, None]
        scale = float(np.prod(c))
        self.v = self.v * scale
        self._dens = self._dens * scale**2
        self._dens_cross = self._dens_cross * scale
        self._load_v *= scale
        self._refresh_moments()

    def term_products(self) -> tuple[float, float]:
        """(||a (x) v||^2, <f_{n-1}, a (x) v>) for the current term."""
        tt = float(_prod_except(self.m_aa, None) @ self._dens) if self.basis.n_terms else \
            float(self._dens.sum())
        ft = self._load_v * float(np.prod(self.s))
        if self.ledger.n_terms:
            ft -= float(np.einsum("mx,mx->", _prod_except(self.m_cross, None), self._dens_cross))
        return tt, ft

    def build_term(self) -> TermDiagnostics:
        """Alternate spatial/parametric updates until both relative changes fall below tolerance."""
        self._start_term()
        converged = False
        sweeps = 0
        for sweeps in range(1, self.tols.max_sweeps + 1):
            v_old, a_old = self.v.copy(), self.a.copy()
            self.solve_spatial_mode()
            for j in range(self.basis.n_terms):
                self.update_parametric_mode(j)
            self._normalize()
            dv = np.sum((self.v - v_old) ** 2) / max(np.sum(self.v**2), 1e-300)
            da = np.sum((self.a - a_old) ** 2) / max(np.sum(self.a**2), 1e-300)
            if dv <= self.tols.tol_v and da <= self.tols.tol_a:
                converged = True
                break
        if not converged:
            log.warning("term %d: alternating minimization hit %d sweeps without converging",
                        self.ledger.n_terms + 1, self.tols.max_sweeps)
        tt, ft = self.term_products()
        self.ledger = self.ledger.with_terms([self.v.copy()], [self.a.copy()])
        diag = TermDiagnostics(energy=0.5 * tt - ft, norm_sq=tt, projection=ft,
                               residual=self.ledger.dual_norm(), sweeps=sweeps,
                               converged=converged)
        self.diagnostics.append(diag)
        return diag

    def solution(self, initial_residual: float = 0.0) -> SeparableSolution:
        n2, g = self.basis.n_terms, self.grid.n_grid
        v = np.array(self.ledger.v).reshape(-1, self.mesh.n_nodes)
        a = np.array(self.ledger.a, dtype=float).reshape(v.shape[0], n2, g)
        return SeparableSolution(self.mesh, self.basis, self.grid, self.f, v, a,
                                 list(self.diagnostics), initial_residual)


def enrich(mesh: GridMesh, basis: KLBasis, grid: ThetaGrid, f, n_terms: int,
           tols: PGDTolerances = PGDTolerances()) -> SeparableSolution:
    """Greedy construction of up to ``n_terms`` separable terms."""
    if n_terms < 0:
        raise ValidationError("n_terms must be nonnegative")
    builder = PGDBuilder(mesh, basis, grid, f, tols)
    r0 = builder.ledger.dual_norm()
    stop = tols.tol_f * r0
    if r0 <= stop:
        return builder.solution(r0)
    for n in range(n_terms):
        diag = builder.build_term()
        log.info("term %d: |t|^2=%.4e E=%.4e residual=%.3e sweeps=%d",
                 n + 1, diag.norm_sq, diag.energy, diag.residual, diag.sweeps)
        if diag.residual <= stop:
            break
    return builder.solution(r0)


def evaluate_surrogate_field(sol: SeparableSolution, theta) -> np.ndarray:
    coef = sol.coefficients(theta)
    return coef @ sol.v if sol.n_terms else np.zeros(sol.mesh.n_nodes)


def evaluate_surrogate(sol: SeparableSolution, theta, pts) -> np.ndarray:
    return sample_at_points(sol.mesh, evaluate_surrogate_field(sol, theta), pts)


def surrogate_l2_error(sol: SeparableSolution, theta, u_ref) -> float:
    diff = evaluate_surrogate_field(sol, theta) - u_ref
    return l2_norm(sol.mesh, diff) / l2_norm(sol.mesh, u_ref)
