"""Q1 finite elements for -div(kappa grad u) = f on the unit square.

Fields are plain float arrays holding one value per mesh node (row-major
node ordering, ``node = iy * (nx + 1) + ix``).  Coefficients such as kappa
are nodal and interpolated bilinearly to the 2x2 Gauss points, which makes
every bilinear form *linear in the nodal coefficient*.  We exploit that
throughout: the stiffness values are a fixed linear map of kappa and the
quadratic form u^T K(kappa) w equals ``kappa @ energy_density(u, w)``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .errors import NumericalError, ValidationError

_GAUSS = 1.0 / np.sqrt(3.0)
# reference corners, counter-clockwise from (0, 0)
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


def _reference_tensors(hx: float, hy: float):
    gp = [(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)]
    detj = 0.25 * hx * hy
    shape = np.empty((4, 4))  # [gauss point, local node]
    grad = np.empty((4, 2, 4))  # [gauss point, x/y, local node]
    for q, (xi, eta) in enumerate(gp):
        shape[q] = 0.25 * (1 + _XI * xi) * (1 + _ETA * eta)
        grad[q, 0] = 0.25 * _XI * (1 + _ETA * eta) * (2.0 / hx)
        grad[q, 1] = 0.25 * _ETA * (1 + _XI * xi) * (2.0 / hy)
    # H[c, a, b] = sum_q N_c(q) |J| grad N_a(q) . grad N_b(q)
    gg = np.einsum("qia,qib->qab", grad, grad)
    stiff = detj * np.einsum("qc,qab->cab", shape, gg)
    mass = detj * np.einsum("qa,qb->ab", shape, shape)
    return shape, grad, stiff, mass, detj


@dataclass(frozen=True, eq=False)
class GridMesh:
    """Uniform nx-by-ny quadrilateral mesh of [0, 1]^2."""

    nx: int
    ny: int
    coords: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    free: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    def element_areas(self) -> np.ndarray:
        return np.full(self.n_elements, self.hx * self.hy)

    def lumped_weights(self) -> np.ndarray:
        """Each node's share of the domain area (row sums of the Q1 mass matrix)."""
        wx = np.full(self.nx + 1, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny + 1, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wy, wx).ravel()

    def node_grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape a nodal field to (ny + 1, nx + 1) for plotting."""
        return np.asarray(values).reshape(self.ny + 1, self.nx + 1)

    @property
    def ops(self) -> "_Operators":
        return _operators(self)


def build_mesh(nx: int, ny: int) -> GridMesh:
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise ValidationError(f"mesh needs at least 2 cells per axis, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)
    x = np.linspace(0.0, 1.0, nx + 1)
    y = np.linspace(0.0, 1.0, ny + 1)
    xx, yy = np.meshgrid(x, y)
    coords = np.column_stack([xx.ravel(), yy.ravel()])

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    ll = (iy * (nx + 1) + ix).ravel()
    elements = np.column_stack([ll, ll + 1, ll + nx + 2, ll + nx + 1])

    on_bnd = (
        (np.isclose(coords[:, 0], 0.0)) | (np.isclose(coords[:, 0], 1.0))
        | (np.isclose(coords[:, 1], 0.0)) | (np.isclose(coords[:, 1], 1.0))
    )
    boundary = np.flatnonzero(on_bnd)
    free = np.flatnonzero(~on_bnd)
    return GridMesh(nx, ny, coords, elements, boundary, free)


class _Operators:
    """Precomputed sparsity patterns and reference tensors for one mesh."""

    def __init__(self, mesh: GridMesh):
        shape, grad, stiff, mass, detj = _reference_tensors(mesh.hx, mesh.hy)
        self.shape, self.grad, self.stiff, self.mass_ref, self.detj = shape, grad, stiff, mass, detj
        conn = self.conn = mesh.elements
        n = self.n_nodes = mesh.n_nodes
        self.n_free = mesh.free.size

        gfree = -np.ones(n, dtype=np.int64)
        gfree[mesh.free] = np.arange(mesh.free.size)
        self.free_index = gfree

        rows = np.repeat(conn, 4, axis=1)  # (ne, 16), a-major
        cols = np.tile(conn, (1, 4))
        r, c = gfree[rows], gfree[cols]
        keep = (r >= 0) & (c >= 0)
        self._keep = keep.ravel()
        # CSR pattern over free nodes plus a scatter map from kept local entries
        nf = mesh.free.size
        pat = sp.coo_matrix((np.ones(keep.sum()), (r[keep], c[keep])), shape=(nf, nf)).tocsr()
        pat.sum_duplicates()
        pat.sort_indices()
        self.indptr, self.indices = pat.indptr, pat.indices
        flat_pos = r[keep].astype(np.int64) * nf + c[keep]
        key = np.repeat(np.arange(nf, dtype=np.int64), np.diff(self.indptr)) * nf + self.indices
        self._scatter = np.searchsorted(key, flat_pos)

        self.mass = sp.coo_matrix(
            (np.broadcast_to(mass.ravel(), (conn.shape[0], 16)).ravel(),
             (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()

    def stiffness(self, kappa: np.ndarray) -> sp.csr_matrix:
        """Stiffness over free nodes for a nodal coefficient."""
        local = np.einsum("ec,cab->eab", kappa[self.conn], self.stiff).reshape(-1, 16)
        data = np.bincount(self._scatter, weights=local.ravel()[self._keep],
                           minlength=self.indices.size)
        nf = self.n_free
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(nf, nf))

    def energy_density(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Nodal vector g with ``kappa @ g == int kappa grad u . grad w`` for any nodal kappa."""
        conn = self.conn
        ge = np.einsum("cab,ea,eb->ec", self.stiff, u[conn], w[conn])
        return np.bincount(conn.ravel(), weights=ge.ravel(), minlength=self.n_nodes)

    def energy_densities(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Batched :meth:`energy_density` for stacked fields ``u[m]`` against one ``w``."""
        conn = self.conn
        u = np.atleast_2d(u)
        ge = np.einsum("cab,mea,eb->mec", self.stiff, u[:, conn], w[conn])
        # one bincount over (m, node) pairs
        idx = (np.arange(u.shape[0])[:, None] * self.n_nodes + conn.ravel()[None, :]).ravel()
        out = np.bincount(idx, weights=ge.ravel(), minlength=u.shape[0] * self.n_nodes)
        return out.reshape(u.shape[0], self.n_nodes)

    def apply(self, kappas: np.ndarray, us: np.ndarray) -> np.ndarray:
        """sum_m K_full(kappas[m]) @ us[m] over all nodes, boundary rows included."""
        conn = self.conn
        kappas = np.atleast_2d(kappas)
        us = np.atleast_2d(us)
        re = np.einsum("mec,cab,meb->ea", kappas[:, conn], self.stiff, us[:, conn])
        return np.bincount(conn.ravel(), weights=re.ravel(), minlength=self.n_nodes)

    @property
    def hat_h1_norm(self) -> float:
        """H1 norm of an interior hat function (identical for every interior node)."""
        # an interior node is corner a of four elements; sum the four diagonal entries
        k = sum(self.stiff.sum(0)[a, a] for a in range(4))
        m = sum(self.mass_ref[a, a] for a in range(4))
        return float(np.sqrt(k + m))


_OPS_CACHE: "weakref.WeakKeyDictionary[GridMesh, _Operators]" = weakref.WeakKeyDictionary()


def _operators(mesh: GridMesh) -> _Operators:
    ops = _OPS_CACHE.get(mesh)
    if ops is None:
        ops = _OPS_CACHE[mesh] = _Operators(mesh)
    return ops


def _check_field(mesh: GridMesh, values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(mesh.n_nodes, float(arr))
    if arr.shape != (mesh.n_nodes,):
        raise ValidationError(f"{name} has shape {arr.shape}, expected ({mesh.n_nodes},)")
    return arr


@dataclass(eq=False)
class DirichletSystem:
    """Stiffness and load restricted to interior nodes (homogeneous Dirichlet)."""

    mesh: GridMesh
    matrix: sp.csr_matrix
    load: np.ndarray

    @property
    def free(self) -> np.ndarray:
        return self.mesh.free


def assemble(mesh: GridMesh, kappa, f) -> DirichletSystem:
    kappa = _check_field(mesh, kappa, "kappa")
    f = _check_field(mesh, f, "f")
    # a nodal positive kappa stays positive at the Gauss points, but check the points anyway
    kq = kappa[mesh.elements] @ mesh.ops.shape.T
    bad = np.flatnonzero(~(kq > 0).all(axis=1))
    if bad.size:
        raise ValidationError(f"kappa is not positive on element {int(bad[0])}")
    ops = mesh.ops
    load = (ops.mass @ f)[mesh.free]
    return DirichletSystem(mesh, ops.stiffness(kappa), load)


def solve_linear(matrix: sp.csr_matrix, rhs: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Jacobi-preconditioned CG; raises NumericalError past 10 n iterations."""
    n = rhs.size
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n)
    inv_diag = 1.0 / matrix.diagonal()
    precond = LinearOperator((n, n), matvec=lambda r: inv_diag * r, dtype=float)
    with np.errstate(all="ignore"):  # breakdown shows up in the residual check below
        x, info = cg(matrix, rhs, rtol=rtol, atol=0.0, maxiter=10 * n, M=precond)
        res = np.linalg.norm(rhs - matrix @ x) / bnorm
    if info != 0 or not np.isfinite(res) or res > 10 * rtol:
        raise NumericalError(f"CG did not converge: relative residual {res:.3e} (info={info})")
    return x


def solve(system: DirichletSystem) -> np.ndarray:
    u = np.zeros(system.mesh.n_nodes)
    u[system.free] = solve_linear(system.matrix, system.load)
    return u


def fem_solve(mesh: GridMesh, kappa, f=1.0) -> np.ndarray:
    """Convenience: assemble and solve in one call."""
    return solve(assemble(mesh, kappa, f))


def energy_norm(mesh: GridMesh, kappa, u) -> float:
    kappa = _check_field(mesh, kappa, "kappa")
    u = _check_field(mesh, u, "u")
    e2 = float(kappa @ mesh.ops.energy_density(u, u))
    return float(np.sqrt(max(e2, 0.0)))


def l2_norm(mesh: GridMesh, u) -> float:
    u = _check_field(mesh, u, "u")
    return float(np.sqrt(max(u @ (mesh.ops.mass @ u), 0.0)))


def relative_error(u, u_ref, norm) -> float:
    """``norm(u - u_ref) / norm(u_ref)`` for a one-argument norm callable."""
    u = np.asarray(u, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    ref = norm(u_ref)
    if ref == 0.0:
        raise ValidationError("relative error against a zero-norm reference")
    return norm(u - u_ref) / ref


def _locate(mesh: GridMesh, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if pts.shape[1] != 2:
        raise ValidationError(f"points must have shape (M, 2), got {pts.shape}")
    tol = 1e-12
    if not np.isfinite(pts).all() or (pts < -tol).any() or (pts > 1 + tol).any():
        raise ValidationError("sample point outside the unit square")
    pts = np.clip(pts, 0.0, 1.0)
    fx, fy = pts[:, 0] * mesh.nx, pts[:, 1] * mesh.ny
    # snap round-off so that points on grid lines reproduce nodal values exactly
    for f in (fx, fy):
        near = np.abs(f - np.rint(f)) < 1e-10
        f[near] = np.rint(f[near])
    ix = np.minimum(fx.astype(np.int64), mesh.nx - 1)
    iy = np.minimum(fy.astype(np.int64), mesh.ny - 1)
    s = fx - ix
    t = fy - iy
    elem = iy * mesh.nx + ix
    weights = np.column_stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
    return mesh.elements[elem], weights, pts


def interpolation_matrix(mesh: GridMesh, pts) -> sp.csr_matrix:
    """Sparse (M, n_nodes) operator of bilinear point evaluation."""
    nodes, weights, pts = _locate(mesh, pts)
    m = pts.shape[0]
    return sp.csr_matrix((weights.ravel(), (np.repeat(np.arange(m), 4), nodes.ravel())),
                         shape=(m, mesh.n_nodes))


def sample_at_points(mesh: GridMesh, u, pts) -> np.ndarray:
    u = _check_field(mesh, u, "u")
    nodes, weights, _ = _locate(mesh, pts)
    return np.einsum("mc,mc->m", u[nodes], weights)
