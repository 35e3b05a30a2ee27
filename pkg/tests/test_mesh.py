import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from sepuq.errors import NumericalError, ValidationError
from sepuq.mesh import (assemble, build_mesh, energy_norm, fem_solve, l2_norm, relative_error,
                        sample_at_points, solve, solve_linear)

from conftest import poisson_series


class TestBuildMesh:
    def test_counts_2x2(self):
        m = build_mesh(2, 2)
        assert m.n_nodes == 9
        assert m.n_elements == 4
        assert m.boundary.size == 8
        assert_array_equal(m.free, [4])

    def test_paper_grid_node_count(self):
        assert build_mesh(50, 50).n_nodes == 2601

    def test_areas_3x2(self):
        areas = build_mesh(3, 2).element_areas()
        assert_allclose(areas, 1 / 6, rtol=1e-14)
        assert abs(areas.sum() - 1) < 1e-12

    def test_row_major_ordering(self):
        m = build_mesh(3, 2)
        assert_allclose(m.coords[:4, 1], 0.0)
        assert_allclose(m.coords[:4, 0], [0, 1 / 3, 2 / 3, 1])

    @given(st.integers(2, 12), st.integers(2, 12))
    def test_boundary_flags(self, nx, ny):
        m = build_mesh(nx, ny)
        x, y = m.coords.T
        on_edge = np.isclose(x, 0) | np.isclose(x, 1) | np.isclose(y, 0) | np.isclose(y, 1)
        assert_array_equal(np.sort(m.boundary), np.flatnonzero(on_edge))
        assert m.n_nodes == (nx + 1) * (ny + 1)
        assert abs(m.element_areas().sum() - 1) < 1e-12

    @pytest.mark.parametrize("nx,ny", [(1, 5), (5, 1), (0, 0)])
    def test_rejects_coarse(self, nx, ny):
        with pytest.raises(ValidationError):
            build_mesh(nx, ny)


class TestAssemble:
    def test_interior_diagonal_is_eight_thirds(self):
        for n in (4, 9):
            m = build_mesh(n, n)
            A = assemble(m, np.ones(m.n_nodes), 1.0).matrix
            assert_allclose(A.diagonal(), 8 / 3, rtol=1e-13)

    def test_zero_load(self, mesh10):
        sys_ = assemble(mesh10, np.ones(mesh10.n_nodes), 0.0)
        assert_array_equal(sys_.load, 0.0)

    def test_stiffness_linear_in_kappa(self, mesh10, rng):
        kap = np.exp(rng.normal(size=mesh10.n_nodes))
        A = assemble(mesh10, kap, 1.0).matrix
        B = assemble(mesh10, 3.5 * kap, 1.0).matrix
        assert abs(B - 3.5 * A).max() <= 1e-14 * abs(B).max()

    def test_symmetric(self, mesh10, rng):
        A = assemble(mesh10, np.exp(rng.normal(size=mesh10.n_nodes)), 1.0).matrix
        assert abs(A - A.T).max() <= 1e-12 * abs(A).max()

    def test_nonpositive_kappa_names_element(self, mesh10):
        kap = np.ones(mesh10.n_nodes)
        kap[mesh10.n_nodes // 2] = -1.0
        with pytest.raises(ValidationError, match="element"):
            assemble(mesh10, kap, 1.0)

    def test_rejects_wrong_length(self, mesh10):
        with pytest.raises(ValidationError):
            assemble(mesh10, np.ones(3), 1.0)


class TestSolve:
    def test_center_value_matches_series(self):
        m = build_mesh(50, 50)
        u = fem_solve(m, np.ones(m.n_nodes), 1.0)
        centre = sample_at_points(m, u, [[0.5, 0.5]])[0]
        assert abs(poisson_series(0.5, 0.5)[0] - 0.073671) < 1e-6
        assert abs(centre - 0.073671) <= 2e-4

    def test_zero_source(self, mesh10):
        assert_array_equal(fem_solve(mesh10, np.ones(mesh10.n_nodes), 0.0), 0.0)

    def test_scaling(self, mesh10, rng):
        kap = np.exp(rng.normal(size=mesh10.n_nodes))
        u1 = fem_solve(mesh10, kap, 1.0)
        u2 = fem_solve(mesh10, 4.0 * kap, 1.0)
        assert np.linalg.norm(4 * u2 - u1) <= 1e-9 * np.linalg.norm(u1)

    def test_boundary_zero_and_galerkin_residual(self, mesh10, rng):
        kap = np.exp(rng.normal(size=mesh10.n_nodes))
        sys_ = assemble(mesh10, kap, 1.0)
        u = solve(sys_)
        assert_array_equal(u[mesh10.boundary], 0.0)
        res = sys_.load - sys_.matrix @ u[sys_.free]
        assert np.linalg.norm(res) <= 1e-9 * np.linalg.norm(sys_.load)

    @given(st.integers(0, 2**32 - 1))
    def test_maximum_principle(self, seed):
        m = build_mesh(8, 8)
        r = np.random.default_rng(seed)
        u = fem_solve(m, np.exp(r.normal(size=m.n_nodes)), r.random(m.n_nodes))
        assert u.min() >= -1e-10

    def test_h_convergence(self):
        errs = []
        for n in (25, 50):
            m = build_mesh(n, n)
            u = fem_solve(m, np.ones(m.n_nodes), 1.0)
            exact = poisson_series(m.coords[:, 0], m.coords[:, 1])
            errs.append(l2_norm(m, u - exact))
        assert errs[0] / errs[1] >= 3.5

    def test_cg_failure_reports_residual(self):
        # singular with an inconsistent right-hand side: no iterate can converge
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(NumericalError, match="residual"):
            solve_linear(A, np.array([1.0, 0.0]))


class TestNorms:
    def test_zero_field(self, mesh10):
        z = np.zeros(mesh10.n_nodes)
        assert energy_norm(mesh10, np.ones(mesh10.n_nodes), z) == 0.0
        assert l2_norm(mesh10, z) == 0.0

    def test_energy_of_parabola_profile(self):
        m = build_mesh(50, 50)
        x = m.coords[:, 0]
        e2 = energy_norm(m, np.ones(m.n_nodes), x * (1 - x)) ** 2
        h = 1 / 50
        assert abs(e2 - (1 / 3 - h**2 / 3)) < 1e-12
        assert abs(e2 - 1 / 3) < 2e-4

    def test_l2_of_constant(self, mesh10):
        assert_allclose(l2_norm(mesh10, np.full(mesh10.n_nodes, 2.0)), 2.0, rtol=1e-13)

    def test_relative_error(self, mesh10, rng):
        u = rng.normal(size=mesh10.n_nodes)
        norm = lambda w: l2_norm(mesh10, w)  # noqa: E731
        assert relative_error(u, u, norm) == 0.0
        assert_allclose(relative_error(2 * u, u, norm), 1.0, rtol=1e-13)

    def test_relative_error_zero_reference(self, mesh10):
        z = np.zeros(mesh10.n_nodes)
        with pytest.raises(ValidationError):
            relative_error(z + 1, z, lambda w: l2_norm(mesh10, w))


def _bilinear_oracle(nx, ny, values, p):
    grid = values.reshape(ny + 1, nx + 1)
    i = min(int(p[0] * nx), nx - 1)
    j = min(int(p[1] * ny), ny - 1)
    s = p[0] * nx - i
    t = p[1] * ny - j
    return ((1 - s) * (1 - t) * grid[j, i] + s * (1 - t) * grid[j, i + 1]
            + s * t * grid[j + 1, i + 1] + (1 - s) * t * grid[j + 1, i])


class TestSampling:
    def test_nodes_exact(self, mesh10, rng):
        u = rng.normal(size=mesh10.n_nodes)
        idx = rng.choice(mesh10.n_nodes, 20, replace=False)
        assert_array_equal(sample_at_points(mesh10, u, mesh10.coords[idx]), u[idx])

    def test_linear_reproduced(self, mesh10, rng):
        u = 2.0 * mesh10.coords[:, 0] - 0.5 * mesh10.coords[:, 1] + 1.0
        pts = rng.random((50, 2))
        assert_allclose(sample_at_points(mesh10, u, pts), 2 * pts[:, 0] - 0.5 * pts[:, 1] + 1,
                        atol=1e-12)

    def test_matches_independent_bilinear(self, rng):
        m = build_mesh(7, 5)
        u = rng.normal(size=m.n_nodes)
        pts = rng.random((40, 2))
        expected = [_bilinear_oracle(7, 5, u, p) for p in pts]
        assert_allclose(sample_at_points(m, u, pts), expected, atol=1e-12)

    @pytest.mark.parametrize("p", [[-0.1, 0.5], [0.5, 1.01], [np.nan, 0.2]])
    def test_outside_rejected(self, mesh10, p):
        with pytest.raises(ValidationError):
            sample_at_points(mesh10, np.zeros(mesh10.n_nodes), [p])
