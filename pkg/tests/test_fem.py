import numpy as np
import pytest
from hypothesis import given, strategies as st

from metato.fem import (
    BoundaryConditions,
    Discretization,
    MaterialModel,
    SingularSystemError,
    assemble_solve,
    compliance_sensitivities,
    element_stiffness,
    rigid_modes_restrained,
)


def gauss_element_stiffness(nu):
    """2x2 Gauss quadrature of B^T D B on the unit square, LL LR UR UL node order."""
    D = np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]]) / (1 - nu**2)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], float)
    K = np.zeros((8, 8))
    g = 1 / np.sqrt(3)
    for xi in (-g, g):
        for eta in (-g, g):
            dN_dxi = corners[:, 0] * (1 + corners[:, 1] * eta) / 4
            dN_deta = corners[:, 1] * (1 + corners[:, 0] * xi) / 4
            # unit square: x = (xi + 1) / 2, so d/dx = 2 d/dxi and det J = 1/4
            dx, dy = 2 * dN_dxi, 2 * dN_deta
            B = np.zeros((3, 8))
            B[0, 0::2] = dx
            B[1, 1::2] = dy
            B[2, 0::2] = dy
            B[2, 1::2] = dx
            K += B.T @ D @ B * 0.25
    return K


def cantilever(nelx, nely, angle=-np.pi / 2):
    d = Discretization(nelx, nely)
    left = [d.node(0, iy) for iy in range(nely + 1)]
    fixed = np.concatenate([[2 * n, 2 * n + 1] for n in left])
    tip = d.node(nelx, nely // 2)
    return d, BoundaryConditions.from_point_loads(fixed, [(tip, 1.0, angle)])


@pytest.mark.parametrize("nu", [0.0, 0.3, 0.45])
def test_element_stiffness_matches_quadrature(nu):
    assert np.allclose(element_stiffness(nu), gauss_element_stiffness(nu), atol=1e-14)


def test_element_stiffness_has_three_rigid_modes():
    ke = element_stiffness(0.3)
    w = np.linalg.eigvalsh(ke)
    assert np.sum(np.abs(w) < 1e-12) == 3
    assert np.all(w > -1e-12)


def test_mesh_numbering():
    d = Discretization(3, 2)
    assert d.n_nodes == 12 and d.n_dof == 24 and d.n_elem == 6
    # element (0, 0) is the top-left one; its lower-left node is (0, 1)
    n1, n2 = d.node(0, 1), d.node(1, 1)
    assert d.edof[0].tolist() == [2 * n1, 2 * n1 + 1, 2 * n2, 2 * n2 + 1,
                                  2 * n2 - 2, 2 * n2 - 1, 2 * n1 - 2, 2 * n1 - 1]
    c = d.centroids
    assert np.allclose(c[d.element(0, 0)], [-2 / 3, 0.5])
    assert np.allclose(c[d.element(2, 1)], [2 / 3, -0.5])
    grid = d.to_grid(np.arange(6.0))
    assert grid.shape == (2, 3) and grid[1, 0] == d.element(0, 1)
    assert np.array_equal(d.from_grid(grid), np.arange(6.0))


def test_single_element_against_dense_solve():
    d = Discretization(1, 1)
    # clamp the left edge; nodes: 0 (0,top) 1 (0,bottom) 2 (1,top) 3 (1,bottom)
    fixed = [0, 1, 2, 3]
    bc = BoundaryConditions(fixed, [5, 7], [-1.0, -0.5])
    mat = MaterialModel()
    st_ = assemble_solve(d, bc, mat, np.array([0.7]))
    K = mat.modulus(0.7) * element_stiffness(mat.nu)
    perm = d.edof[0]
    Kg = np.zeros((8, 8))
    Kg[np.ix_(perm, perm)] = K
    free = [4, 5, 6, 7]
    f = bc.force_vector(8)
    u = np.zeros(8)
    u[free] = np.linalg.solve(Kg[np.ix_(free, free)], f[free])
    assert np.allclose(st_.u, u, rtol=1e-12, atol=0)
    assert st_.compliance == pytest.approx(f @ u, rel=1e-12)


def test_energies_sum_to_compliance(rng):
    d, bc = cantilever(12, 6)
    rho = rng.uniform(0.1, 1.0, d.n_elem)
    s = assemble_solve(d, bc, MaterialModel(), rho)
    assert s.energies.sum() == pytest.approx(s.compliance, rel=1e-10)
    assert np.all(s.energies >= 0)


def test_doubling_modulus_halves_compliance(rng):
    d, bc = cantilever(10, 5)
    rho = rng.uniform(0.2, 1.0, d.n_elem)
    c1 = assemble_solve(d, bc, MaterialModel(E0=1.0), rho).compliance
    c2 = assemble_solve(d, bc, MaterialModel(E0=2.0, Emin=2e-9), rho).compliance
    assert c2 == pytest.approx(c1 / 2, rel=1e-10)


def test_floating_structure_is_singular():
    d = Discretization(4, 4)
    bc = BoundaryConditions([0, 1], [2 * d.node(4, 4) + 1], [1.0])
    assert not rigid_modes_restrained(d, bc.fixed_dofs)
    with pytest.raises(SingularSystemError):
        assemble_solve(d, bc, MaterialModel(), np.ones(d.n_elem))
    # roller line along x only: rotation restrained but x-translation free
    bottom = [d.node(ix, 4) for ix in range(5)]
    assert not rigid_modes_restrained(d, np.array([2 * n + 1 for n in bottom]))


def _fd_compliance_gradient(d, bc, mat, rho, h):
    fd = np.empty(d.n_elem)
    for e in range(d.n_elem):
        rp, rm = rho.copy(), rho.copy()
        rp[e] += h
        rm[e] -= h
        fd[e] = (assemble_solve(d, bc, mat, rp).compliance - assemble_solve(d, bc, mat, rm).compliance) / (2 * h)
    return fd


def test_sensitivities_match_finite_differences(rng):
    d, bc = cantilever(8, 8, angle=-1.0)
    mat = MaterialModel()
    rho = rng.uniform(0.2, 0.9, d.n_elem)
    g = compliance_sensitivities(assemble_solve(d, bc, mat, rho), rho, mat)
    # at h = 1e-6 the difference quotient carries ~1e-7 absolute roundoff, so
    # measure relative to the gradient's scale
    fd = _fd_compliance_gradient(d, bc, mat, rho, 1e-6)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5
    # a wider step brings roundoff below truncation and allows a per-entry check
    fd = _fd_compliance_gradient(d, bc, mat, rho, 1e-4)
    assert np.max(np.abs(g - fd) / np.abs(fd)) < 1e-5


def test_mirror_symmetric_problem_has_symmetric_energy():
    nelx, nely = 10, 6
    d = Discretization(nelx, nely)
    bottom_corners = [d.node(0, nely), d.node(nelx, nely)]
    fixed = np.array([2 * bottom_corners[0], 2 * bottom_corners[0] + 1, 2 * bottom_corners[1] + 1])
    # fix x at the right support too so the structure is symmetric
    fixed = np.append(fixed, 2 * bottom_corners[1])
    bc = BoundaryConditions.from_point_loads(fixed, [(d.node(nelx // 2, 0), 1.0, -np.pi / 2)])
    s = assemble_solve(d, bc, MaterialModel(), np.full(d.n_elem, 0.5))
    grid = d.to_grid(s.energies)
    assert np.allclose(grid, grid[:, ::-1], rtol=0, atol=1e-10 * grid.max())


@given(st.floats(0.05, 1.0), st.integers(0, 3))
def test_uniform_density_scales_compliance(level, angle_q):
    d, bc = cantilever(6, 4, angle=angle_q * np.pi / 2)
    mat = MaterialModel()
    c1 = assemble_solve(d, bc, mat, np.ones(d.n_elem)).compliance
    c = assemble_solve(d, bc, mat, np.full(d.n_elem, level)).compliance
    assert c == pytest.approx(c1 / mat.modulus(level), rel=1e-8)


def test_iterative_solver_agrees_with_direct(rng):
    d, bc = cantilever(24, 12)
    rho = rng.uniform(0.3, 1.0, d.n_elem)
    a = assemble_solve(d, bc, MaterialModel(), rho, solver="direct")
    b = assemble_solve(d, bc, MaterialModel(), rho, solver="cg")
    assert b.compliance == pytest.approx(a.compliance, rel=1e-7)


def test_bad_inputs():
    d, bc = cantilever(4, 4)
    with pytest.raises(ValueError):
        assemble_solve(d, bc, MaterialModel(), np.ones(3))
    with pytest.raises(ValueError):
        assemble_solve(d, bc, MaterialModel(), np.ones(d.n_elem), solver="lu")
    with pytest.raises(ValueError):
        MaterialModel(Emin=0.0)
    with pytest.raises(ValueError):
        element_stiffness(0.5)


def test_duplicate_load_dofs_are_merged():
    bc = BoundaryConditions([0, 1, 0], [5, 3, 5], [1.0, 2.0, 0.5])
    assert bc.fixed_dofs.tolist() == [0, 1]
    assert bc.load_dofs.tolist() == [3, 5]
    assert bc.load_values.tolist() == [2.0, 1.5]
