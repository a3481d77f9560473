"""
Tests for preconditioned conjugate gradients, the V-cycle and work accounting
"""

import numpy as np
import pytest
import scipy.sparse as sp

from fespace import ComponentBC, apply_bcs, build_space, mass_matrix, reduced_transfer, stiffness_matrix
from linsolve import (
    Hierarchy,
    MatrixNotSPDError,
    SolverError,
    SparseSystem,
    pcg,
    vcycle,
    wu_account,
)
from mesh import build_uniform, refine


def laplacian_1d(n):
    return sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def poisson_two_grid(n_coarse, degree=1):
    bcs = [ComponentBC.dirichlet()]
    coarse = build_space(build_uniform(n_coarse, n_coarse), degree, 1, bcs)
    fine = build_space(refine(coarse.mesh, coarse.mesh.leaves), degree, 1, bcs)
    full = SparseSystem(stiffness_matrix(fine), mass_matrix(fine) @ np.ones(fine.n_nodes), space=fine)
    system = apply_bcs(fine, full)
    return system, [reduced_transfer(coarse, fine)]


def test_cg_solves_spd_system():
    """Test unpreconditioned CG on a 1D Laplacian."""
    A = laplacian_1d(50)
    x_true = np.random.default_rng(0).standard_normal(50)
    system = SparseSystem(A, A @ x_true)
    x, stats = pcg(system, tol=1e-12, maxit=200)
    assert stats.converged
    assert stats.stopped_by == "tolerance"
    assert np.allclose(x, x_true, atol=1e-8)
    assert stats.iterations <= 50


def test_cg_two_by_two():
    """Test CG solves [[2, -1], [-1, 2]] x = (1, 0) in at most two iterations."""
    system = SparseSystem(sp.csr_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]])), np.array([1.0, 0.0]))
    x, stats = pcg(system, tol=1e-12)
    assert stats.converged
    assert stats.iterations <= 2
    assert np.allclose(x, [2.0 / 3.0, 1.0 / 3.0])


def test_zero_rhs_returns_zero():
    """Test a zero right-hand side returns the zero vector without iterating."""
    system = SparseSystem(laplacian_1d(5), np.zeros(5))
    x, stats = pcg(system, x0=np.ones(5))
    assert np.allclose(x, 0.0)
    assert stats.iterations == 0
    assert stats.stopped_by == "zero rhs"


def test_indefinite_matrix_raises():
    """Test CG reports non-positive curvature."""
    A = sp.diags([1.0, -1.0, 1.0], format="csr")
    system = SparseSystem(A, np.array([0.0, 1.0, 0.0]))
    with pytest.raises(MatrixNotSPDError):
        pcg(system)


def test_shape_mismatch_raises():
    """Test inconsistent matrix and right-hand side are rejected."""
    with pytest.raises(SolverError):
        SparseSystem(laplacian_1d(4), np.zeros(3))


def test_callback_stops_iteration():
    """Test a callback returning True stops CG."""
    A = laplacian_1d(100)
    system = SparseSystem(A, np.ones(100))
    calls = []

    def stop_after_three(x, r):
        calls.append(np.linalg.norm(r))
        return len(calls) == 3

    _, stats = pcg(system, tol=1e-14, maxit=100, callback=stop_after_three)
    assert stats.iterations == 3
    assert stats.stopped_by == "callback"


def test_maxit_reported():
    """Test hitting the iteration cap is reported."""
    system = SparseSystem(laplacian_1d(100), np.ones(100))
    _, stats = pcg(system, tol=1e-14, maxit=5)
    assert stats.stopped_by == "maxit"
    assert not stats.converged


def test_two_grid_poisson_convergence():
    """Test V-cycle preconditioned CG on Poisson with 33 x 33 nodes reduces the residual by 4x per cycle."""
    system, transfers = poisson_two_grid(16)
    hier = Hierarchy.galerkin(system.matrix, transfers)
    assert hier.n_levels == 2
    _, stats = pcg(system, tol=1e-10, maxit=50, precond=hier)
    assert stats.converged
    assert stats.conv_factor <= 0.25


def test_vcycle_is_symmetric():
    """Test the V-cycle operator is symmetric, as PCG requires."""
    system, transfers = poisson_two_grid(4, degree=2)
    hier = Hierarchy.galerkin(system.matrix, transfers)
    rng = np.random.default_rng(2)
    u, v = rng.standard_normal((2, system.size))
    n = system.size
    Bu = vcycle(hier, 1, u, np.zeros(n))
    Bv = vcycle(hier, 1, v, np.zeros(n))
    assert np.isclose(v @ Bu, u @ Bv, rtol=1e-10)


def test_single_level_hierarchy_is_direct_solve():
    """Test a one-level hierarchy solves exactly in one iteration."""
    system, _ = poisson_two_grid(4)
    hier = Hierarchy([system.matrix], [])
    x, stats = pcg(system, tol=1e-10, maxit=5, precond=hier)
    assert stats.iterations == 1
    assert np.allclose(system.matrix @ x, system.rhs)


def test_hierarchy_rejects_bad_transfers():
    """Test transfer count and shape are checked."""
    A = laplacian_1d(5)
    with pytest.raises(SolverError):
        Hierarchy([A, A], [])
    with pytest.raises(SolverError):
        Hierarchy.galerkin(A, [sp.identity(4, format="csr")])


def test_wu_account():
    """Test work units weight each level by its share of finest-grid nonzeros."""
    assert wu_account([100, 400], [1, 6], 400) == pytest.approx(6.25)
    with pytest.raises(SolverError):
        wu_account([100], [1, 2], 100)
    with pytest.raises(SolverError):
        wu_account([100], [1], 0)


def test_stats_work_matches_wu():
    """Test recorded work equals WU times finest nonzeros."""
    system, transfers = poisson_two_grid(4)
    hier = Hierarchy.galerkin(system.matrix, transfers)
    _, stats = pcg(system, tol=1e-8, maxit=20, precond=hier)
    assert stats.work == pytest.approx(stats.wu * system.nnz)
    assert len(stats.op_counts) == 2
    # Each cycle: symmetric pre- and post-smoothing, a residual, and one product in CG
    assert stats.op_counts[-1] == 1 + stats.iterations * 6
    assert stats.op_counts[0] == stats.iterations
