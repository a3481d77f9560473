"""
Linear Solver Module

Conjugate gradients for the symmetric positive definite least-squares systems,
preconditioned by a geometric multigrid V-cycle over the nested-iteration grid
hierarchy, with convergence-factor and work-unit accounting.

A work unit (WU) is one matrix-vector product (or one relaxation sweep) with
the finest-grid matrix; work on other levels is scaled by its share of
nonzeros.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from pyamg.relaxation.relaxation import gauss_seidel

logger = logging.getLogger(__name__)

DEFAULT_SWEEPS = 1


class SolverError(Exception):
    """Custom exception for linear solver failures."""
    pass


class MatrixNotSPDError(SolverError):
    """Raised when CG meets a direction of non-positive curvature."""
    pass


@dataclass
class SparseSystem:
    """
    Symmetric matrix in CSR layout plus right-hand side.

    When the system has been reduced by boundary and hanging-node constraints,
    `expand` maps reduced vectors back to full nodal vectors and `offset`
    holds the eliminated Dirichlet values (full layout).
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    expand: Optional[sp.csr_matrix] = None
    offset: Optional[np.ndarray] = None
    kept: Optional[np.ndarray] = None
    space: Any = None

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.matrix.shape[0] != self.matrix.shape[1] or self.matrix.shape[0] != len(self.rhs):
            raise SolverError(f"Inconsistent system shapes {self.matrix.shape} / {self.rhs.shape}")

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    def to_full(self, x: np.ndarray) -> np.ndarray:
        """Map a solution of this system to the full nodal layout."""
        if self.expand is None:
            return np.asarray(x, dtype=float)
        full = self.expand @ x
        if self.offset is not None:
            full = full + self.offset
        return full

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.rhs - self.matrix @ x


@dataclass
class SolveStats:
    """Statistics of one (preconditioned) CG solve."""

    iterations: int = 0
    rel_residual: float = 0.0
    conv_factor: float = 0.0
    wu: float = 0.0
    work: float = 0.0
    converged: bool = False
    stopped_by: str = ""
    residuals: List[float] = field(default_factory=list)
    op_counts: List[int] = field(default_factory=list)


class Hierarchy:
    """
    Multigrid hierarchy: level 0 is the coarsest.

    transfers[k] prolongs level k to level k + 1. Coarse operators are
    Galerkin products P^T A P, which keeps the V-cycle symmetric.
    """

    def __init__(
        self,
        matrices: Sequence[sp.csr_matrix],
        transfers: Sequence[sp.csr_matrix],
        presweeps: int = DEFAULT_SWEEPS,
        postsweeps: int = DEFAULT_SWEEPS,
    ):
        if len(transfers) != len(matrices) - 1:
            raise SolverError(f"{len(matrices)} levels need {len(matrices) - 1} transfers, got {len(transfers)}")
        self.matrices = [sp.csr_matrix(A) for A in matrices]
        self.transfers = [sp.csr_matrix(P) for P in transfers]
        self.presweeps = presweeps
        self.postsweeps = postsweeps
        self.op_counts = np.zeros(len(self.matrices), dtype=np.int64)
        self._coarse_lu = None

    @classmethod
    def galerkin(
        cls,
        fine_matrix: sp.csr_matrix,
        transfers: Sequence[sp.csr_matrix],
        presweeps: int = DEFAULT_SWEEPS,
        postsweeps: int = DEFAULT_SWEEPS,
    ) -> "Hierarchy":
        """Build all coarse levels from the finest matrix by P^T A P."""
        matrices = [sp.csr_matrix(fine_matrix)]
        for P in reversed(transfers):
            A = matrices[0]
            if P.shape[0] != A.shape[0]:
                raise SolverError(f"Transfer shape {P.shape} does not match matrix {A.shape}")
            matrices.insert(0, sp.csr_matrix(P.T @ A @ P))
        return cls(matrices, list(transfers), presweeps, postsweeps)

    @property
    def n_levels(self) -> int:
        return len(self.matrices)

    @property
    def nnz_per_level(self) -> List[int]:
        return [int(A.nnz) for A in self.matrices]

    def coarse_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._coarse_lu is None:
            try:
                self._coarse_lu = splu(self.matrices[0].tocsc())
            except RuntimeError as e:
                raise MatrixNotSPDError(f"Coarsest-level factorization failed: {e}") from e
        return self._coarse_lu.solve(rhs)

    def reset_counts(self):
        self.op_counts[:] = 0


def vcycle(hier: Hierarchy, level: int, rhs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    One V(nu1, nu2) cycle with symmetric Gauss-Seidel smoothing.

    Args:
        hier: Hierarchy
        level: Level to start from (hier.n_levels - 1 for the finest)
        rhs: Right-hand side on that level
        x: Initial guess on that level

    Returns:
        Improved approximation (a new array)
    """
    if level < 0 or level >= hier.n_levels:
        raise SolverError(f"Invalid level {level} for a {hier.n_levels}-level hierarchy")

    rhs = np.ascontiguousarray(rhs, dtype=float)
    if level == 0:
        hier.op_counts[0] += 1
        return hier.coarse_solve(rhs)

    A = hier.matrices[level]
    x = np.array(x, dtype=float, copy=True)
    if hier.presweeps:
        gauss_seidel(A, x, rhs, iterations=hier.presweeps, sweep="symmetric")
        hier.op_counts[level] += 2 * hier.presweeps

    r = rhs - A @ x
    hier.op_counts[level] += 1
    P = hier.transfers[level - 1]
    correction = vcycle(hier, level - 1, P.T @ r, np.zeros(P.shape[1]))
    x += P @ correction

    if hier.postsweeps:
        gauss_seidel(A, x, rhs, iterations=hier.postsweeps, sweep="symmetric")
        hier.op_counts[level] += 2 * hier.postsweeps
    return x


def wu_account(nnz_per_level: Sequence[int], op_counts: Sequence[float], finest_nnz: float) -> float:
    """
    Work units: sum over levels of op_count * nnz / finest_nnz.

    Args:
        nnz_per_level: Nonzeros of each level's matrix
        op_counts: Matrix-vector products / sweeps performed on each level
        finest_nnz: Nonzeros of the reference (finest) matrix

    Returns:
        Work in finest-grid matrix-vector equivalents
    """
    if finest_nnz <= 0:
        raise SolverError(f"finest_nnz must be positive, got {finest_nnz}")
    nnz = np.asarray(nnz_per_level, dtype=float)
    ops = np.asarray(op_counts, dtype=float)
    if nnz.shape != ops.shape:
        raise SolverError(f"Level counts differ: {nnz.shape} vs {ops.shape}")
    return float(np.dot(ops, nnz) / finest_nnz)


def pcg(
    system: SparseSystem,
    x0: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    maxit: int = 200,
    precond: Optional[Hierarchy] = None,
    callback: Optional[Callable[[np.ndarray, np.ndarray], bool]] = None,
) -> Tuple[np.ndarray, SolveStats]:
    """
    Preconditioned conjugate gradients.

    Args:
        system: SPD system
        x0: Initial guess (zeros by default)
        tol: Relative residual target ||b - Ax|| / ||b||
        maxit: Iteration cap (one preconditioner application per iteration)
        precond: V-cycle hierarchy whose finest level is system.matrix, or None
        callback: Called as callback(x, r) after each iteration; returning
            True stops the iteration

    Returns:
        (solution, statistics)

    Raises:
        MatrixNotSPDError: If p^T A p <= 0 is encountered
    """
    A = system.matrix
    b = system.rhs
    n = system.size
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)

    if precond is not None:
        if precond.matrices[-1].shape != A.shape:
            raise SolverError("Preconditioner finest level does not match the system")
        precond.reset_counts()
        level_nnz = precond.nnz_per_level
        ops = precond.op_counts
    else:
        level_nnz = [system.nnz]
        ops = np.zeros(1, dtype=np.int64)

    stats = SolveStats()
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        stats.converged = True
        stats.stopped_by = "zero rhs"
        stats.op_counts = [int(c) for c in ops]
        return np.zeros(n), stats

    r = b - A @ x
    ops[-1] += 1
    r_norm0 = np.linalg.norm(r)
    stats.residuals.append(r_norm0 / b_norm)

    p = None
    rho_old = 0.0
    k = 0
    while stats.residuals[-1] > tol and k < maxit:
        if precond is not None:
            z = vcycle(precond, precond.n_levels - 1, r, np.zeros(n))
        else:
            z = r
        rho = float(np.dot(r, z))
        p = z.copy() if p is None else z + (rho / rho_old) * p
        Ap = A @ p
        ops[-1] += 1
        curvature = float(np.dot(p, Ap))
        if curvature <= 0.0:
            raise MatrixNotSPDError(f"Non-positive curvature p^T A p = {curvature:.3e} at iteration {k + 1}")
        alpha = rho / curvature
        x += alpha * p
        r -= alpha * Ap
        rho_old = rho
        k += 1
        stats.residuals.append(np.linalg.norm(r) / b_norm)
        logger.debug(f"  cycle {k}: relative residual {stats.residuals[-1]:.3e}")
        if callback is not None and callback(x, r):
            stats.stopped_by = "callback"
            break

    stats.iterations = k
    stats.rel_residual = stats.residuals[-1]
    stats.converged = stats.rel_residual <= tol
    if not stats.stopped_by:
        stats.stopped_by = "tolerance" if stats.converged else "maxit"
    if k > 0 and stats.residuals[0] > 0:
        stats.conv_factor = float((stats.residuals[-1] / stats.residuals[0]) ** (1.0 / k))
    stats.op_counts = [int(c) for c in ops]
    stats.work = float(np.dot(np.asarray(stats.op_counts, dtype=float), np.asarray(level_nnz, dtype=float)))
    stats.wu = wu_account(level_nnz, stats.op_counts, level_nnz[-1])
    if stats.stopped_by == "maxit":
        logger.warning(f"CG stopped at the cycle cap ({maxit}) with relative residual {stats.rel_residual:.3e}")
    return x, stats
