"""
Finite Element Space Module

Nodal tensor-product Lagrange spaces (bilinear and biquadratic) on quadtree
meshes. Handles global node numbering, hanging-node constraints, essential
boundary conditions, quadrature data and exact intergrid transfer.

Nodal coefficient arrays have shape (n_components, n_nodes) and always hold
conforming values: hanging-node entries equal the constrained combination of
their masters. Flattened vectors are component-major.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from mesh import Mesh, edge_point
from linsolve import SparseSystem

logger = logging.getLogger(__name__)

SUPPORTED_DEGREES = (1, 2)
CONSTRAINT_DROP_TOL = 1e-14


class FESpaceError(Exception):
    """Custom exception for finite element space errors."""
    pass


# ----------------------------------------------------------------------
# Quadrature and reference basis
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Quadrature:
    """Tensor Gauss-Legendre rule on [-1, 1]^2."""

    points_1d: np.ndarray
    weights_1d: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.weights_1d) ** 2

    @property
    def exactness(self) -> int:
        """Polynomial degree integrated exactly in each variable."""
        return 2 * len(self.weights_1d) - 1

    @cached_property
    def points(self) -> np.ndarray:
        xi, eta = np.meshgrid(self.points_1d, self.points_1d)
        return np.column_stack([xi.ravel(), eta.ravel()])

    @cached_property
    def weights(self) -> np.ndarray:
        return np.outer(self.weights_1d, self.weights_1d).ravel()


def build_quadrature(n: int) -> Quadrature:
    """Gauss rule with n points per direction."""
    if n < 1:
        raise FESpaceError(f"Quadrature needs at least one point per direction, got {n}")
    pts, wts = np.polynomial.legendre.leggauss(n)
    return Quadrature(pts, wts)


def lagrange_1d(p: int, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    1D Lagrange basis on equispaced nodes of [-1, 1].

    Returns:
        (values, derivatives), each of shape (len(t), p + 1)
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if p == 1:
        vals = np.column_stack([0.5 * (1 - t), 0.5 * (1 + t)])
        ders = np.column_stack([np.full_like(t, -0.5), np.full_like(t, 0.5)])
    elif p == 2:
        vals = np.column_stack([0.5 * t * (t - 1), 1 - t * t, 0.5 * t * (t + 1)])
        ders = np.column_stack([t - 0.5, -2 * t, t + 0.5])
    else:
        raise FESpaceError(f"Unsupported degree {p}; expected one of {SUPPORTED_DEGREES}")
    return vals, ders


def reference_basis(p: int, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Tensor basis at reference points; local node index = b*(p+1) + a.

    Returns:
        (N, dN/dxi, dN/deta), each of shape (n_points, (p+1)^2)
    """
    points = np.atleast_2d(points)
    vx, dx = lagrange_1d(p, points[:, 0])
    vy, dy = lagrange_1d(p, points[:, 1])
    n = len(points)
    N = (vy[:, :, None] * vx[:, None, :]).reshape(n, -1)
    dNdxi = (vy[:, :, None] * dx[:, None, :]).reshape(n, -1)
    dNdeta = (dy[:, :, None] * vx[:, None, :]).reshape(n, -1)
    return N, dNdxi, dNdeta


# ----------------------------------------------------------------------
# Boundary conditions
# ----------------------------------------------------------------------
class BCKind(Enum):
    DIRICHLET = "dirichlet"
    ZERO_TANGENTIAL = "zero_tangential"
    ZERO_MEAN = "zero_mean"
    FREE = "free"


@dataclass(frozen=True)
class ComponentBC:
    """Boundary condition of one scalar unknown."""

    kind: BCKind
    trace: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    axis: Optional[int] = None

    @classmethod
    def dirichlet(cls, trace=None) -> "ComponentBC":
        """Dirichlet condition; trace(x, y) defaults to zero."""
        return cls(BCKind.DIRICHLET, trace=trace)

    @classmethod
    def zero_tangential(cls, axis: int) -> "ComponentBC":
        """
        Component `axis` of a vector field whose tangential trace vanishes:
        the x-component is zero on y = const edges and vice versa.
        """
        if axis not in (0, 1):
            raise FESpaceError(f"Vector axis must be 0 or 1, got {axis}")
        return cls(BCKind.ZERO_TANGENTIAL, axis=axis)

    @classmethod
    def zero_mean(cls) -> "ComponentBC":
        return cls(BCKind.ZERO_MEAN)

    @classmethod
    def free(cls) -> "ComponentBC":
        return cls(BCKind.FREE)


BCSpec = Tuple[ComponentBC, ...]


def free_bcs(n_components: int) -> BCSpec:
    return tuple(ComponentBC.free() for _ in range(n_components))


@dataclass
class Reduction:
    """Map from reduced unknowns y to full nodal vectors: x = expand @ y + offset."""

    expand: sp.csr_matrix
    kept: np.ndarray
    fixed: np.ndarray


@dataclass
class QuadratureData:
    """Per-leaf physical quadrature points, weights and basis derivatives."""

    X: np.ndarray
    Y: np.ndarray
    W: np.ndarray
    N: np.ndarray
    dNdx: np.ndarray
    dNdy: np.ndarray


# ----------------------------------------------------------------------
# Space
# ----------------------------------------------------------------------
class Space:
    """
    Nodal Lagrange space of degree 1 or 2 with n_components scalar fields.

    All components share one node set; hanging nodes are constrained to the
    trace of the coarse neighbour's edge.
    """

    def __init__(
        self,
        mesh: Mesh,
        degree: int,
        n_components: int = 1,
        bcs: Optional[Sequence[ComponentBC]] = None,
        quadrature_extra: int = 1,
    ):
        if degree not in SUPPORTED_DEGREES:
            raise FESpaceError(f"Unsupported degree {degree}; expected one of {SUPPORTED_DEGREES}")
        if n_components < 1:
            raise FESpaceError(f"Need at least one component, got {n_components}")
        if bcs is None:
            bcs = free_bcs(n_components)
        bcs = tuple(bcs)
        if len(bcs) != n_components:
            raise FESpaceError(f"Expected {n_components} boundary conditions, got {len(bcs)}")
        if quadrature_extra < 0:
            raise FESpaceError(f"quadrature_extra must be non-negative, got {quadrature_extra}")

        self.mesh = mesh
        self.degree = degree
        self.n_components = n_components
        self.bcs: BCSpec = bcs
        self.quadrature = build_quadrature(degree + 1 + quadrature_extra)
        self.quadrature_extra = quadrature_extra

        self.leaves = mesh.leaves
        self.leaf_index = np.full(mesh.n_elements, -1, dtype=np.int64)
        self.leaf_index[self.leaves] = np.arange(len(self.leaves))

        self._number_nodes()
        self._build_constraints()

    # ------------------------------------------------------------------
    # Construction
    # ------------------------------------------------------------------
    def _number_nodes(self):
        p = self.degree
        mesh = self.mesh
        leaves = self.leaves
        s = mesh.size(leaves)
        if np.any(s % p):
            raise FESpaceError("Mesh too deep for the requested degree")
        a = np.tile(np.arange(p + 1), p + 1)
        b = np.repeat(np.arange(p + 1), p + 1)
        step = (s // p)[:, None]
        kx = mesh.ix[leaves][:, None] + a[None, :] * step
        ky = mesh.iy[leaves][:, None] + b[None, :] * step

        stacked = np.column_stack([ky.ravel(), kx.ravel()])
        unique, inverse = np.unique(stacked, axis=0, return_inverse=True)
        self.node_keys = unique[:, ::-1].copy()
        self.elem_nodes = inverse.reshape(len(leaves), (p + 1) ** 2)
        self._key_lookup: Dict[Tuple[int, int], int] = {
            (int(x), int(y)): i for i, (x, y) in enumerate(self.node_keys)
        }
        x, y = mesh.to_physical(self.node_keys[:, 0], self.node_keys[:, 1])
        self.node_coords = np.column_stack([x, y])

    def _build_constraints(self):
        p = self.degree
        mesh = self.mesh
        constraints: Dict[int, Dict[int, float]] = {}
        coarse_t = np.linspace(0.0, 1.0, p + 1)
        hang_t = (2 * np.arange(p) + 1) / (2 * p)
        # Weights of coarse edge nodes at each hanging position
        weights, _ = lagrange_1d(p, 2 * hang_t - 1)

        for e, per_edge in mesh.neighbor_table.items():
            for d, nbrs in enumerate(per_edge):
                if len(nbrs) != 2:
                    continue
                masters = [self._key_lookup[edge_point(mesh, e, d, t)] for t in coarse_t]
                for h, t in enumerate(hang_t):
                    node = self._key_lookup[edge_point(mesh, e, d, t)]
                    constraints[node] = {
                        m: float(w) for m, w in zip(masters, weights[h]) if abs(w) > CONSTRAINT_DROP_TOL
                    }

        # Masters that are themselves hanging (corner chains) are substituted
        # until every master is a free node.
        changed = True
        while changed:
            changed = False
            for node, combo in constraints.items():
                if not any(m in constraints for m in combo):
                    continue
                resolved: Dict[int, float] = {}
                for m, w in combo.items():
                    if m in constraints:
                        for mm, ww in constraints[m].items():
                            resolved[mm] = resolved.get(mm, 0.0) + w * ww
                    else:
                        resolved[m] = resolved.get(m, 0.0) + w
                constraints[node] = resolved
                changed = True

        self.constraints = constraints
        is_free = np.ones(self.n_nodes, dtype=bool)
        is_free[list(constraints)] = False
        self.free_nodes = np.flatnonzero(is_free)
        free_pos = np.full(self.n_nodes, -1, dtype=np.int64)
        free_pos[self.free_nodes] = np.arange(len(self.free_nodes))

        rows = list(self.free_nodes)
        cols = list(range(len(self.free_nodes)))
        vals = [1.0] * len(self.free_nodes)
        for node, combo in sorted(constraints.items()):
            for m, w in sorted(combo.items()):
                rows.append(node)
                cols.append(int(free_pos[m]))
                vals.append(w)
        self.T = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, len(self.free_nodes)))

        if constraints:
            logger.debug(f"{len(constraints)} hanging nodes constrained")

    # ------------------------------------------------------------------
    # Sizes and masks
    # ------------------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.node_keys)

    @property
    def n_free(self) -> int:
        return len(self.free_nodes)

    @property
    def n_dofs(self) -> int:
        """Unknowns after hanging-node constraints (boundary DOFs included)."""
        return self.n_components * self.n_free

    @property
    def size(self) -> int:
        """Length of a full flattened coefficient vector."""
        return self.n_components * self.n_nodes

    @property
    def n_local(self) -> int:
        return (self.degree + 1) ** 2

    @cached_property
    def on_x_edge(self) -> np.ndarray:
        """Nodes on the x = xmin or x = xmax edges."""
        wx, _ = self.mesh.lattice_extent
        return (self.node_keys[:, 0] == 0) | (self.node_keys[:, 0] == wx)

    @cached_property
    def on_y_edge(self) -> np.ndarray:
        """Nodes on the y = ymin or y = ymax edges."""
        _, wy = self.mesh.lattice_extent
        return (self.node_keys[:, 1] == 0) | (self.node_keys[:, 1] == wy)

    @property
    def on_boundary(self) -> np.ndarray:
        return self.on_x_edge | self.on_y_edge

    @property
    def pin_node(self) -> int:
        """Node at the (xmin, ymin) corner, used to fix the pressure constant."""
        return self._key_lookup[(0, 0)]

    def node_of(self, kx: int, ky: int) -> Optional[int]:
        return self._key_lookup.get((int(kx), int(ky)))

    def fixed_nodes(self, component: int) -> np.ndarray:
        """Nodes whose value is prescribed for a component."""
        bc = self.bcs[component]
        if bc.kind == BCKind.DIRICHLET:
            mask = self.on_boundary
        elif bc.kind == BCKind.ZERO_TANGENTIAL:
            mask = self.on_y_edge if bc.axis == 0 else self.on_x_edge
        elif bc.kind == BCKind.ZERO_MEAN:
            return np.array([self.pin_node], dtype=np.int64)
        else:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(mask)

    def boundary_values(self, component: int) -> np.ndarray:
        """Prescribed values on fixed_nodes(component), from the BC traces."""
        bc = self.bcs[component]
        nodes = self.fixed_nodes(component)
        if bc.kind == BCKind.DIRICHLET and bc.trace is not None:
            x, y = self.node_coords[nodes, 0], self.node_coords[nodes, 1]
            return np.broadcast_to(np.asarray(bc.trace(x, y), dtype=float), nodes.shape).copy()
        return np.zeros(len(nodes))

    # ------------------------------------------------------------------
    # Cached operators
    # ------------------------------------------------------------------
    @cached_property
    def full_T(self) -> sp.csr_matrix:
        """Constraint matrix for all components (component-major)."""
        return sp.csr_matrix(sp.kron(sp.identity(self.n_components, format="csr"), self.T))

    @cached_property
    def reduction(self) -> Reduction:
        free_pos = np.full(self.n_nodes, -1, dtype=np.int64)
        free_pos[self.free_nodes] = np.arange(self.n_free)

        fixed = []
        for c in range(self.n_components):
            fixed.append(c * self.n_free + free_pos[self.fixed_nodes(c)])
        fixed = np.unique(np.concatenate(fixed)) if fixed else np.zeros(0, dtype=np.int64)
        kept_mask = np.ones(self.n_dofs, dtype=bool)
        kept_mask[fixed] = False
        kept = np.flatnonzero(kept_mask)
        expand = sp.csr_matrix(self.full_T[:, kept])
        return Reduction(expand=expand, kept=kept, fixed=fixed)

    @cached_property
    def quadrature_data(self) -> QuadratureData:
        quad = self.quadrature
        x0, x1, y0, y1 = self.mesh.bounds(self.leaves)
        hx, hy = (x1 - x0), (y1 - y0)
        xi, eta = quad.points[:, 0], quad.points[:, 1]
        X = x0[:, None] + 0.5 * (xi[None, :] + 1) * hx[:, None]
        Y = y0[:, None] + 0.5 * (eta[None, :] + 1) * hy[:, None]
        W = quad.weights[None, :] * (0.25 * hx * hy)[:, None]
        N, dNdxi, dNdeta = reference_basis(self.degree, quad.points)
        dNdx = dNdxi[None, :, :] * (2.0 / hx)[:, None, None]
        dNdy = dNdeta[None, :, :] * (2.0 / hy)[:, None, None]
        return QuadratureData(X=X, Y=Y, W=W, N=N, dNdx=dNdx, dNdy=dNdy)

    def __repr__(self) -> str:
        return (
            f"Space(p={self.degree}, components={self.n_components}, nodes={self.n_nodes}, "
            f"hanging={len(self.constraints)}, leaves={len(self.leaves)})"
        )


def build_space(
    mesh: Mesh,
    degree: int,
    components: int = 1,
    bcs: Optional[Sequence[ComponentBC]] = None,
    quadrature_extra: int = 1,
) -> Space:
    """
    Build a nodal space on the leaves of a mesh.

    Args:
        mesh: Mesh
        degree: Polynomial degree (1 or 2)
        components: Number of scalar fields
        bcs: One ComponentBC per field (all free by default)
        quadrature_extra: Gauss points per direction beyond degree + 1

    Returns:
        Space
    """
    space = Space(mesh, degree, components, bcs, quadrature_extra)
    logger.debug(f"Built {space}")
    return space


def eval_basis(space: Space, element: int, ref_point) -> Tuple[np.ndarray, np.ndarray]:
    """
    Local basis values and reference gradients of a leaf at one point.

    Returns:
        (values of shape (n_local,), gradients of shape (n_local, 2))
    """
    if space.leaf_index[element] < 0:
        raise FESpaceError(f"Element {element} is not a leaf of this space's mesh")
    pt = np.asarray(ref_point, dtype=float).reshape(1, 2)
    if np.any(np.abs(pt) > 1.0 + 1e-12):
        raise FESpaceError(f"Reference point {ref_point} outside [-1, 1]^2")
    N, dxi, deta = reference_basis(space.degree, pt)
    return N[0], np.column_stack([dxi[0], deta[0]])


# ----------------------------------------------------------------------
# Field evaluation
# ----------------------------------------------------------------------
def as_components(space: Space, coeffs: np.ndarray) -> np.ndarray:
    """View a flat or 2D coefficient array as (n_components, n_nodes)."""
    arr = np.asarray(coeffs, dtype=float)
    if arr.ndim == 1:
        if arr.size % space.n_nodes:
            raise FESpaceError(f"Vector of length {arr.size} does not fit {space.n_nodes} nodes")
        arr = arr.reshape(-1, space.n_nodes)
    if arr.shape[1] != space.n_nodes:
        raise FESpaceError(f"Coefficient array {arr.shape} does not match {space.n_nodes} nodes")
    return arr


def field_at_quadrature(space: Space, coeffs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Values and physical derivatives at every quadrature point.

    Returns:
        (values, d/dx, d/dy), each of shape (n_fields, n_leaves, n_quad)
    """
    arr = as_components(space, coeffs)
    qd = space.quadrature_data
    local = arr[:, space.elem_nodes]
    values = np.einsum("cel,ql->ceq", local, qd.N)
    dx = np.einsum("cel,eql->ceq", local, qd.dNdx)
    dy = np.einsum("cel,eql->ceq", local, qd.dNdy)
    return values, dx, dy


def evaluate(space: Space, coeffs: np.ndarray, points: np.ndarray, derivatives: bool = False):
    """
    Evaluate FE functions at physical points.

    Returns:
        values of shape (n_fields, n_points); with derivatives=True the tuple
        (values, d/dx, d/dy)
    """
    arr = as_components(space, coeffs)
    ids, ref = space.mesh.locate(points)
    return _evaluate_at(space, arr, ids, ref, derivatives)


def _evaluate_at(space: Space, arr: np.ndarray, ids: np.ndarray, ref: np.ndarray, derivatives: bool):
    rows = space.leaf_index[ids]
    nodes = space.elem_nodes[rows]
    N, dNdxi, dNdeta = reference_basis(space.degree, ref)
    local = arr[:, nodes]
    values = np.einsum("cpl,pl->cp", local, N)
    if not derivatives:
        return values
    x0, x1, y0, y1 = space.mesh.bounds(ids)
    dx = np.einsum("cpl,pl->cp", local, dNdxi) * (2.0 / (x1 - x0))
    dy = np.einsum("cpl,pl->cp", local, dNdeta) * (2.0 / (y1 - y0))
    return values, dx, dy


def conform(space: Space, values: np.ndarray) -> np.ndarray:
    """Overwrite hanging-node values with their constrained combination."""
    arr = as_components(space, values)
    return np.stack([space.T @ row[space.free_nodes] for row in arr])


def interpolate_function(space: Space, func: Callable, n_fields: Optional[int] = None) -> np.ndarray:
    """
    Nodal interpolant of func(x, y).

    func returns either one array (scalar field) or a sequence of arrays.

    Returns:
        (n_fields, n_nodes) conforming coefficients
    """
    x, y = space.node_coords[:, 0], space.node_coords[:, 1]
    out = func(x, y)
    if isinstance(out, (list, tuple)):
        rows = [np.broadcast_to(np.asarray(v, dtype=float), x.shape) for v in out]
    else:
        rows = [np.broadcast_to(np.asarray(out, dtype=float), x.shape)]
    values = np.stack(rows)
    if n_fields is not None and len(values) != n_fields:
        raise FESpaceError(f"Function returned {len(values)} fields, expected {n_fields}")
    return conform(space, values)


def interpolate_fe(target: Space, source: Space, coeffs: np.ndarray) -> np.ndarray:
    """Nodal interpolant on `target` of an FE function living on `source`."""
    arr = as_components(source, coeffs)
    if target.mesh.domain != source.mesh.domain:
        raise FESpaceError("Spaces live on different domains")
    if (target.mesh.nx, target.mesh.ny) == (source.mesh.nx, source.mesh.ny):
        ids, ref = source.mesh.locate_keys(target.node_keys[:, 0], target.node_keys[:, 1])
    else:
        ids, ref = source.mesh.locate(target.node_coords)
    return conform(target, _evaluate_at(source, arr, ids, ref, False))


# ----------------------------------------------------------------------
# Intergrid transfer
# ----------------------------------------------------------------------
def is_nested(coarse: Space, fine: Space) -> bool:
    cm, fm = coarse.mesh, fine.mesh
    if cm.domain != fm.domain or (cm.nx, cm.ny) != (fm.nx, fm.ny):
        return False
    if fine.degree < coarse.degree:
        return False
    return all(fm.find(cm.level[e], cm.ix[e], cm.iy[e]) is not None for e in cm.leaves)


def transfer_matrix(coarse: Space, fine: Space) -> sp.csr_matrix:
    """
    Scalar prolongation: fine nodal values of a coarse FE function.

    Returns:
        (fine.n_nodes, coarse.n_nodes) CSR matrix

    Raises:
        FESpaceError: If fine is not a refinement of coarse
    """
    if not is_nested(coarse, fine):
        raise FESpaceError("Fine space is not nested in the coarse space")
    ids, ref = coarse.mesh.locate_keys(fine.node_keys[:, 0], fine.node_keys[:, 1])
    N, _, _ = reference_basis(coarse.degree, ref)
    cols = coarse.elem_nodes[coarse.leaf_index[ids]]
    rows = np.repeat(np.arange(fine.n_nodes), N.shape[1]).reshape(N.shape)
    keep = np.abs(N) > CONSTRAINT_DROP_TOL
    P = sp.csr_matrix(
        (N[keep], (rows[keep], cols[keep])),
        shape=(fine.n_nodes, coarse.n_nodes),
    )
    return P


def prolong(coarse: Space, fine: Space, coarse_vec: np.ndarray) -> np.ndarray:
    """
    Exact embedding of a coarse FE function into a nested fine space.

    Returns:
        (n_components, fine.n_nodes) array
    """
    arr = as_components(coarse, coarse_vec)
    P = transfer_matrix(coarse, fine)
    return np.stack([P @ row for row in arr])


# ----------------------------------------------------------------------
# Constraints on assembled systems
# ----------------------------------------------------------------------
def fixed_values(space: Space, values: Optional[np.ndarray] = None) -> np.ndarray:
    """Conforming-layout vector holding prescribed values at fixed DOFs."""
    free_pos = np.full(space.n_nodes, -1, dtype=np.int64)
    free_pos[space.free_nodes] = np.arange(space.n_free)
    z = np.zeros(space.n_dofs)
    arr = None if values is None else as_components(space, values)
    for c in range(space.n_components):
        nodes = space.fixed_nodes(c)
        idx = c * space.n_free + free_pos[nodes]
        z[idx] = space.boundary_values(c) if arr is None else arr[c, nodes]
    return z


def impose_essential(space: Space, coeffs: np.ndarray) -> np.ndarray:
    """Reset Dirichlet and zero-tangential DOFs to their prescribed values."""
    arr = np.array(as_components(space, coeffs), copy=True)
    for c, bc in enumerate(space.bcs):
        if bc.kind in (BCKind.DIRICHLET, BCKind.ZERO_TANGENTIAL):
            arr[c, space.fixed_nodes(c)] = space.boundary_values(c)
    return conform(space, arr)


def apply_bcs(
    space: Space,
    system: SparseSystem,
    values: Optional[np.ndarray] = None,
    homogeneous: bool = False,
) -> SparseSystem:
    """
    Eliminate hanging and prescribed DOFs from a full nodal system.

    Args:
        space: Space the system was assembled on
        system: Full system (space.size unknowns)
        values: Nodal values supplying prescribed DOFs (default: BC traces)
        homogeneous: Prescribe zeros (Newton increments)

    Returns:
        Reduced SPD system whose to_full() gives the full nodal vector
    """
    if system.size != space.size:
        raise FESpaceError(f"System of size {system.size} does not match space of size {space.size}")
    red = space.reduction
    E = red.expand
    if homogeneous:
        offset = np.zeros(space.size)
    else:
        offset = space.full_T @ fixed_values(space, values)

    A = system.matrix
    matrix = sp.csr_matrix(E.T @ A @ E)
    rhs = E.T @ (system.rhs - A @ offset)
    return SparseSystem(matrix, rhs, expand=E, offset=offset, kept=red.kept, space=space)


# ----------------------------------------------------------------------
# Integrals
# ----------------------------------------------------------------------
def integrate(space: Space, field: Union[Callable, np.ndarray]) -> float:
    """Integral of func(x, y) or of an (n_leaves, n_quad) array over the domain."""
    qd = space.quadrature_data
    values = field(qd.X, qd.Y) if callable(field) else np.asarray(field, dtype=float)
    return float(np.sum(qd.W * values))


def element_integrals(space: Space, values: np.ndarray) -> np.ndarray:
    """Per-leaf integrals of an (n_leaves, n_quad) array."""
    return np.sum(space.quadrature_data.W * values, axis=1)


def mean_value(space: Space, nodal: np.ndarray) -> float:
    values, _, _ = field_at_quadrature(space, np.asarray(nodal, dtype=float)[None, :])
    return integrate(space, values[0]) / space.mesh.domain.area


def enforce_zero_mean(space: Space, coeffs: np.ndarray, components: Sequence[int]) -> np.ndarray:
    """Shift the listed components to zero mean over the domain."""
    arr = np.array(as_components(space, coeffs), copy=True)
    for c in components:
        arr[c] -= mean_value(space, arr[c])
    return arr


def mass_matrix(space: Space) -> sp.csr_matrix:
    """Scalar mass matrix on all nodes."""
    qd = space.quadrature_data
    n_el, n_q = qd.W.shape
    sw = np.sqrt(qd.W)
    vals = sw[:, :, None] * qd.N[None, :, :]
    rows = np.broadcast_to(np.arange(n_el * n_q).reshape(n_el, n_q, 1), vals.shape)
    cols = np.broadcast_to(space.elem_nodes[:, None, :], vals.shape)
    L = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n_el * n_q, space.n_nodes))
    return sp.csr_matrix(L.T @ L)


def stiffness_matrix(space: Space) -> sp.csr_matrix:
    """Scalar Laplace stiffness matrix on all nodes."""
    qd = space.quadrature_data
    terms = {(0, 0): (None, 1.0, None), (1, 0): (None, None, 1.0)}
    row_scale = np.broadcast_to(np.sqrt(qd.W), (2,) + qd.W.shape)
    L = operator_matrix(space, terms, 2, row_scale)[:, : space.n_nodes]
    return sp.csr_matrix(L.T @ L)


def l2_project_gradient(space: Space, nodal: np.ndarray) -> np.ndarray:
    """
    L2 projection of the gradient of a scalar FE function onto the space.

    Returns:
        (2, n_nodes) conforming coefficients
    """
    qd = space.quadrature_data
    _, dx, dy = field_at_quadrature(space, np.asarray(nodal, dtype=float)[None, :])
    M = mass_matrix(space)
    T = space.T
    Mr = sp.csc_matrix(T.T @ M @ T)
    out = []
    for grad in (dx[0], dy[0]):
        local = np.einsum("eq,ql->el", qd.W * grad, qd.N)
        rhs = np.zeros(space.n_nodes)
        np.add.at(rhs, space.elem_nodes, local)
        out.append(T @ spsolve(Mr, T.T @ rhs))
    return np.stack(out)


def operator_matrix(
    space: Space,
    terms: Dict[Tuple[int, int], Tuple],
    n_equations: int,
    row_scale: np.ndarray,
) -> sp.csr_matrix:
    """
    Discrete first-order operator sampled at quadrature points.

    Row (k, element, q) holds sum over components c of
    a*N + bx*dN/dx + by*dN/dy for terms[(k, c)] = (a, bx, by), each entry a
    scalar, None, or an (n_leaves, n_quad) array, scaled by row_scale[k].

    Args:
        space: Space of the unknowns (space.n_components columns blocks)
        terms: Sparse coefficient table keyed by (equation, component)
        n_equations: Number of equations
        row_scale: (n_equations, n_leaves, n_quad) row weights

    Returns:
        (n_equations * n_leaves * n_quad, space.size) CSR matrix
    """
    qd = space.quadrature_data
    n_el, n_q = qd.W.shape
    n_rows = n_el * n_q
    row_base = np.arange(n_rows).reshape(n_el, n_q, 1)
    rows, cols, vals = [], [], []
    for (k, c), (a, bx, by) in terms.items():
        entry = np.zeros((n_el, n_q, space.n_local))
        if a is not None:
            entry += np.broadcast_to(np.asarray(a, dtype=float), (n_el, n_q))[:, :, None] * qd.N[None, :, :]
        if bx is not None:
            entry += np.broadcast_to(np.asarray(bx, dtype=float), (n_el, n_q))[:, :, None] * qd.dNdx
        if by is not None:
            entry += np.broadcast_to(np.asarray(by, dtype=float), (n_el, n_q))[:, :, None] * qd.dNdy
        entry *= row_scale[k][:, :, None]
        rows.append(np.broadcast_to(k * n_rows + row_base, entry.shape).ravel())
        cols.append(np.broadcast_to(c * space.n_nodes + space.elem_nodes[:, None, :], entry.shape).ravel())
        vals.append(entry.ravel())
    if not vals:
        return sp.csr_matrix((n_equations * n_rows, space.size))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_equations * n_rows, space.size),
    )


def reduced_transfer(coarse: Space, fine: Space) -> sp.csr_matrix:
    """
    Prolongation between the reduced (constrained, homogeneous) unknowns of
    two nested multi-component spaces.
    """
    if coarse.n_components != fine.n_components:
        raise FESpaceError("Spaces have different numbers of components")
    P = transfer_matrix(coarse, fine)
    P_full = sp.kron(sp.identity(fine.n_components, format="csr"), P, format="csr")
    kept = fine.reduction.kept
    component, local = np.divmod(kept, fine.n_free)
    rows = component * fine.n_nodes + fine.free_nodes[local]
    return sp.csr_matrix((P_full @ coarse.reduction.expand)[rows, :])
