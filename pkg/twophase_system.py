"""
Two-Phase First-Order System Module

The Allen-Cahn/Navier-Stokes system written as 13 first-order equations in
9 unknowns, its least-squares functional, Newton linearization and the
assembly of the normal equations for a Newton increment.

Unknown order: u1, u2, V11, V12, V21, p, phi, B1, B2 with V_ij = d_i u_j,
V22 = -V11 and B = grad(phi).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from fespace import (
    ComponentBC,
    Space,
    as_components,
    conform,
    element_integrals,
    enforce_zero_mean,
    evaluate,
    field_at_quadrature,
    interpolate_function,
    l2_project_gradient,
    operator_matrix,
)
from linsolve import SparseSystem

logger = logging.getLogger(__name__)

# Unknowns
U1, U2, V11, V12, V21, P, PHI, B1, B2 = range(9)
N_UNKNOWNS = 9
UNKNOWN_NAMES = ("u1", "u2", "V11", "V12", "V21", "p", "phi", "B1", "B2")

# Equations
N_EQUATIONS = 13
EQUATION_NAMES = (
    "grad_u_11", "grad_u_12", "grad_u_21", "grad_u_22",
    "curl_V_1", "curl_V_2", "div_u",
    "momentum_1", "momentum_2",
    "grad_phi_1", "grad_phi_2", "curl_B",
    "phase",
)
MOMENTUM_1, MOMENTUM_2, PHASE = 7, 8, 12

# BDF weights in units of 1/dt: order -> (alpha0, history weights, newest first)
BDF_TABLE = {
    1: (1.0, (-1.0,)),
    2: (1.5, (-2.0, 0.5)),
}
SCHEMES = {"BDF1": 1, "BDF2": 2}

# Linear part of the operator: (equation, unknown) -> (a, bx, by)
LINEAR_TERMS: Dict[Tuple[int, int], Tuple] = {
    (0, V11): (1.0, None, None), (0, U1): (None, -1.0, None),
    (1, V12): (1.0, None, None), (1, U2): (None, -1.0, None),
    (2, V21): (1.0, None, None), (2, U1): (None, None, -1.0),
    (3, V11): (-1.0, None, None), (3, U2): (None, None, -1.0),
    (4, V21): (None, 1.0, None), (4, V11): (None, None, -1.0),
    (5, V11): (None, -1.0, None), (5, V12): (None, None, -1.0),
    (6, U1): (None, 1.0, None), (6, U2): (None, None, 1.0),
    (9, B1): (1.0, None, None), (9, PHI): (None, -1.0, None),
    (10, B2): (1.0, None, None), (10, PHI): (None, None, -1.0),
    (11, B2): (None, 1.0, None), (11, B1): (None, None, -1.0),
}


class TwoPhaseSystemError(Exception):
    """Custom exception for invalid two-phase states and parameters."""
    pass


@dataclass(frozen=True)
class Params:
    """Physical and discretization parameters of the two-phase system."""

    mu: float = 1.0
    lam: float = 1e-4
    gamma: float = 0.01
    eps: float = 0.01
    dt: float = 0.01
    scheme: str = "BDF2"
    include_advection: bool = True
    ls_weights: Tuple[float, ...] = (1.0,) * N_EQUATIONS
    include_cubic: bool = True
    include_transport: bool = True
    forcing: Optional[Callable] = None

    def __post_init__(self):
        for name in ("mu", "gamma", "eps", "dt"):
            if not getattr(self, name) > 0:
                raise TwoPhaseSystemError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0:
            raise TwoPhaseSystemError(f"lam must be non-negative, got {self.lam}")
        if self.scheme not in SCHEMES:
            raise TwoPhaseSystemError(f"Unknown scheme {self.scheme!r}; expected one of {sorted(SCHEMES)}")
        weights = tuple(float(w) for w in self.ls_weights)
        if len(weights) != N_EQUATIONS or any(not w > 0 for w in weights):
            raise TwoPhaseSystemError(f"ls_weights must be {N_EQUATIONS} positive numbers, got {self.ls_weights}")
        object.__setattr__(self, "ls_weights", weights)

    @property
    def advection(self) -> float:
        return 1.0 if self.include_advection else 0.0

    @property
    def transport(self) -> float:
        return 1.0 if self.include_transport else 0.0


@dataclass
class State:
    """Nodal coefficients of the 9 unknowns on one space, at time t."""

    space: Space
    coeffs: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if self.space.n_components != N_UNKNOWNS:
            raise TwoPhaseSystemError(f"State space must have {N_UNKNOWNS} components")
        self.coeffs = np.array(as_components(self.space, self.coeffs), dtype=float)
        if self.coeffs.shape[0] != N_UNKNOWNS:
            raise TwoPhaseSystemError(f"Expected {N_UNKNOWNS} coefficient rows, got {self.coeffs.shape[0]}")

    def __getitem__(self, component: int) -> np.ndarray:
        return self.coeffs[component]

    def copy(self) -> "State":
        return State(self.space, self.coeffs.copy(), self.t)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))


@dataclass
class TimeHistory:
    """Previous states (newest first) with the BDF coefficients of the current step."""

    states: List[State]
    alpha0: float
    weights: Tuple[float, ...]
    _cache: Dict[int, Tuple[Space, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.states) < len(self.weights):
            raise TwoPhaseSystemError(
                f"BDF{len(self.weights)} needs {len(self.weights)} previous states, got {len(self.states)}"
            )

    @classmethod
    def bdf(cls, states: Sequence[State], dt: float, order: int) -> "TimeHistory":
        if order not in BDF_TABLE:
            raise TwoPhaseSystemError(f"Unsupported BDF order {order}")
        a0, w = BDF_TABLE[order]
        return cls(list(states), a0 / dt, tuple(x / dt for x in w))

    @classmethod
    def steady(cls, state: State, dt: float, order: int = 1) -> "TimeHistory":
        """History in which the given state has been at rest for `order` steps."""
        return cls.bdf([state] * order, dt, order)

    @property
    def order(self) -> int:
        return len(self.weights)

    def _weighted(self, values: Callable[[State], np.ndarray]) -> np.ndarray:
        total = 0.0
        for state, w in zip(self.states, self.weights):
            total = total + w * values(state)
        return total

    def at_quadrature(self, space: Space) -> np.ndarray:
        """Sum of w_i * (u1, u2, phi)_i at the quadrature points of `space`."""
        hit = self._cache.get(id(space))
        if hit is not None and hit[0] is space:
            return hit[1]
        qd = space.quadrature_data
        points = np.column_stack([qd.X.ravel(), qd.Y.ravel()])

        def values(state: State) -> np.ndarray:
            sub = state.coeffs[[U1, U2, PHI]]
            if state.space is space:
                vals, _, _ = field_at_quadrature(space, sub)
                return vals
            return evaluate(state.space, sub, points).reshape(3, *qd.X.shape)

        out = self._weighted(values)
        self._cache[id(space)] = (space, out)
        return out

    def at_points(self, points: np.ndarray) -> np.ndarray:
        return self._weighted(lambda s: evaluate(s.space, s.coeffs[[U1, U2, PHI]], points))


@dataclass
class LinearizedSystem:
    """Frozen-coefficient Newton operator and residual at quadrature points."""

    space: Space
    params: Params
    alpha0: float
    terms: Dict[Tuple[int, int], Tuple]
    residual: np.ndarray
    row_scale: np.ndarray
    g_nl: float
    per_element: pd.Series

    def operator(self) -> sp.csr_matrix:
        return operator_matrix(self.space, self.terms, N_EQUATIONS, self.row_scale)

    @property
    def target(self) -> np.ndarray:
        """Scaled Newton right-hand side data -R."""
        return -(self.residual * self.row_scale).ravel()


# ----------------------------------------------------------------------
# Residual
# ----------------------------------------------------------------------
def residual_from_fields(
    vals: np.ndarray,
    dx: np.ndarray,
    dy: np.ndarray,
    hist: np.ndarray,
    params: Params,
    alpha0: float,
    forcing: Optional[Sequence] = None,
) -> np.ndarray:
    """
    The 13 residuals from field values and derivatives.

    Args:
        vals, dx, dy: (9, ...) values and derivatives of the unknowns
        hist: (3, ...) BDF history sums for u1, u2, phi
        params: Params
        alpha0: BDF coefficient of the current level
        forcing: Optional 13 right-hand sides (arrays or None)

    Returns:
        (13, ...) residuals
    """
    u1, u2, v11, v12, v21, _, phi, b1, b2 = vals
    div_b = dx[B1] + dy[B2]
    adv = params.advection
    eps2 = params.eps ** 2

    R = np.empty((N_EQUATIONS,) + np.shape(u1))
    R[0] = v11 - dx[U1]
    R[1] = v12 - dx[U2]
    R[2] = v21 - dy[U1]
    R[3] = -v11 - dy[U2]
    R[4] = dx[V21] - dy[V11]
    R[5] = -dx[V11] - dy[V12]
    R[6] = dx[U1] + dy[U2]
    R[7] = (
        alpha0 * u1 + hist[0] + dx[P] + params.lam * b1 * div_b
        - params.mu * (dx[V11] + dy[V21]) + adv * (u1 * v11 + u2 * v21)
    )
    R[8] = (
        alpha0 * u2 + hist[1] + dy[P] + params.lam * b2 * div_b
        - params.mu * (dx[V12] - dy[V11]) + adv * (u1 * v12 - u2 * v11)
    )
    R[9] = b1 - dx[PHI]
    R[10] = b2 - dy[PHI]
    R[11] = dx[B2] - dy[B1]
    R[12] = alpha0 * phi + hist[2] + params.transport * (u1 * b1 + u2 * b2) - params.gamma * div_b
    if params.include_cubic:
        R[12] += params.gamma * phi * (phi * phi - 1.0) / eps2

    if forcing is not None:
        for k, f in enumerate(forcing):
            if f is not None:
                R[k] -= f
    return R


def _forcing_at(params: Params, x: np.ndarray, y: np.ndarray, t: float):
    if params.forcing is None:
        return None
    return params.forcing(x, y, t)


def residual_fields(state: State, history: TimeHistory, params: Params, x) -> np.ndarray:
    """
    Equation residuals at physical point(s).

    Args:
        x: A point (2,) or points (n, 2)

    Returns:
        (13,) for a single point, else (13, n)
    """
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    vals, dx, dy = evaluate(state.space, state.coeffs, pts, derivatives=True)
    hist = history.at_points(pts)
    f = _forcing_at(params, pts[:, 0], pts[:, 1], state.t)
    R = residual_from_fields(vals, dx, dy, hist, params, history.alpha0, f)
    return R[:, 0] if np.ndim(x) == 1 else R


def _quadrature_residual(state: State, history: TimeHistory, params: Params):
    space = state.space
    vals, dx, dy = field_at_quadrature(space, state.coeffs)
    hist = history.at_quadrature(space)
    qd = space.quadrature_data
    f = _forcing_at(params, qd.X, qd.Y, state.t)
    R = residual_from_fields(vals, dx, dy, hist, params, history.alpha0, f)
    return (vals, dx, dy), R


def _functional_from_residual(space: Space, params: Params, R: np.ndarray) -> Tuple[float, pd.Series]:
    weights = np.asarray(params.ls_weights)[:, None, None]
    local = element_integrals(space, np.sum(weights * R * R, axis=0))
    per_element = pd.Series(local, index=pd.Index(space.leaves, name="element"), name="functional")
    return float(local.sum()), per_element


def nonlinear_functional(state: State, history: TimeHistory, params: Params) -> Tuple[float, pd.Series]:
    """
    Weighted least-squares functional of the nonlinear residual.

    Returns:
        (total, per-leaf values indexed by element id)
    """
    _, R = _quadrature_residual(state, history, params)
    return _functional_from_residual(state.space, params, R)


# ----------------------------------------------------------------------
# Linearization and assembly
# ----------------------------------------------------------------------
def jacobian_terms(vals: np.ndarray, dx: np.ndarray, dy: np.ndarray, params: Params, alpha0: float) -> Dict:
    """Frechet derivative of the residual as a (equation, unknown) -> (a, bx, by) table."""
    u1, u2, v11, v12, v21, _, phi, b1, b2 = vals
    div_b = dx[B1] + dy[B2]
    adv = params.advection
    lam = params.lam
    mu = params.mu
    tr = params.transport

    terms = dict(LINEAR_TERMS)
    terms.update({
        (7, U1): (alpha0 + adv * v11, None, None),
        (7, U2): (adv * v21, None, None),
        (7, P): (None, 1.0, None),
        (7, B1): (lam * div_b, lam * b1, None),
        (7, B2): (None, None, lam * b1),
        (7, V11): (adv * u1, -mu, None),
        (7, V21): (adv * u2, None, -mu),
        (8, U1): (adv * v12, None, None),
        (8, U2): (alpha0 - adv * v11, None, None),
        (8, P): (None, None, 1.0),
        (8, B2): (lam * div_b, None, lam * b2),
        (8, B1): (None, lam * b2, None),
        (8, V12): (adv * u1, -mu, None),
        (8, V11): (-adv * u2, None, mu),
        (12, U1): (tr * b1, None, None),
        (12, U2): (tr * b2, None, None),
        (12, B1): (tr * u1, -params.gamma, None),
        (12, B2): (tr * u2, None, -params.gamma),
    })
    reaction = alpha0
    if params.include_cubic:
        reaction = alpha0 + params.gamma * (3.0 * phi * phi - 1.0) / params.eps ** 2
    terms[(12, PHI)] = (reaction, None, None)
    return terms


def apply_jacobian(terms: Dict, vals: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Action of a term table on a direction given by its values and derivatives."""
    shape = np.shape(vals[0])
    out = np.zeros((N_EQUATIONS,) + shape)
    for (k, c), (a, bx, by) in terms.items():
        if a is not None:
            out[k] += a * vals[c]
        if bx is not None:
            out[k] += bx * dx[c]
        if by is not None:
            out[k] += by * dy[c]
    return out


def linearize(state: State, history: TimeHistory, params: Params) -> LinearizedSystem:
    """
    Newton linearization at the given state.

    Raises:
        TwoPhaseSystemError: If the state has non-finite coefficients
    """
    if not state.is_finite():
        raise TwoPhaseSystemError("Cannot linearize at a non-finite state")
    space = state.space
    (vals, dx, dy), R = _quadrature_residual(state, history, params)
    g_nl, per_element = _functional_from_residual(space, params, R)
    terms = jacobian_terms(vals, dx, dy, params, history.alpha0)
    qd = space.quadrature_data
    row_scale = np.sqrt(np.asarray(params.ls_weights)[:, None, None] * qd.W[None, :, :])
    return LinearizedSystem(
        space=space,
        params=params,
        alpha0=history.alpha0,
        terms=terms,
        residual=R,
        row_scale=row_scale,
        g_nl=g_nl,
        per_element=per_element,
    )


def assemble(linsys: LinearizedSystem, space: Optional[Space] = None) -> SparseSystem:
    """
    Normal equations of the linearized least-squares problem.

    A_ij = sum_k w_k (L_k phi_j, L_k phi_i), b_i = sum_k w_k (-R_k, L_k phi_i)
    on the full nodal layout; constraints are applied by fespace.apply_bcs.
    """
    space = linsys.space if space is None else space
    if space is not linsys.space:
        raise TwoPhaseSystemError("Linearization belongs to a different space")
    L = linsys.operator()
    A = sp.csr_matrix(L.T @ L)
    b = L.T @ linsys.target
    logger.debug(f"Assembled {A.shape[0]} unknowns, {A.nnz} nonzeros")
    return SparseSystem(A, b, space=space)


def linearized_functional(
    increment: np.ndarray,
    linsys: LinearizedSystem,
    space: Optional[Space] = None,
    system: Optional[SparseSystem] = None,
) -> float:
    """
    Least-squares functional of the linearized problem at an increment.

    Equals incr^T A incr - 2 incr^T b + G_nl for the assembled full system.
    """
    space = linsys.space if space is None else space
    x = np.asarray(increment, dtype=float).ravel()
    if x.size != space.size:
        raise TwoPhaseSystemError(f"Increment of size {x.size} does not match space of size {space.size}")
    if system is not None:
        return float(x @ (system.matrix @ x) - 2.0 * x @ system.rhs + linsys.g_nl)
    r = linsys.operator() @ x - linsys.target
    return float(r @ r)


def update_state(state: State, increment: np.ndarray, step: float = 1.0) -> State:
    """state + step * increment, with the pressure shifted to zero mean."""
    coeffs = state.coeffs + step * as_components(state.space, increment)
    coeffs = enforce_zero_mean(state.space, coeffs, [P])
    return State(state.space, coeffs, state.t)


# ----------------------------------------------------------------------
# Boundary conditions and initial conditions
# ----------------------------------------------------------------------
def two_phase_bcs(phi_trace: Optional[Callable] = None) -> Tuple[ComponentBC, ...]:
    """No-slip velocity, free V, zero-mean p, Dirichlet phi, zero-tangential B."""
    return (
        ComponentBC.dirichlet(),
        ComponentBC.dirichlet(),
        ComponentBC.free(),
        ComponentBC.free(),
        ComponentBC.free(),
        ComponentBC.zero_mean(),
        ComponentBC.dirichlet(phi_trace),
        ComponentBC.zero_tangential(0),
        ComponentBC.zero_tangential(1),
    )


def ic_coalescence(x, y, eta: float = 0.01):
    """Two osculating bubbles (phi = -1 inside) of radius 0.11."""
    d1 = np.sqrt((np.asarray(x) - 0.38) ** 2 + (np.asarray(y) - 0.5) ** 2) - 0.11
    d2 = np.sqrt((np.asarray(x) - 0.62) ** 2 + (np.asarray(y) - 0.5) ** 2) - 0.11
    return np.tanh(d1 / (2 * eta)) + np.tanh(d2 / (2 * eta)) - 1.0


def ic_square(x, y):
    """phi = +1 on the centred square of side 1/2, -1 elsewhere."""
    inside = (np.abs(np.asarray(x) - 0.5) <= 0.25) & (np.abs(np.asarray(y) - 0.5) <= 0.25)
    return np.where(inside, 1.0, -1.0)


def initial_phase(which_test: str, eta: float = 0.01) -> Callable:
    if which_test == "coalescence":
        return lambda x, y: ic_coalescence(x, y, eta)
    if which_test == "square":
        return ic_square
    raise TwoPhaseSystemError(f"No phase-field initial condition for test {which_test!r}")


def state_from_phase(space: Space, phi: np.ndarray, t: float = 0.0) -> State:
    """u = V = p = 0, the given phi, and B the L2-projected gradient of phi."""
    coeffs = np.zeros((N_UNKNOWNS, space.n_nodes))
    coeffs[PHI] = phi
    coeffs[[B1, B2]] = l2_project_gradient(space, phi)
    coeffs[B1, space.on_y_edge] = 0.0
    coeffs[B2, space.on_x_edge] = 0.0
    return State(space, conform(space, coeffs), t)


def build_initial_state(space: Space, which_test: str, eta: float = 0.01) -> State:
    """Nodal interpolation of the coalescence or square-bubble initial condition."""
    phi = interpolate_function(space, initial_phase(which_test, eta))[0]
    state = state_from_phase(space, phi)
    logger.info(f"✓ Initial condition '{which_test}' on {space.n_nodes} nodes")
    return state
