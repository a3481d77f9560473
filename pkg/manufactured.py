"""
Manufactured Solution Module

Smooth steady exact fields on the unit square with forcing for all 13
equations derived symbolically, for convergence and norm-equivalence checks.

Velocity comes from the stream function sin^2(pi x) sin^2(pi y), so it is
divergence free and vanishes on the boundary; the pressure has zero mean; phi
vanishes on the boundary and its gradient has zero tangential trace.
"""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, List, Tuple

import numpy as np
import sympy

from fespace import Space, field_at_quadrature, integrate, interpolate_function
from twophase_system import N_UNKNOWNS, Params, State

logger = logging.getLogger(__name__)

x_, y_ = sympy.symbols("x y", real=True)
mu_, lam_, gamma_, eps_, adv_, tr_, cub_ = sympy.symbols("mu lam gamma eps adv tr cub", real=True)


@lru_cache(maxsize=1)
def exact_expressions() -> Tuple[sympy.Expr, ...]:
    """Exact (u1, u2, V11, V12, V21, p, phi, B1, B2) as sympy expressions."""
    pi = sympy.pi
    psi = sympy.sin(pi * x_) ** 2 * sympy.sin(pi * y_) ** 2
    u1 = sympy.diff(psi, y_)
    u2 = -sympy.diff(psi, x_)
    p = sympy.cos(pi * x_) * sympy.cos(pi * y_)
    phi = sympy.Rational(1, 2) * sympy.sin(pi * x_) * sympy.sin(pi * y_)
    return (
        u1,
        u2,
        sympy.diff(u1, x_),
        sympy.diff(u2, x_),
        sympy.diff(u1, y_),
        p,
        phi,
        sympy.diff(phi, x_),
        sympy.diff(phi, y_),
    )


@lru_cache(maxsize=1)
def forcing_expressions() -> Tuple[sympy.Expr, ...]:
    """Steady residuals of the exact fields, with parameters left symbolic."""
    u1, u2, v11, v12, v21, p, phi, b1, b2 = exact_expressions()
    dx = lambda f: sympy.diff(f, x_)
    dy = lambda f: sympy.diff(f, y_)
    div_b = dx(b1) + dy(b2)
    rows = [
        v11 - dx(u1),
        v12 - dx(u2),
        v21 - dy(u1),
        -v11 - dy(u2),
        dx(v21) - dy(v11),
        -dx(v11) - dy(v12),
        dx(u1) + dy(u2),
        dx(p) + lam_ * b1 * div_b - mu_ * (dx(v11) + dy(v21)) + adv_ * (u1 * v11 + u2 * v21),
        dy(p) + lam_ * b2 * div_b - mu_ * (dx(v12) - dy(v11)) + adv_ * (u1 * v12 - u2 * v11),
        b1 - dx(phi),
        b2 - dy(phi),
        dx(b2) - dy(b1),
        tr_ * (u1 * b1 + u2 * b2) - gamma_ * div_b + cub_ * gamma_ * phi * (phi ** 2 - 1) / eps_ ** 2,
    ]
    return tuple(r if r == 0 else sympy.simplify(r) for r in rows)


def _lambdify(expr: sympy.Expr) -> Callable:
    f = sympy.lambdify((x_, y_), expr, modules="numpy")
    return lambda x, y: np.broadcast_to(np.asarray(f(x, y), dtype=float), np.shape(x)).copy()


@dataclass
class ManufacturedProblem:
    """Exact fields, their gradients, and matching parameters with forcing."""

    params: Params
    fields: List[Callable]
    gradients: List[Tuple[Callable, Callable]]

    def exact(self, x, y) -> List[np.ndarray]:
        return [f(x, y) for f in self.fields]

    def exact_state(self, space: Space, t: float = 0.0) -> State:
        return State(space, interpolate_function(space, self.exact, N_UNKNOWNS), t)

    def initial_state(self, space: Space) -> State:
        """The exact fields interpolated; they are a steady solution."""
        return self.exact_state(space, 0.0)


def manufactured_params(**overrides) -> Params:
    """Moderate parameters for which the manufactured problem is well resolved."""
    values = dict(mu=1.0, lam=0.1, gamma=1.0, eps=0.5, dt=0.1, scheme="BDF1", include_advection=True)
    values.update(overrides)
    return Params(**values)


def build_problem(params: Params = None) -> ManufacturedProblem:
    """
    Attach the symbolic forcing of the exact fields to `params`.

    Args:
        params: Parameters (manufactured_params() by default)

    Returns:
        ManufacturedProblem
    """
    if params is None:
        params = manufactured_params()
    subs = {
        mu_: params.mu,
        lam_: params.lam,
        gamma_: params.gamma,
        eps_: params.eps,
        adv_: params.advection,
        tr_: params.transport,
        cub_: 1.0 if params.include_cubic else 0.0,
    }
    forcing_rows = []
    for expr in forcing_expressions():
        expr = expr.subs(subs)
        forcing_rows.append(None if expr == 0 else _lambdify(expr))

    def forcing(x, y, t):
        return [None if f is None else f(x, y) for f in forcing_rows]

    exprs = exact_expressions()
    fields = [_lambdify(e) for e in exprs]
    gradients = [(_lambdify(sympy.diff(e, x_)), _lambdify(sympy.diff(e, y_))) for e in exprs]
    nonzero = sum(f is not None for f in forcing_rows)
    logger.debug(f"Manufactured forcing built for {nonzero} equations")
    return ManufacturedProblem(params=replace(params, forcing=forcing), fields=fields, gradients=gradients)


def h1_error(state: State, problem: ManufacturedProblem) -> float:
    """H1 norm of the error over all nine unknowns."""
    space = state.space
    qd = space.quadrature_data
    vals, dx, dy = field_at_quadrature(space, state.coeffs)
    total = 0.0
    for c in range(N_UNKNOWNS):
        gx, gy = problem.gradients[c]
        err = vals[c] - problem.fields[c](qd.X, qd.Y)
        ex = dx[c] - gx(qd.X, qd.Y)
        ey = dy[c] - gy(qd.X, qd.Y)
        total += integrate(space, err ** 2 + ex ** 2 + ey ** 2)
    return float(np.sqrt(total))
