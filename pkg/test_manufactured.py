"""
Tests for the manufactured solution: symbolic forcing and H1 error measurement
"""

import numpy as np

from fespace import build_space
from manufactured import build_problem, h1_error, manufactured_params
from mesh import build_uniform
from twophase_system import N_UNKNOWNS, TimeHistory, nonlinear_functional, two_phase_bcs


def exact_on(problem, n):
    space = build_space(build_uniform(n, n), 2, N_UNKNOWNS, two_phase_bcs(None))
    return problem.exact_state(space)


def test_forcing_only_in_momentum_and_phase_equations():
    """Test the first-order identities hold exactly, so only rows 7, 8 and 12 need forcing."""
    problem = build_problem()
    x = np.array([0.3, 0.7])
    y = np.array([0.2, 0.6])
    rows = problem.params.forcing(x, y, 0.0)
    assert len(rows) == 13
    assert [k for k, f in enumerate(rows) if f is not None] == [7, 8, 12]


def test_exact_fields_satisfy_boundary_conditions():
    """Test velocity and phi vanish on the boundary."""
    problem = build_problem()
    s = np.linspace(0.0, 1.0, 7)
    zeros, ones = np.zeros_like(s), np.ones_like(s)
    for x, y in ((s, zeros), (s, ones), (zeros, s), (ones, s)):
        u1, u2, *_ = problem.exact(x, y)
        phi = problem.exact(x, y)[6]
        assert np.allclose(u1, 0.0, atol=1e-12)
        assert np.allclose(u2, 0.0, atol=1e-12)
        assert np.allclose(phi, 0.0, atol=1e-12)


def test_h1_error_of_interpolant_converges():
    """Test the H1 error of the biquadratic interpolant drops at second order."""
    problem = build_problem()
    coarse = h1_error(exact_on(problem, 8), problem)
    fine = h1_error(exact_on(problem, 16), problem)
    assert 0.0 < fine < coarse
    assert np.log2(coarse / fine) >= 1.7


def test_exact_interpolant_functional_decreases():
    """Test the forced residual of the interpolated exact fields shrinks under refinement."""
    problem = build_problem(manufactured_params(dt=0.1))
    values = []
    for n in (4, 8):
        state = exact_on(problem, n)
        g, _ = nonlinear_functional(state, TimeHistory.steady(state, problem.params.dt), problem.params)
        values.append(g)
    assert 0.0 < values[1] < values[0] / 4.0
