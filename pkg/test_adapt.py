"""
Tests for local error fields, marking strategies and refine-and-transfer
"""

import numpy as np
import pandas as pd
import pytest

from adapt import AdaptError, ErrorField, mark_ace, mark_dorfler, mark_interface, refine_and_transfer
from fespace import build_space, evaluate, interpolate_function
from mesh import build_uniform
from twophase_system import N_UNKNOWNS, PHI, State, TimeHistory, two_phase_bcs


def field(values, ids=None):
    ids = range(len(values)) if ids is None else ids
    return ErrorField(pd.Series(values, index=list(ids)))


def phase_ramp(n, shift):
    """phi = 4 (x - shift) clipped to [-1, 1], everything else zero."""
    space = build_space(build_uniform(n, n), 1, N_UNKNOWNS, two_phase_bcs(None))
    coeffs = np.zeros((N_UNKNOWNS, space.n_nodes))
    coeffs[PHI] = np.clip(4.0 * (space.node_coords[:, 0] - shift), -1.0, 1.0)
    return State(space, coeffs)


def linear_state(degree=1):
    space = build_space(build_uniform(2, 2), degree, N_UNKNOWNS, two_phase_bcs(None))
    coeffs = interpolate_function(space, lambda x, y: [x + 2.0 * y + c for c in range(N_UNKNOWNS)], N_UNKNOWNS)
    return State(space, coeffs, 0.25)


def test_error_field_rejects_negative_values():
    """Test local functional values must be non-negative."""
    with pytest.raises(AdaptError):
        field([1.0, -0.1])


def test_ranked_breaks_ties_by_element_id():
    """Test ranking is by value descending, then id ascending."""
    ranked = field([1.0, 2.0, 1.0], ids=[5, 3, 2]).ranked()
    assert list(ranked.index) == [3, 2, 5]
    assert list(ranked) == [2.0, 1.0, 1.0]


def test_dorfler_smallest_prefix():
    """Test Dorfler marks the fewest largest elements carrying theta of the total."""
    err = field([4.0, 3.0, 2.0, 1.0])
    assert mark_dorfler(err, 0.5) == {0, 1}
    assert mark_dorfler(err, 0.4) == {0}
    assert mark_dorfler(err, 0.7) == {0, 1}
    assert mark_dorfler(err, 1.0) == {0, 1, 2, 3}


def test_dorfler_rejects_bad_theta():
    """Test theta outside (0, 1] is rejected."""
    with pytest.raises(AdaptError):
        mark_dorfler(field([1.0]), 0.0)
    with pytest.raises(AdaptError):
        mark_dorfler(field([1.0]), 1.5)


def test_zero_functional_marks_nothing():
    """Test an exactly resolved field produces no marks."""
    err = field([0.0, 0.0, 0.0])
    assert mark_dorfler(err, 0.5) == frozenset()
    assert mark_ace(err, 2) == frozenset()


def test_ace_marks_single_dominant_element():
    """Test efficiency-based marking isolates one dominant error."""
    err = field([1e-6, 100.0, 1e-6, 1e-6])
    assert mark_ace(err, 1) == {1}


def test_ace_two_elements():
    """Test [0.9, 0.1] marks only the dominant element for p = 1 and p = 2."""
    assert mark_ace(field([0.9, 0.1]), 1) == {0}
    assert mark_ace(field([0.9, 0.1]), 2) == {0}


def test_ace_marks_everything_for_uniform_error():
    """Test a uniform error distribution is best refined everywhere."""
    err = field([1.0, 1.0, 1.0, 1.0])
    assert mark_ace(err, 1) == {0, 1, 2, 3}


def test_ace_rejects_bad_arguments():
    """Test degree and work exponent are validated."""
    with pytest.raises(AdaptError):
        mark_ace(field([1.0]), 0)
    with pytest.raises(AdaptError):
        mark_ace(field([1.0]), 1, work_exponent=0.0)


def test_refine_and_transfer_is_exact():
    """Test refinement embeds the state and its nested history exactly."""
    state = linear_state()
    history = TimeHistory.bdf([state, state], 0.01, 2)
    new_state, new_history = refine_and_transfer(state, history, {0}, degree=2)
    assert new_state.space.degree == 2
    assert len(new_state.space.leaves) == 7
    assert new_state.t == 0.25
    pts = np.random.default_rng(4).random((40, 2))
    assert np.allclose(evaluate(new_state.space, new_state.coeffs, pts), evaluate(state.space, state.coeffs, pts))
    assert all(s.space is new_state.space for s in new_history.states)
    assert new_history.alpha0 == history.alpha0


def test_refine_and_transfer_without_marks():
    """Test an empty mark set at the same degree returns the inputs."""
    state = linear_state()
    same, history = refine_and_transfer(state, None, frozenset())
    assert same is state
    assert history is None


def test_interface_marks_diffuse_layer():
    """Test only the element columns the ramp passes through are marked."""
    state = phase_ramp(4, 0.5)
    assert mark_interface(state) == {j * 4 + i for j in range(4) for i in (1, 2)}


def test_interface_marks_reference_layer():
    """Test a grid without an interface of its own follows the reference state's layer."""
    pure = phase_ramp(2, -1.0)
    assert mark_interface(pure) == frozenset()
    assert mark_interface(pure, reference=phase_ramp(4, 0.25)) == {0, 2}


def test_interface_rejects_bad_band():
    """Test the band must lie strictly between 0 and 1."""
    for band in (0.0, 1.0):
        with pytest.raises(AdaptError):
            mark_interface(phase_ramp(2, 0.5), band)
