"""
Adaptive Refinement Module

Elementwise least-squares functional values serve as local error estimates.
Markers: an efficiency-based one that picks the marked set maximizing
predicted functional reduction per predicted work, a fixed-fraction
(Dorfler) one, and an interface-band one that follows the diffuse layer.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from fespace import build_space, is_nested, prolong
from mesh import MarkSet, refine
from twophase_system import PHI, State, TimeHistory

logger = logging.getLogger(__name__)

NEW_ELEMENTS_PER_REFINEMENT = 3
THRESHOLD_RTOL = 1e-12
INTERFACE_BAND = 0.95
SAMPLE_FRACTIONS = (0.25, 0.5, 0.75)


class AdaptError(Exception):
    """Custom exception for marking and refinement errors."""
    pass


@dataclass
class ErrorField:
    """Nonnegative local functional values indexed by leaf element id."""

    values: pd.Series

    def __post_init__(self):
        self.values = pd.Series(self.values, dtype=float)
        if (self.values < 0).any():
            raise AdaptError("Local functional values must be non-negative")

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def __len__(self) -> int:
        return len(self.values)

    def ranked(self) -> pd.Series:
        """Values sorted largest first, ties broken by element id."""
        frame = pd.DataFrame({"element": self.values.index.astype(np.int64), "value": self.values.to_numpy()})
        frame = frame.sort_values(["value", "element"], ascending=[False, True], kind="mergesort")
        return pd.Series(frame["value"].to_numpy(), index=frame["element"].to_numpy())


def mark_ace(err: ErrorField, degree: int, work_exponent: float = 1.0) -> MarkSet:
    """
    Efficiency-based marking.

    Refining the prefix of the ranked elements carrying a fraction r of the
    functional is predicted to leave (1 - r + r 2^(-2p)) G, at work
    (N + 3m)^work_exponent for m marked elements out of N. The prefix with the
    largest log-reduction per unit work is marked.

    Args:
        err: Local functional values
        degree: Polynomial degree p of the space being refined
        work_exponent: Exponent of the work model

    Returns:
        Marked element ids (empty when the total is zero)
    """
    if degree < 1:
        raise AdaptError(f"Degree must be positive, got {degree}")
    if work_exponent <= 0:
        raise AdaptError(f"work_exponent must be positive, got {work_exponent}")
    total = err.total
    if total <= 0.0 or len(err) == 0:
        return frozenset()

    ranked = err.ranked()
    n = len(ranked)
    m = np.arange(1, n + 1)
    r = np.clip(np.cumsum(ranked.to_numpy()) / total, 0.0, 1.0)
    predicted = 1.0 - r * (1.0 - 2.0 ** (-2 * degree))
    work = (n + NEW_ELEMENTS_PER_REFINEMENT * m).astype(float) ** work_exponent
    effectiveness = -np.log(predicted) / work
    best = int(np.argmax(effectiveness))
    marked = frozenset(int(e) for e in ranked.index[: best + 1])
    logger.debug(f"ACE marking: {len(marked)}/{n} elements, captured fraction {r[best]:.3f}")
    return marked


def mark_dorfler(err: ErrorField, theta: float) -> MarkSet:
    """
    Smallest ranked prefix carrying at least theta of the total functional.

    Raises:
        AdaptError: If theta is outside (0, 1]
    """
    if not 0.0 < theta <= 1.0:
        raise AdaptError(f"theta must lie in (0, 1], got {theta}")
    total = err.total
    if total <= 0.0:
        return frozenset()
    ranked = err.ranked()
    cumulative = np.cumsum(ranked.to_numpy())
    threshold = theta * total * (1.0 - THRESHOLD_RTOL)
    count = int(np.searchsorted(cumulative, threshold, side="left")) + 1
    count = min(count, len(ranked))
    return frozenset(int(e) for e in ranked.index[:count])


def _in_band(state: State, band: float) -> np.ndarray:
    phi = state.coeffs[PHI][state.space.elem_nodes]
    return (phi.min(axis=1) < band) & (phi.max(axis=1) > -band)


def mark_interface(state: State, band: float = INTERFACE_BAND, reference: Optional[State] = None) -> MarkSet:
    """
    Leaves whose nodal phi values reach into the diffuse layer |phi| < band.

    With a reference state (typically the previous time level on its own
    mesh), leaves of `state` that overlap the reference's diffuse layer are
    marked as well.

    Raises:
        AdaptError: If band is outside (0, 1)
    """
    if not 0.0 < band < 1.0:
        raise AdaptError(f"band must lie in (0, 1), got {band}")
    space = state.space
    marked = set(int(e) for e in space.leaves[_in_band(state, band)])
    if reference is not None:
        ref_space = reference.space
        flagged = ref_space.leaves[_in_band(reference, band)]
        if len(flagged):
            x0, x1, y0, y1 = ref_space.mesh.bounds(flagged)
            xs = np.concatenate([x0 + f * (x1 - x0) for f in SAMPLE_FRACTIONS for _ in SAMPLE_FRACTIONS])
            ys = np.concatenate([y0 + f * (y1 - y0) for _ in SAMPLE_FRACTIONS for f in SAMPLE_FRACTIONS])
            ids, _ = space.mesh.locate(np.column_stack([xs, ys]))
            marked.update(int(e) for e in np.unique(ids))
    marked = frozenset(marked)
    logger.debug(f"Interface marking: {len(marked)}/{len(space.leaves)} elements")
    return marked


def refine_and_transfer(
    state: State,
    history: Optional[TimeHistory],
    marks: MarkSet,
    degree: Optional[int] = None,
) -> Tuple[State, Optional[TimeHistory]]:
    """
    Refine the state's mesh and embed the state (and nested history) exactly.

    Args:
        state: Current state
        history: Time history (states on other meshes are left as they are)
        marks: Leaves to refine (closure is applied)
        degree: Degree of the new space (default: unchanged)

    Returns:
        (transferred state on the new space, transferred history)
    """
    space = state.space
    degree = space.degree if degree is None else degree
    mesh = refine(space.mesh, marks)
    if mesh is space.mesh and degree == space.degree:
        return state, history

    fine = build_space(mesh, degree, space.n_components, space.bcs, space.quadrature_extra)
    new_state = State(fine, prolong(space, fine, state.coeffs), state.t)
    if history is None:
        return new_state, None

    states = []
    for old in history.states:
        if old.space is space or is_nested(old.space, fine):
            old = State(fine, prolong(old.space, fine, old.coeffs), old.t)
        states.append(old)
    return new_state, TimeHistory(states, history.alpha0, history.weights)
