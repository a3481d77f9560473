"""
Nested Iteration Driver Module

Time loop of the simulator. Every time step starts on the coarsest grid,
runs damped Newton to the functional-based stopping rule, and moves up a
hierarchy of uniformly or adaptively refined grids, using each solution as
the initial guess on the next grid. Linear systems are solved by conjugate
gradients preconditioned with a V-cycle over the grids visited so far.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from adapt import INTERFACE_BAND, ErrorField, mark_ace, mark_dorfler, mark_interface, refine_and_transfer
from energy import EnergyRecord, energy_rate, energy_record, interface_topology
from fespace import (
    BCSpec,
    Space,
    apply_bcs,
    build_space,
    enforce_zero_mean,
    impose_essential,
    interpolate_fe,
    reduced_transfer,
)
from linsolve import Hierarchy, SolverError, pcg
from mesh import Domain, build_uniform, refine
from twophase_system import (
    BDF_TABLE,
    N_UNKNOWNS,
    P,
    SCHEMES,
    Params,
    State,
    TimeHistory,
    assemble,
    build_initial_state,
    initial_phase,
    linearize,
    nonlinear_functional,
    two_phase_bcs,
    update_state,
)

logger = logging.getLogger(__name__)

REFINEMENT_MODES = ("uniform", "adaptive")
MARKERS = ("ace", "dorfler", "interface")
ACCEPT_RTOL = 1e-10


class NestedDriverError(Exception):
    """Custom exception for driver configuration and control errors."""
    pass


class NewtonDivergenceError(NestedDriverError):
    """Raised when damped Newton cannot reduce the nonlinear functional."""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class DriverConfig:
    """Control parameters of the time loop, nested iteration and solver."""

    max_time_steps: int = 100
    dt: float = 0.01
    max_newton: int = 10
    newton_rel_tol: float = 0.1
    functional_floor: float = 1e-28
    solver_tol: float = 1e-8
    solver_gain_floor: float = 0.1
    max_cycles: int = 50
    levels: int = 4
    functional_tol: float = 0.0
    refinement: str = "uniform"
    marker: str = "ace"
    dorfler_theta: float = 0.5
    interface_band: float = INTERFACE_BAND
    work_exponent: float = 1.0
    coarse_nx: int = 2
    coarse_ny: int = 2
    coarse_degree: int = 1
    fine_degree: int = 2
    warm_start: bool = False
    quadrature_extra: int = 1
    max_halvings: int = 5
    snapshot_every: int = 10
    topology_level: float = 0.0

    def __post_init__(self):
        for name in ("newton_rel_tol", "solver_tol"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise NestedDriverError(f"{name} must lie in (0, 1), got {value}")
        if not 0.0 <= self.solver_gain_floor < 1.0:
            raise NestedDriverError(f"solver_gain_floor must lie in [0, 1), got {self.solver_gain_floor}")
        for name in ("max_newton", "max_cycles", "levels", "coarse_nx", "coarse_ny", "snapshot_every"):
            if getattr(self, name) < 1:
                raise NestedDriverError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.max_time_steps < 0 or self.max_halvings < 0:
            raise NestedDriverError("max_time_steps and max_halvings must be non-negative")
        if not self.dt > 0:
            raise NestedDriverError(f"dt must be positive, got {self.dt}")
        if self.functional_tol < 0 or self.functional_floor < 0:
            raise NestedDriverError("functional_tol and functional_floor must be non-negative")
        if self.refinement not in REFINEMENT_MODES:
            raise NestedDriverError(f"refinement must be one of {REFINEMENT_MODES}, got {self.refinement!r}")
        if self.marker not in MARKERS:
            raise NestedDriverError(f"marker must be one of {MARKERS}, got {self.marker!r}")
        if not 0.0 < self.dorfler_theta <= 1.0:
            raise NestedDriverError(f"dorfler_theta must lie in (0, 1], got {self.dorfler_theta}")
        if not 0.0 < self.interface_band < 1.0:
            raise NestedDriverError(f"interface_band must lie in (0, 1), got {self.interface_band}")
        if self.work_exponent <= 0:
            raise NestedDriverError(f"work_exponent must be positive, got {self.work_exponent}")
        if self.coarse_degree not in (1, 2) or self.fine_degree not in (1, 2) or self.fine_degree < self.coarse_degree:
            raise NestedDriverError("Degrees must be 1 or 2 with fine_degree >= coarse_degree")


# ----------------------------------------------------------------------
# Run log
# ----------------------------------------------------------------------
@dataclass
class NewtonRecord:
    """One Newton iteration on one grid of one time step."""

    step: int
    level: int
    newton: int
    elements: int
    dofs: int
    nnz: int
    g_before: float
    g_after: float
    g_lin: float
    rel_diff: float
    cycles: int
    conv_factor: float
    work: float
    halvings: int
    stopped_by: str
    wu: float = 0.0


@dataclass
class StepSummary:
    """Per-time-step totals relative to that step's finest grid."""

    step: int
    t: float
    levels: int
    finest_elements: int
    finest_dofs: int
    finest_nnz: int
    finest_functional: float
    wu: float
    avg_conv_factor: float
    newton_steps: int
    components: int = -1
    area: float = float("nan")
    perimeter: float = float("nan")
    extent_ratio: float = float("nan")


@dataclass
class RunLog:
    """Append-only log of Newton iterations and time-step summaries."""

    records: List[NewtonRecord] = field(default_factory=list)
    steps: List[StepSummary] = field(default_factory=list)

    def extend(self, records: Sequence[NewtonRecord]):
        self.records.extend(records)

    def add_step(self, summary: StepSummary):
        self.steps.append(summary)

    def to_frame(self) -> pd.DataFrame:
        columns = list(NewtonRecord.__dataclass_fields__)
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)

    def steps_frame(self) -> pd.DataFrame:
        columns = list(StepSummary.__dataclass_fields__)
        return pd.DataFrame([asdict(s) for s in self.steps], columns=columns)

    def level_table(self) -> pd.DataFrame:
        """Per (step, level): element count and Newton steps taken."""
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=["step", "level", "elements", "newton_steps"])
        grouped = frame.groupby(["step", "level"], sort=True)
        return pd.DataFrame({
            "elements": grouped["elements"].first(),
            "newton_steps": grouped["newton"].max(),
        }).reset_index()

    def newton_per_level(self) -> pd.Series:
        """Average Newton steps per grid level over all time steps."""
        table = self.level_table()
        if table.empty:
            return pd.Series(dtype=float, name="newton_steps")
        return table.groupby("level")["newton_steps"].mean()

    def averages(self) -> Dict[str, float]:
        """Run-level averages over time steps."""
        steps = self.steps_frame()
        if steps.empty:
            return {"avg_wu": 0.0, "avg_nonzeros": 0.0, "avg_functional": 0.0, "avg_elements": 0.0,
                    "avg_conv_factor": 0.0, "time_steps": 0}
        return {
            "avg_wu": float(steps["wu"].mean()),
            "avg_nonzeros": float(steps["finest_nnz"].mean()),
            "avg_functional": float(steps["finest_functional"].mean()),
            "avg_elements": float(steps["finest_elements"].mean()),
            "avg_conv_factor": float(steps["avg_conv_factor"].mean()),
            "time_steps": int(len(steps)),
        }


# ----------------------------------------------------------------------
# Output sink
# ----------------------------------------------------------------------
class OutputSink(Protocol):
    def on_snapshot(self, step: int, state: State, per_element: Optional[pd.Series]) -> None: ...

    def on_energy(self, records: Sequence[EnergyRecord]) -> None: ...

    def on_log(self, runlog: RunLog) -> None: ...

    def close(self) -> None: ...


class NullOutputs:
    """Sink that keeps the latest results in memory and writes nothing."""

    def __init__(self):
        self.snapshots: Dict[int, State] = {}
        self.energy: List[EnergyRecord] = []
        self.runlog: Optional[RunLog] = None

    def on_snapshot(self, step, state, per_element):
        self.snapshots[step] = state

    def on_energy(self, records):
        self.energy = list(records)

    def on_log(self, runlog):
        self.runlog = runlog

    def close(self):
        pass


# ----------------------------------------------------------------------
# Test cases
# ----------------------------------------------------------------------
@dataclass
class TestCase:
    """Initial condition, boundary conditions and parameters of a run."""

    __test__ = False

    name: str
    params: Params
    bcs: BCSpec
    initial_state: Callable[[Space], State]
    domain: Domain = field(default_factory=Domain)
    problem: object = None


def make_test_case(name: str, params: Params, eta: float = 0.01) -> TestCase:
    """
    Build a named test case: 'coalescence', 'square' or 'manufactured'.

    The manufactured case replaces params' forcing with the symbolic one.
    """
    if name in ("coalescence", "square"):
        trace = initial_phase(name, eta)
        return TestCase(
            name=name,
            params=params,
            bcs=two_phase_bcs(trace),
            initial_state=lambda space: build_initial_state(space, name, eta),
        )
    if name == "manufactured":
        from manufactured import build_problem

        problem = build_problem(params)
        return TestCase(
            name=name,
            params=problem.params,
            bcs=two_phase_bcs(None),
            initial_state=problem.initial_state,
            problem=problem,
        )
    raise NestedDriverError(f"Unknown test case {name!r}")


# ----------------------------------------------------------------------
# Time discretization
# ----------------------------------------------------------------------
def bdf_coeffs(step_index: int, dt: float, scheme: str = "BDF2") -> Tuple[float, Tuple[float, ...]]:
    """
    BDF coefficients of a time step: (alpha0, history weights newest first).

    The first step always uses BDF1.
    """
    if step_index < 1:
        raise NestedDriverError(f"step_index must be at least 1, got {step_index}")
    if not dt > 0:
        raise NestedDriverError(f"dt must be positive, got {dt}")
    if scheme not in SCHEMES:
        raise NestedDriverError(f"Unknown scheme {scheme!r}")
    order = min(SCHEMES[scheme], step_index)
    a0, weights = BDF_TABLE[order]
    return a0 / dt, tuple(w / dt for w in weights)


def make_history(states: Sequence[State], step_index: int, dt: float, scheme: str) -> TimeHistory:
    alpha0, weights = bdf_coeffs(step_index, dt, scheme)
    return TimeHistory(list(states[: len(weights)]), alpha0, weights)


# ----------------------------------------------------------------------
# Newton on one grid
# ----------------------------------------------------------------------
def newton_on_grid(
    state: State,
    history: TimeHistory,
    params: Params,
    config: DriverConfig,
    transfers: Sequence = (),
    step: int = 0,
    level: int = 0,
) -> Tuple[State, List[NewtonRecord]]:
    """
    Damped Newton-least-squares iteration on the state's grid.

    Each iteration linearizes, assembles, and solves for the increment with
    V-cycle preconditioned CG, then halves the step until the nonlinear
    functional does not grow. Iteration stops when the linearized and
    nonlinear functionals agree to newton_rel_tol, or the functional drops
    below functional_floor.

    Args:
        transfers: Reduced prolongations from the coarser grids of this time
            step to this grid, coarsest first

    Raises:
        NewtonDivergenceError: If max_halvings halvings do not reduce the functional
    """
    space = state.space
    floor = config.functional_floor
    records: List[NewtonRecord] = []

    for it in range(1, config.max_newton + 1):
        linsys = linearize(state, history, params)
        g_nl = linsys.g_nl
        if g_nl <= floor:
            records.append(NewtonRecord(
                step, level, it - 1, len(space.leaves), space.n_dofs, 0, g_nl, g_nl, g_nl, 0.0,
                0, 0.0, 0.0, 0, "functional floor",
            ))
            logger.debug(f"Functional {g_nl:.3e} below floor; no Newton step needed")
            break

        reduced = apply_bcs(space, assemble(linsys), homogeneous=True)
        hier = Hierarchy.galerkin(reduced.matrix, list(transfers))

        tracker = {"prev": g_nl}

        def gain_floor(y, r):
            g = g_nl - float(y @ (r + reduced.rhs))
            gain = tracker["prev"] - g
            tracker["prev"] = g
            return gain < config.solver_gain_floor * max(g + gain, floor)

        callback = gain_floor if config.solver_gain_floor > 0 else None
        y, stats = pcg(reduced, tol=config.solver_tol, maxit=config.max_cycles, precond=hier, callback=callback)
        g_lin = max(g_nl - float(y @ (reduced.residual(y) + reduced.rhs)), 0.0)
        increment = reduced.to_full(y)

        step_len = 1.0
        halvings = 0
        while True:
            trial = update_state(state, increment, step_len)
            g_new, _ = nonlinear_functional(trial, history, params)
            if np.isfinite(g_new) and g_new <= g_nl * (1.0 + ACCEPT_RTOL) + floor:
                break
            halvings += 1
            if halvings > config.max_halvings:
                diagnostics = {
                    "step": step, "level": level, "newton": it, "g_nl": g_nl,
                    "g_trial": g_new, "halvings": halvings - 1, "cycles": stats.iterations,
                }
                logger.error(f"Newton diverged: {diagnostics}")
                raise NewtonDivergenceError(
                    f"Functional grew from {g_nl:.3e} after {config.max_halvings} step halvings "
                    f"(step {step}, level {level}, iteration {it})",
                    diagnostics,
                )
            step_len *= 0.5
        if halvings:
            logger.warning(f"Newton step halved {halvings} times (step {step}, level {level}, iteration {it})")

        state = trial
        # Linearized and nonlinear functionals agree only for full steps
        g_lin_step = g_lin if halvings == 0 else float("nan")
        rel = abs(g_lin_step - g_new) / max(g_new, floor) if halvings == 0 else float("inf")
        records.append(NewtonRecord(
            step, level, it, len(space.leaves), space.n_dofs, reduced.nnz, g_nl, g_new, g_lin_step, rel,
            stats.iterations, stats.conv_factor, stats.work, halvings, stats.stopped_by,
        ))
        logger.debug(
            f"  Newton {it}: G {g_nl:.4e} -> {g_new:.4e}, G_lin {g_lin:.4e}, "
            f"{stats.iterations} cycles ({stats.stopped_by}), rho {stats.conv_factor:.3f}"
        )
        if rel < config.newton_rel_tol or g_new <= floor:
            break
    return state, records


# ----------------------------------------------------------------------
# Nested iteration
# ----------------------------------------------------------------------
@dataclass
class GridHierarchy:
    """Spaces visited in one time step and the reduced transfers between them."""

    spaces: List[Space]
    transfers: List

    @property
    def finest(self) -> Space:
        return self.spaces[-1]


def coarse_space(config: DriverConfig, test_case: TestCase) -> Space:
    mesh = build_uniform(config.coarse_nx, config.coarse_ny, test_case.domain)
    return build_space(mesh, config.coarse_degree, N_UNKNOWNS, test_case.bcs, config.quadrature_extra)


def finest_uniform_space(config: DriverConfig, test_case: TestCase) -> Space:
    """Space of the uniform grid reached after levels - 1 refinements."""
    mesh = build_uniform(config.coarse_nx, config.coarse_ny, test_case.domain)
    for _ in range(config.levels - 1):
        mesh = refine(mesh, mesh.leaves)
    degree = config.coarse_degree if config.levels == 1 else config.fine_degree
    return build_space(mesh, degree, N_UNKNOWNS, test_case.bcs, config.quadrature_extra)


def _start_on(space: Space, previous: State, t: float) -> State:
    coeffs = interpolate_fe(space, previous.space, previous.coeffs)
    coeffs = impose_essential(space, coeffs)
    coeffs = enforce_zero_mean(space, coeffs, [P])
    return State(space, coeffs, t)


def _marks(state: State, per_element: pd.Series, config: DriverConfig, degree: int, reference: Optional[State] = None):
    if config.refinement == "uniform":
        return frozenset(int(e) for e in state.space.leaves)
    if config.marker == "interface":
        return mark_interface(state, config.interface_band, reference)
    err = ErrorField(per_element)
    if config.marker == "ace":
        return mark_ace(err, degree, config.work_exponent)
    return mark_dorfler(err, config.dorfler_theta)


def nested_iteration_timestep(
    history_states: Sequence[State],
    params: Params,
    config: DriverConfig,
    test_case: TestCase,
    step_index: int,
    previous: Optional[GridHierarchy] = None,
) -> Tuple[State, List[NewtonRecord], GridHierarchy]:
    """
    One time step: Newton on the coarsest grid, then refine, transfer and
    re-solve until `levels` grids have been visited or the functional drops
    below functional_tol.

    Args:
        history_states: Previous solutions, newest first
        previous: Grid hierarchy of the previous step, reused when warm_start is set

    Returns:
        (finest-grid state, Newton records, grid hierarchy of this step)
    """
    latest = history_states[0]
    t = latest.t + config.dt
    history = make_history(history_states, step_index, config.dt, params.scheme)
    records: List[NewtonRecord] = []

    if config.warm_start and previous is not None:
        space = previous.finest
        state = _start_on(space, latest, t)
        state, recs = newton_on_grid(state, history, params, config, previous.transfers, step_index,
                                     len(previous.spaces) - 1)
        records.extend(recs)
        return state, _finish_records(records), previous

    space = coarse_space(config, test_case)
    state = _start_on(space, latest, t)
    hierarchy = GridHierarchy([space], [])
    state, recs = newton_on_grid(state, history, params, config, [], step_index, 0)
    records.extend(recs)
    _log_level(step_index, 0, state, recs)

    for level in range(1, config.levels):
        g, per_element = nonlinear_functional(state, history, params)
        if config.functional_tol > 0 and g <= config.functional_tol:
            logger.info(f"Functional {g:.3e} below tolerance after {level} grids")
            break
        marks = _marks(state, per_element, config, state.space.degree, latest)
        if not marks:
            break
        coarse = state.space
        state, _ = refine_and_transfer(state, None, marks, degree=config.fine_degree)
        state = State(state.space, impose_essential(state.space, state.coeffs), t)
        hierarchy.transfers.append(reduced_transfer(coarse, state.space))
        hierarchy.spaces.append(state.space)
        state, recs = newton_on_grid(state, history, params, config, hierarchy.transfers, step_index, level)
        records.extend(recs)
        _log_level(step_index, level, state, recs)

    return state, _finish_records(records), hierarchy


def _finish_records(records: List[NewtonRecord]) -> List[NewtonRecord]:
    """Express each record's solver work in work units of the step's finest grid."""
    finest_nnz = next((r.nnz for r in reversed(records) if r.nnz > 0), 0)
    for r in records:
        r.wu = r.work / finest_nnz if finest_nnz else 0.0
    return records


def _log_level(step: int, level: int, state: State, recs: Sequence[NewtonRecord]):
    last = recs[-1]
    logger.info(
        f"Step {step} level {level}: {len(state.space.leaves)} elements, {state.space.n_dofs} DOFs, "
        f"{last.newton} Newton steps, G = {last.g_after:.4e}"
    )


def summarize_step(
    step: int,
    state: State,
    records: Sequence[NewtonRecord],
    history: TimeHistory,
    params: Params,
    topology_level: Optional[float] = 0.0,
) -> StepSummary:
    g, _ = nonlinear_functional(state, history, params)
    finest = [r for r in records if r.nnz > 0]
    rhos = [r.conv_factor for r in records if r.cycles > 0]
    levels = sorted({r.level for r in records})
    newton_steps = sum(r.newton > 0 for r in records)
    summary = StepSummary(
        step=step,
        t=state.t,
        levels=len(levels),
        finest_elements=len(state.space.leaves),
        finest_dofs=state.space.n_dofs,
        finest_nnz=finest[-1].nnz if finest else 0,
        finest_functional=g,
        wu=float(sum(r.wu for r in records)),
        avg_conv_factor=float(np.mean(rhos)) if rhos else 0.0,
        newton_steps=int(newton_steps),
    )
    if topology_level is not None:
        topo = interface_topology(state, topology_level)
        summary.components = topo.components
        summary.area = topo.area
        summary.perimeter = topo.perimeter
        summary.extent_ratio = topo.extent_ratio
    return summary


# ----------------------------------------------------------------------
# Time loop
# ----------------------------------------------------------------------
def run_simulation(
    config: DriverConfig,
    test_case: TestCase,
    outputs: Optional[OutputSink] = None,
) -> RunLog:
    """
    Full time loop.

    Emits the initial snapshot, one energy record per time level, snapshots
    every snapshot_every steps and at the end, and the run log. On failure
    the partial log and energy series are flushed before re-raising.
    """
    outputs = NullOutputs() if outputs is None else outputs
    params = test_case.params
    runlog = RunLog()
    topology_level = None if test_case.name == "manufactured" else config.topology_level

    initial_space = finest_uniform_space(config, test_case)
    state = test_case.initial_state(initial_space)
    _, per_element = nonlinear_functional(state, TimeHistory.steady(state, config.dt), params)
    outputs.on_snapshot(0, state, per_element)
    energy = [energy_record(0, state, params)]
    logger.info(f"✓ Initial state for '{test_case.name}': E = {energy[0].E:.6e}")

    history_states = [state]
    hierarchy: Optional[GridHierarchy] = None
    try:
        for step in range(1, config.max_time_steps + 1):
            state, records, hierarchy = nested_iteration_timestep(
                history_states, params, config, test_case, step, hierarchy
            )
            runlog.extend(records)
            history = make_history(history_states, step, config.dt, params.scheme)
            summary = summarize_step(step, state, records, history, params, topology_level)
            runlog.add_step(summary)
            history_states = [state] + list(history_states[:1])
            energy.append(energy_record(step, state, params, history))
            logger.info(
                f"✓ Step {step} (t = {state.t:.4f}): {summary.finest_elements} elements, "
                f"{summary.wu:.1f} WU, E = {energy[-1].E:.6e}"
            )
            if step % config.snapshot_every == 0 or step == config.max_time_steps:
                _, per_element = nonlinear_functional(state, history, params)
                outputs.on_snapshot(step, state, per_element)
    except (NestedDriverError, SolverError) as e:
        logger.error(f"Run aborted: {e}")
        outputs.on_energy(energy_rate(energy, config.dt, params.scheme))
        outputs.on_log(runlog)
        outputs.close()
        raise

    outputs.on_energy(energy_rate(energy, config.dt, params.scheme))
    outputs.on_log(runlog)
    outputs.close()
    return runlog
