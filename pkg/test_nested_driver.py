"""
Tests for the nested-iteration driver: BDF bookkeeping, damped Newton,
grid hierarchies and the time loop
"""

from dataclasses import replace

import numpy as np
import pytest

import nested_driver
from fespace import build_space
from manufactured import manufactured_params
from mesh import build_uniform
from nested_driver import (
    DriverConfig,
    NestedDriverError,
    NewtonDivergenceError,
    NewtonRecord,
    NullOutputs,
    RunLog,
    StepSummary,
    bdf_coeffs,
    make_history,
    make_test_case,
    nested_iteration_timestep,
    newton_on_grid,
    run_simulation,
)
from twophase_system import N_UNKNOWNS, PHI, Params, State, TimeHistory, two_phase_bcs

LINEAR = Params(dt=0.1, lam=0.0, include_advection=False, include_cubic=False, include_transport=False)


def random_state(n=2, degree=2, seed=0):
    space = build_space(build_uniform(n, n), degree, N_UNKNOWNS, two_phase_bcs(None))
    rng = np.random.default_rng(seed)
    return State(space, 0.3 * rng.standard_normal((N_UNKNOWNS, space.n_nodes)))


def record(step, level, newton, elements=4, nnz=100, work=200.0):
    return NewtonRecord(step, level, newton, elements, 10, nnz, 1.0, 0.5, 0.5, 0.0, 3, 0.1, work, 0, "tolerance")


def summary(step, elements, wu):
    return StepSummary(step, 0.1 * step, 2, elements, 10, 100, 1e-3, wu, 0.1, 3)


def test_bdf_coeffs():
    """Test BDF coefficients in units of 1/dt, with BDF1 on the first step."""
    assert bdf_coeffs(1, 0.1, "BDF2") == pytest.approx((10.0, (-10.0,)))
    a0, weights = bdf_coeffs(2, 0.1, "BDF2")
    assert a0 == pytest.approx(15.0)
    assert weights == pytest.approx((-20.0, 5.0))
    assert bdf_coeffs(5, 0.1, "BDF1") == pytest.approx((10.0, (-10.0,)))


def test_bdf_coeffs_rejects_bad_arguments():
    """Test step index, step size and scheme are validated."""
    with pytest.raises(NestedDriverError):
        bdf_coeffs(0, 0.1)
    with pytest.raises(NestedDriverError):
        bdf_coeffs(1, 0.0)
    with pytest.raises(NestedDriverError):
        bdf_coeffs(1, 0.1, "BDF4")


def test_make_history_keeps_needed_states():
    """Test the first step uses only the newest state."""
    a, b = random_state(seed=1), random_state(seed=2)
    first = make_history([a, b], 1, 0.1, "BDF2")
    second = make_history([a, b], 2, 0.1, "BDF2")
    assert len(first.states) == 1 and first.states[0] is a
    assert len(second.states) == 2 and second.states[1] is b


def test_driver_config_validation():
    """Test out-of-range control parameters are rejected."""
    with pytest.raises(NestedDriverError):
        DriverConfig(newton_rel_tol=1.0)
    with pytest.raises(NestedDriverError):
        DriverConfig(refinement="random")
    with pytest.raises(NestedDriverError):
        DriverConfig(marker="max")
    with pytest.raises(NestedDriverError):
        DriverConfig(coarse_degree=2, fine_degree=1)
    with pytest.raises(NestedDriverError):
        DriverConfig(levels=0)
    with pytest.raises(NestedDriverError):
        DriverConfig(marker="interface", interface_band=1.0)
    assert DriverConfig(marker="interface").interface_band == pytest.approx(0.95)


def test_unknown_test_case():
    """Test make_test_case rejects unknown names."""
    with pytest.raises(NestedDriverError):
        make_test_case("dam_break", Params())


def test_runlog_tables_and_averages():
    """Test the level table, Newton steps per level and run averages."""
    runlog = RunLog()
    assert runlog.averages()["time_steps"] == 0
    assert runlog.level_table().empty
    runlog.extend([record(1, 0, 1), record(1, 0, 2), record(1, 1, 1, elements=16)])
    runlog.extend([record(2, 0, 1), record(2, 1, 1, elements=16), record(2, 1, 2, elements=16)])
    runlog.add_step(summary(1, 16, 2.0))
    runlog.add_step(summary(2, 16, 4.0))

    table = runlog.level_table()
    assert list(table.columns) == ["step", "level", "elements", "newton_steps"]
    assert len(table) == 4
    assert table.loc[(table.step == 1) & (table.level == 1), "elements"].item() == 16
    per_level = runlog.newton_per_level()
    assert per_level[0] == pytest.approx(1.5)
    assert per_level[1] == pytest.approx(1.5)

    averages = runlog.averages()
    assert averages["avg_wu"] == pytest.approx(3.0)
    assert averages["avg_elements"] == pytest.approx(16.0)
    assert averages["time_steps"] == 2
    assert len(runlog.to_frame()) == 6


def test_newton_on_linear_problem_stops_after_one_step():
    """Test one exact Newton step solves a linear least-squares problem."""
    state = random_state()
    history = TimeHistory.steady(random_state(seed=3), 0.1)
    config = DriverConfig(dt=0.1, solver_tol=1e-12, solver_gain_floor=0.0)
    new_state, records = newton_on_grid(state, history, LINEAR, config)
    assert len(records) == 1
    rec = records[0]
    assert rec.newton == 1
    assert rec.halvings == 0
    assert rec.g_after < rec.g_before
    assert rec.rel_diff < config.newton_rel_tol
    assert rec.g_lin == pytest.approx(rec.g_after, rel=1e-6)
    assert new_state.space is state.space


def test_newton_skips_converged_state():
    """Test a state below the functional floor takes no Newton step."""
    state = random_state()
    state.coeffs[:] = 0.0
    state.coeffs[PHI] = 1.0
    history = TimeHistory.steady(state.copy(), 0.1)
    config = DriverConfig(dt=0.1, functional_floor=1e-20)
    same, records = newton_on_grid(state, history, Params(dt=0.1), config)
    assert same is state
    assert records[0].newton == 0
    assert records[0].stopped_by == "functional floor"


def test_newton_divergence_reports_diagnostics(monkeypatch):
    """Test a functional that never decreases raises after max_halvings."""
    state = random_state()
    history = TimeHistory.steady(random_state(seed=3), 0.1)
    monkeypatch.setattr(nested_driver, "nonlinear_functional", lambda *args: (float("inf"), None))
    config = DriverConfig(dt=0.1, max_halvings=2)
    with pytest.raises(NewtonDivergenceError) as info:
        newton_on_grid(state, history, LINEAR, config, step=3, level=1)
    assert info.value.diagnostics["halvings"] == 2
    assert info.value.diagnostics["step"] == 3
    assert info.value.diagnostics["level"] == 1


@pytest.fixture(scope="module")
def manufactured_case():
    return make_test_case("manufactured", manufactured_params())


def test_nested_timestep_uniform(manufactured_case):
    """Test a uniform two-level step visits 2x2 then 4x4 grids."""
    config = DriverConfig(dt=0.1, levels=2)
    initial = manufactured_case.initial_state(nested_driver.finest_uniform_space(config, manufactured_case))
    state, records, hierarchy = nested_iteration_timestep(
        [initial], manufactured_case.params, config, manufactured_case, 1
    )
    assert [len(s.leaves) for s in hierarchy.spaces] == [4, 16]
    assert [s.degree for s in hierarchy.spaces] == [1, 2]
    assert len(hierarchy.transfers) == 1
    assert state.space is hierarchy.finest
    assert state.t == pytest.approx(0.1)
    assert {r.level for r in records} == {0, 1}
    finest_nnz = records[-1].nnz
    for r in records:
        assert r.wu == pytest.approx(r.work / finest_nnz)


def test_nested_timestep_adaptive(manufactured_case):
    """Test adaptive refinement grows the grid without exceeding uniform refinement."""
    config = DriverConfig(dt=0.1, levels=3, refinement="adaptive", marker="dorfler", dorfler_theta=0.5)
    initial = manufactured_case.initial_state(nested_driver.finest_uniform_space(config, manufactured_case))
    state, _, hierarchy = nested_iteration_timestep(
        [initial], manufactured_case.params, config, manufactured_case, 1
    )
    counts = [len(s.leaves) for s in hierarchy.spaces]
    assert counts[0] == 4
    assert all(b > a for a, b in zip(counts, counts[1:]))
    assert counts[-1] <= 64


def test_nested_timestep_interface_marker(manufactured_case):
    """Test interface marking refines everywhere when phi stays inside the band."""
    config = DriverConfig(dt=0.1, levels=2, refinement="adaptive", marker="interface")
    initial = manufactured_case.initial_state(nested_driver.finest_uniform_space(config, manufactured_case))
    _, _, hierarchy = nested_iteration_timestep(
        [initial], manufactured_case.params, config, manufactured_case, 1
    )
    assert [len(s.leaves) for s in hierarchy.spaces] == [4, 16]


def test_run_simulation_outputs(manufactured_case):
    """Test the time loop emits snapshots, energy records and the log."""
    config = DriverConfig(dt=0.1, levels=2, max_time_steps=2, snapshot_every=1)
    outputs = NullOutputs()
    runlog = run_simulation(config, manufactured_case, outputs)
    assert sorted(outputs.snapshots) == [0, 1, 2]
    assert [r.step for r in outputs.energy] == [0, 1, 2]
    assert np.isnan(outputs.energy[0].dEdt)
    assert outputs.runlog is runlog
    assert len(runlog.steps) == 2
    assert all(s.components == -1 for s in runlog.steps)
    assert set(runlog.level_table()["level"]) == {0, 1}
    assert outputs.snapshots[2].t == pytest.approx(0.2)


def test_run_simulation_zero_steps(manufactured_case):
    """Test zero time steps emit only the initial condition."""
    config = DriverConfig(dt=0.1, levels=2, max_time_steps=0)
    outputs = NullOutputs()
    runlog = run_simulation(config, manufactured_case, outputs)
    assert list(outputs.snapshots) == [0]
    assert len(outputs.energy) == 1
    assert runlog.steps == []


def test_warm_start_reuses_finest_grid(manufactured_case):
    """Test later steps solve only on the previous finest grid."""
    config = DriverConfig(dt=0.1, levels=2, max_time_steps=2, warm_start=True)
    runlog = run_simulation(config, manufactured_case)
    frame = runlog.to_frame()
    assert set(frame.loc[frame.step == 1, "level"]) == {0, 1}
    assert set(frame.loc[frame.step == 2, "level"]) == {1}


def test_failed_run_flushes_partial_log(manufactured_case, monkeypatch):
    """Test a failing step still hands the partial log and energy series to the sink."""
    calls = {"n": 0}
    original = nested_driver.nested_iteration_timestep

    def fail_on_second(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NewtonDivergenceError("forced", {"step": 2})
        return original(*args, **kwargs)

    monkeypatch.setattr(nested_driver, "nested_iteration_timestep", fail_on_second)
    outputs = NullOutputs()
    config = replace(DriverConfig(dt=0.1, levels=2), max_time_steps=3)
    with pytest.raises(NewtonDivergenceError):
        run_simulation(config, manufactured_case, outputs)
    assert len(outputs.runlog.steps) == 1
    assert len(outputs.energy) == 2


@pytest.mark.slow
def test_coalescence_newton_trend_and_multigrid():
    """Test Newton steps do not grow toward finer levels and multigrid reduces by 0.25 per cycle on 64x64."""
    from cli_io import preset_config

    config = replace(preset_config("coalescence"), levels=6, max_time_steps=4).validate()
    runlog = run_simulation(config.driver_config(), config.test_case_spec())

    per_level = runlog.newton_per_level()
    assert list(per_level.index) == list(range(6))
    assert all(per_level.iloc[k + 1] <= per_level.iloc[k] + 1.0 for k in range(5))

    table = runlog.level_table()
    finest = table[(table["level"] == 5) & (table["step"] > 1)]
    assert len(finest) == 3
    assert (finest["newton_steps"] <= 2).mean() >= 0.9

    assert runlog.averages()["avg_conv_factor"] <= 0.25
    assert runlog.steps[-1].finest_elements == 64 * 64
