"""
Tests for configuration files, snapshots, the energy series, reports and
the command-line entry point
"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import app
from cli_io import (
    PRESETS,
    ConfigError,
    RunOutputs,
    SnapshotIOError,
    compare_runs,
    format_report,
    load_config,
    load_energy_series,
    load_snapshot,
    parse_config_text,
    preset_config,
    write_config,
    write_energy_series,
    write_report,
    write_snapshot,
)
from energy import EnergyRecord, energy_rate
from fespace import build_space
from mesh import build_uniform, refine
from nested_driver import NewtonDivergenceError, NewtonRecord, RunLog, StepSummary
from twophase_system import N_UNKNOWNS, State, two_phase_bcs


def adaptive_state(degree=2, t=0.37):
    mesh = refine(refine(build_uniform(2, 3), [0]), [6])
    space = build_space(mesh, degree, N_UNKNOWNS, two_phase_bcs(None))
    rng = np.random.default_rng(11)
    return State(space, rng.standard_normal((N_UNKNOWNS, space.n_nodes)) * np.pi, t)


def leaf_keys(mesh):
    return {(int(mesh.level[e]), int(mesh.ix[e]), int(mesh.iy[e])): int(e) for e in mesh.leaves}


def small_runlog():
    runlog = RunLog()
    for step in (1, 2):
        runlog.extend([
            NewtonRecord(step, 0, 1, 4, 20, 300, 1.0, 0.1, 0.1, 0.0, 3, 0.1, 900.0, 0, "tolerance", 0.5),
            NewtonRecord(step, 1, 1, 16, 200, 3000, 0.1, 0.01, 0.01, 0.0, 4, 0.12, 12000.0, 0, "tolerance", 4.0),
        ])
        runlog.add_step(StepSummary(step, 0.1 * step, 2, 16, 200, 3000, 0.01, 4.5, 0.11, 2))
    return runlog


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
def test_presets():
    """Test the built-in parameter sets."""
    coalescence = preset_config("coalescence")
    assert (coalescence.mu, coalescence.lam, coalescence.gamma, coalescence.eps) == (1.0, 1e-4, 0.01, 0.01)
    assert coalescence.topology_level == 0.5
    square = preset_config("square")
    assert (square.mu, square.lam, square.gamma, square.eps) == (0.1, 0.1, 0.01, 0.02)
    assert preset_config("manufactured").scheme == "BDF1"
    assert set(PRESETS) == {"coalescence", "square", "manufactured"}
    with pytest.raises(ConfigError):
        preset_config("dam_break")


def test_parse_config_text():
    """Test values are converted by key type; comments and blank lines are skipped."""
    text = "\n".join([
        "# a comment",
        "",
        "mu = 2.5",
        "scheme = BDF1",
        "include_advection = false",
        "levels = 3  # trailing comment",
        "ls_weights = " + ",".join(["2"] * 13),
    ])
    values = parse_config_text(text)
    assert values == {
        "mu": 2.5,
        "scheme": "BDF1",
        "include_advection": False,
        "levels": 3,
        "ls_weights": (2.0,) * 13,
    }


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("mu = 1\nviscosity = 2", "line 2: unknown key 'viscosity'"),
        ("levels = three", "line 1: bad value for key 'levels'"),
        ("mu = 1\nmu = 2", "line 2: key 'mu' repeats line 1"),
        ("mu", "line 1: key 'mu' has no value"),
        ("scheme = BDF3", "key 'scheme'"),
        ("warm_start = maybe", "key 'warm_start'"),
    ],
)
def test_parse_errors_name_line_and_key(text, fragment):
    """Test parse errors point at the offending line and key."""
    with pytest.raises(ConfigError) as info:
        parse_config_text(text, "run.cfg")
    assert fragment in str(info.value)
    assert "run.cfg" in str(info.value)


def test_load_config_precedence(tmp_path):
    """Test defaults < preset < file < overrides."""
    path = tmp_path / "run.cfg"
    path.write_text("test_case = square\nmu = 0.5\nlevels = 3\n", encoding="utf-8")
    config = load_config(path, overrides={"levels": 2, "refinement": None})
    assert config.test_case == "square"
    assert config.lam == 0.1
    assert config.mu == 0.5
    assert config.levels == 2
    assert config.refinement == "uniform"
    assert config.coarse_nx == 2


def test_load_config_errors(tmp_path):
    """Test missing files, range violations and unknown overrides."""
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("mu = -1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mu must be positive"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(overrides={"colour": "red"})
    with pytest.raises(ConfigError):
        load_config(preset="nope")


def test_config_round_trip(tmp_path):
    """Test a written configuration reloads to the same values."""
    config = replace(
        preset_config("manufactured"),
        ls_weights=tuple(0.1 * (k + 1) for k in range(13)),
        dt=1.0 / 3.0,
        refinement="adaptive",
        warm_start=True,
        output_dir=str(tmp_path / "out"),
    )
    path = write_config(config, tmp_path / "config.txt")
    assert load_config(path) == config


def test_driver_config_and_params_from_run_config():
    """Test the flat configuration splits into parameters and driver settings."""
    config = preset_config("square")
    params = config.params()
    driver = config.driver_config()
    assert params.mu == 0.1 and params.eps == 0.02
    assert driver.levels == config.levels
    assert driver.dt == params.dt


# ----------------------------------------------------------------------
# Snapshots
# ----------------------------------------------------------------------
@pytest.mark.parametrize("fmt", ["vtk", "csv"])
@pytest.mark.parametrize("degree", [1, 2])
def test_snapshot_reloads_exactly(tmp_path, fmt, degree):
    """Test mesh, values, time and local functionals survive a write and reload bit for bit."""
    state = adaptive_state(degree)
    rng = np.random.default_rng(2)
    per_element = pd.Series(rng.random(len(state.space.leaves)) / 3.0, index=state.space.leaves)
    path = write_snapshot(state, tmp_path / f"snap.{fmt}", step=7, per_element=per_element)

    snap = load_snapshot(path)
    loaded = snap.state
    assert snap.step == 7
    assert loaded.t == state.t
    assert loaded.space.degree == degree
    assert np.array_equal(loaded.space.node_keys, state.space.node_keys)
    assert np.array_equal(loaded.coeffs, state.coeffs)

    original = leaf_keys(state.space.mesh)
    reloaded = leaf_keys(loaded.space.mesh)
    assert set(original) == set(reloaded)
    for key, e in original.items():
        assert snap.per_element[reloaded[key]] == per_element[e]


def test_snapshot_without_functional(tmp_path):
    """Test a snapshot written without local functionals reloads with none."""
    state = adaptive_state(1)
    snap = load_snapshot(write_snapshot(state, tmp_path / "snap.vtk"))
    assert snap.per_element is None
    assert snap.step == 0


def test_vtk_layout(tmp_path):
    """Test the legacy VTK file declares biquadratic cells and all unknowns."""
    state = adaptive_state(2)
    text = write_snapshot(state, tmp_path / "snap.vtk").read_text(encoding="utf-8")
    lines = text.splitlines()
    assert lines[0].startswith("# vtk DataFile")
    assert "DATASET UNSTRUCTURED_GRID" in lines
    assert f"CELL_TYPES {len(state.space.leaves)}" in lines
    assert "28" in lines
    for name in ("u1", "phi", "B2", "level", "functional"):
        assert any(line.startswith(f"SCALARS {name} ") for line in lines)
    assert "VECTORS velocity double" in lines


def test_snapshot_errors(tmp_path):
    """Test unknown formats and foreign files are rejected."""
    state = adaptive_state(1)
    with pytest.raises(SnapshotIOError):
        write_snapshot(state, tmp_path / "snap.txt")
    foreign = tmp_path / "other.vtk"
    foreign.write_text("# vtk DataFile Version 3.0\nsomething else\n", encoding="utf-8")
    with pytest.raises(SnapshotIOError):
        load_snapshot(foreign)
    with pytest.raises(SnapshotIOError):
        load_snapshot(tmp_path / "absent.csv")


# ----------------------------------------------------------------------
# Series, report, comparison
# ----------------------------------------------------------------------
def test_energy_series_round_trip(tmp_path):
    """Test the energy series is written with one row per time level."""
    records = energy_rate([EnergyRecord(n, 0.1 * n, 1.0 / (n + 1), 0.5) for n in range(3)], 0.1)
    frame = load_energy_series(write_energy_series(records, tmp_path / "energy.csv"))
    assert list(frame.columns) == ["step", "t", "E", "D", "dEdt", "mismatch"]
    assert len(frame) == 3
    assert np.isnan(frame.loc[0, "dEdt"])
    assert frame.loc[2, "E"] == 1.0 / 3.0


def test_report_sections(tmp_path):
    """Test the report lists grid levels, work and run averages."""
    runlog = small_runlog()
    energy = energy_rate([EnergyRecord(n, 0.1 * n, 1.0 - 0.05 * n, 0.5) for n in range(3)], 0.1)
    text = write_report(runlog, tmp_path / "report.txt", "Test run", energy).read_text(encoding="utf-8")
    for heading in ("Grid levels per time step", "Work per time step", "Run averages",
                    "Average Newton steps per grid level", "Energy law"):
        assert heading in text
    for column in ("Avg WU", "Avg Nonzeros", "Avg Functional", "Avg Elements", "Avg Conv Factor"):
        assert column in text
    assert len(runlog.level_table()) == 4


def test_report_without_steps():
    """Test an empty run still formats."""
    text = format_report(RunLog())
    assert "(no time steps)" in text
    assert "Energy law" not in text


def test_compare_runs():
    """Test element and work ratios relative to the reference run."""
    uniform = small_runlog()
    adaptive = RunLog()
    adaptive.add_step(StepSummary(1, 0.1, 3, 8, 100, 1500, 0.01, 2.25, 0.1, 3))
    table = compare_runs({"uniform": uniform, "adaptive": adaptive})
    assert table.loc["uniform", "element_ratio"] == pytest.approx(1.0)
    assert table.loc["adaptive", "element_ratio"] == pytest.approx(0.5)
    assert table.loc["adaptive", "wu_ratio"] == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        compare_runs({})
    with pytest.raises(ConfigError):
        compare_runs({"uniform": uniform}, reference="other")


# ----------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------
def test_cli_usage_errors(tmp_path):
    """Test help exits 0 and bad arguments or configurations exit 1."""
    assert app.main(["--help"]) == 0
    assert app.main(["run", "--preset", "nope"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("levels = 0\n", encoding="utf-8")
    assert app.main(["run", str(bad)]) == 1


def test_cli_nonconvergence_exit_code(tmp_path, monkeypatch):
    """Test Newton nonconvergence exits with code 2."""

    def diverge(*args, **kwargs):
        raise NewtonDivergenceError("forced")

    monkeypatch.setattr(app, "run_simulation", diverge)
    assert app.main(["run", "--preset", "manufactured", "--out", str(tmp_path)]) == 2


def test_cli_run_writes_outputs(tmp_path):
    """Test a short run writes config, snapshots, energy series, log and report."""
    out = tmp_path / "run"
    code = app.main(["run", "--preset", "manufactured", "--out", str(out), "--steps", "1", "--levels", "2"])
    assert code == 0
    for name in ("config.txt", "snapshot_00000.vtk", "snapshot_00001.vtk", "energy.csv",
                 "newton_log.csv", "newton_log_steps.csv", "report.txt"):
        assert (out / name).exists()
    assert len(load_energy_series(out / "energy.csv")) == 2
    config = load_config(out / "config.txt")
    assert config.max_time_steps == 1
    assert config.levels == 2


def test_run_outputs_rejects_unknown_format(tmp_path):
    """Test the output sink validates its snapshot format."""
    with pytest.raises(ConfigError):
        RunOutputs(tmp_path, "hdf5")
