"""
Configuration and Output Module

Flat `key = value` run configuration with built-in presets, full-precision
field snapshots (legacy ASCII VTK or CSV) that reload exactly, the energy
time series, the Newton/work log and the plain-text run report.
"""

import io
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv.parser import parse_stream

from energy import STARTUP_STEPS, EnergyRecord, energy_law_report, records_to_frame
from fespace import BCSpec, build_space
from mesh import LATTICE_SIZE, Domain, Mesh, build_uniform, refine
from nested_driver import DriverConfig, NestedDriverError, RunLog, TestCase, make_test_case
from twophase_system import N_EQUATIONS, N_UNKNOWNS, UNKNOWN_NAMES, Params, State, TwoPhaseSystemError, two_phase_bcs

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TEST_CASES = ("coalescence", "square", "manufactured")
SNAPSHOT_FORMATS = ("vtk", "csv")
FLOAT_FORMAT = "%.17g"
SNAPSHOT_TAG = "foslsflow snapshot"

# VTK cell types and the corner-first node order they expect, as local indices b*(p+1)+a
VTK_CELLS = {
    1: (9, (0, 1, 3, 2)),
    2: (28, (0, 2, 8, 6, 1, 5, 7, 3, 4)),
}


class ConfigError(Exception):
    """Custom exception for configuration parsing and validation errors."""
    pass


class SnapshotIOError(Exception):
    """Custom exception for snapshot and report I/O errors."""
    pass


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
@dataclass
class RunConfig:
    """Everything needed to reproduce a run."""

    test_case: str = "coalescence"
    # physical and discretization parameters
    mu: float = 1.0
    lam: float = 1e-4
    gamma: float = 0.01
    eps: float = 0.01
    eta: float = 0.01
    dt: float = 0.01
    scheme: str = "BDF2"
    include_advection: bool = True
    ls_weights: Tuple[float, ...] = (1.0,) * N_EQUATIONS
    # nested iteration and solver
    max_time_steps: int = 100
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
    interface_band: float = 0.95
    work_exponent: float = 1.0
    coarse_nx: int = 2
    coarse_ny: int = 2
    coarse_degree: int = 1
    fine_degree: int = 2
    max_halvings: int = 5
    topology_level: float = 0.0
    warm_start: bool = False
    quadrature_extra: int = 1
    # output
    output_dir: str = "output"
    snapshot_every: int = 10
    snapshot_format: str = "vtk"
    energy_tol: float = 0.15

    def __post_init__(self):
        self.ls_weights = tuple(float(w) for w in self.ls_weights)

    def validate(self) -> "RunConfig":
        """
        Range-check every value.

        Raises:
            ConfigError: Naming the violated constraint
        """
        if self.test_case not in TEST_CASES:
            raise ConfigError(f"test_case must be one of {TEST_CASES}, got {self.test_case!r}")
        if self.snapshot_format not in SNAPSHOT_FORMATS:
            raise ConfigError(f"snapshot_format must be one of {SNAPSHOT_FORMATS}, got {self.snapshot_format!r}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if not self.energy_tol > 0:
            raise ConfigError(f"energy_tol must be positive, got {self.energy_tol}")
        if not self.output_dir:
            raise ConfigError("output_dir must not be empty")
        try:
            self.params()
            self.driver_config()
        except (TwoPhaseSystemError, NestedDriverError) as e:
            raise ConfigError(str(e)) from e
        return self

    def params(self) -> Params:
        return Params(
            mu=self.mu,
            lam=self.lam,
            gamma=self.gamma,
            eps=self.eps,
            dt=self.dt,
            scheme=self.scheme,
            include_advection=self.include_advection,
            ls_weights=self.ls_weights,
        )

    def driver_config(self) -> DriverConfig:
        names = {f.name for f in fields(DriverConfig)}
        return DriverConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def test_case_spec(self) -> TestCase:
        return make_test_case(self.test_case, self.params(), self.eta)


@dataclass(frozen=True)
class ConfigKey:
    kind: str
    description: str
    choices: Tuple[str, ...] = ()


CONFIG_SCHEMA: Dict[str, ConfigKey] = {
    "test_case": ConfigKey("str", "Initial/boundary data: coalescence, square or manufactured", TEST_CASES),
    "mu": ConfigKey("float", "Viscosity"),
    "lam": ConfigKey("float", "Mixing energy density lambda (>= 0)"),
    "gamma": ConfigKey("float", "Mobility"),
    "eps": ConfigKey("float", "Interface width parameter"),
    "eta": ConfigKey("float", "Width of the tanh profile of the coalescence initial condition"),
    "dt": ConfigKey("float", "Time step"),
    "scheme": ConfigKey("str", "Time integrator", ("BDF1", "BDF2")),
    "include_advection": ConfigKey("bool", "Keep the convective term (false gives Stokes flow)"),
    "ls_weights": ConfigKey("floats", f"Comma-separated positive weights of the {N_EQUATIONS} equations"),
    "max_time_steps": ConfigKey("int", "Number of time steps (0 writes the initial condition only)"),
    "max_newton": ConfigKey("int", "Newton steps per grid"),
    "newton_rel_tol": ConfigKey("float", "Stop Newton when linearized and nonlinear functionals agree to this"),
    "functional_floor": ConfigKey("float", "Functional value treated as converged"),
    "solver_tol": ConfigKey("float", "Relative residual target of preconditioned CG"),
    "solver_gain_floor": ConfigKey("float", "Stop CG when a cycle reduces the linearized functional by less than this fraction"),
    "max_cycles": ConfigKey("int", "CG iteration cap"),
    "levels": ConfigKey("int", "Grids visited per time step"),
    "functional_tol": ConfigKey("float", "Stop refining once the functional drops below this (0 disables)"),
    "refinement": ConfigKey("str", "Grid sequence", ("uniform", "adaptive")),
    "marker": ConfigKey("str", "Adaptive marking strategy", ("ace", "dorfler", "interface")),
    "dorfler_theta": ConfigKey("float", "Functional fraction captured by Dorfler marking"),
    "interface_band": ConfigKey("float", "Elements with nodal |phi| below this are refined by interface marking"),
    "work_exponent": ConfigKey("float", "Exponent of the work model of efficiency-based marking"),
    "coarse_nx": ConfigKey("int", "Coarsest grid elements in x"),
    "coarse_ny": ConfigKey("int", "Coarsest grid elements in y"),
    "coarse_degree": ConfigKey("int", "Polynomial degree on the coarsest grid"),
    "fine_degree": ConfigKey("int", "Polynomial degree on refined grids"),
    "max_halvings": ConfigKey("int", "Newton step halvings before giving up"),
    "topology_level": ConfigKey("float", "Phase threshold of the bubble-count diagnostic"),
    "warm_start": ConfigKey("bool", "Reuse the previous time step's finest grid"),
    "quadrature_extra": ConfigKey("int", "Extra Gauss points per direction beyond degree + 1"),
    "output_dir": ConfigKey("str", "Directory for snapshots, series and report"),
    "snapshot_every": ConfigKey("int", "Write a snapshot every this many steps"),
    "snapshot_format": ConfigKey("str", "Snapshot format", SNAPSHOT_FORMATS),
    "energy_tol": ConfigKey("float", "Allowed relative energy-law mismatch in verification"),
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "coalescence": dict(
        test_case="coalescence", mu=1.0, lam=1e-4, gamma=0.01, eps=0.01, eta=0.01,
        dt=0.01, max_time_steps=100, topology_level=0.5,
    ),
    "square": dict(
        test_case="square", mu=0.1, lam=0.1, gamma=0.01, eps=0.02,
        dt=0.01, max_time_steps=100,
    ),
    "manufactured": dict(
        test_case="manufactured", mu=1.0, lam=0.1, gamma=1.0, eps=0.5,
        dt=0.1, scheme="BDF1", max_time_steps=2, levels=3,
    ),
}

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _convert(key: str, text: str) -> Any:
    spec = CONFIG_SCHEMA[key]
    text = text.strip()
    if spec.kind == "float":
        return float(text)
    if spec.kind == "int":
        return int(text)
    if spec.kind == "bool":
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"expected true or false, got {text!r}")
    if spec.kind == "floats":
        return tuple(float(v) for v in text.split(","))
    if spec.choices and text not in spec.choices:
        raise ValueError(f"expected one of {spec.choices}, got {text!r}")
    return text


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def preset_config(name: str) -> RunConfig:
    """Built-in configuration of a named test case."""
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; expected one of {tuple(PRESETS)}")
    return RunConfig(**PRESETS[name]).validate()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse `key = value` statements into converted values.

    Raises:
        ConfigError: Naming the line and key of any bad statement
    """
    values: Dict[str, Any] = {}
    seen: Dict[str, int] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            raise ConfigError(f"{source}, line {line}: cannot parse {binding.original.string.strip()!r}")
        key = binding.key
        if key is None:
            continue
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}, line {line}: unknown key {key!r}")
        if binding.value is None:
            raise ConfigError(f"{source}, line {line}: key {key!r} has no value")
        if key in seen:
            raise ConfigError(f"{source}, line {line}: key {key!r} repeats line {seen[key]}")
        try:
            values[key] = _convert(key, binding.value)
        except ValueError as e:
            raise ConfigError(f"{source}, line {line}: bad value for key {key!r}: {e}") from e
        seen[key] = line
    return values


def load_config(
    path: Optional[PathLike] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Resolve a run configuration: defaults, then preset, then file, then overrides.

    When no preset is given, the preset of the file's test_case is used.

    Args:
        path: Config file (optional)
        preset: Preset name
        overrides: Values taking precedence over everything else (CLI flags)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On unreadable files, parse errors and range violations
    """
    file_values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            logger.error(f"Cannot read config {path}: {e}")
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        file_values = parse_config_text(text, str(path))

    name = preset or file_values.get("test_case")
    values: Dict[str, Any] = {}
    if name is not None:
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset {name!r}; expected one of {tuple(PRESETS)}")
        values.update(PRESETS[name])
    values.update(file_values)
    for key, value in (overrides or {}).items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"Unknown override key {key!r}")
        if value is not None:
            values[key] = value
    config = RunConfig(**values).validate()
    logger.info(f"✓ Configuration loaded: test case '{config.test_case}', {config.max_time_steps} steps")
    return config


def write_config(config: RunConfig, path: PathLike) -> Path:
    """Write every key in schema order; load_config(write_config(c)) == c."""
    path = Path(path)
    values = asdict(config)
    lines = ["# foslsflow run configuration"]
    for key, spec in CONFIG_SCHEMA.items():
        lines.append(f"# {spec.description}")
        lines.append(f"{key} = {_format(values[key])}")
    with _partial_file_guard(path):
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------
# Snapshots
# ----------------------------------------------------------------------
@dataclass
class Snapshot:
    """A state reloaded from disk with its step and local functional values."""

    state: State
    step: int
    per_element: Optional[pd.Series] = None


@contextmanager
def _partial_file_guard(*paths: Path) -> Iterator[None]:
    for p in paths:
        p.parent.mkdir(parents=True, exist_ok=True)
    try:
        yield
    except Exception as e:
        for p in paths:
            if p.exists():
                p.unlink()
        logger.error(f"Write failed, removed partial output {', '.join(str(p) for p in paths)}: {e}")
        raise SnapshotIOError(f"Failed writing {paths[0]}: {e}") from e


def _header(state: State, step: int) -> str:
    space = state.space
    mesh = space.mesh
    d = mesh.domain
    items = {
        "step": step,
        "t": repr(float(state.t)),
        "degree": space.degree,
        "nx": mesh.nx,
        "ny": mesh.ny,
        "domain": ",".join(repr(float(v)) for v in (d.xmin, d.xmax, d.ymin, d.ymax)),
        "quadrature_extra": space.quadrature_extra,
        "nodes": space.n_nodes,
        "cells": len(space.leaves),
    }
    return SNAPSHOT_TAG + " " + " ".join(f"{k}={v}" for k, v in items.items())


def _parse_header(line: str) -> Dict[str, str]:
    line = line.lstrip("#").strip()
    if not line.startswith(SNAPSHOT_TAG):
        raise SnapshotIOError(f"Not a snapshot header: {line[:60]!r}")
    pairs = line[len(SNAPSHOT_TAG):].split()
    return dict(p.split("=", 1) for p in pairs)


def _cell_frame(state: State, per_element: Optional[pd.Series]) -> pd.DataFrame:
    space = state.space
    mesh = space.mesh
    leaves = space.leaves
    functional = np.full(len(leaves), np.nan)
    if per_element is not None:
        functional = per_element.reindex(leaves).to_numpy(dtype=float)
    return pd.DataFrame({
        "level": mesh.level[leaves],
        "ix": mesh.ix[leaves],
        "iy": mesh.iy[leaves],
        "functional": functional,
    })


def _node_frame(state: State) -> pd.DataFrame:
    space = state.space
    frame = pd.DataFrame({
        "kx": space.node_keys[:, 0],
        "ky": space.node_keys[:, 1],
        "x": space.node_coords[:, 0],
        "y": space.node_coords[:, 1],
    })
    for c, name in enumerate(UNKNOWN_NAMES):
        frame[name] = state.coeffs[c]
    return frame


def _scalar_block(name: str, kind: str, values) -> List[str]:
    fmt = (lambda v: str(int(v))) if kind == "long" else (lambda v: FLOAT_FORMAT % v)
    return [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"] + [fmt(v) for v in values]


def _write_vtk(path: Path, state: State, step: int, per_element: Optional[pd.Series]):
    space = state.space
    cell_type, order = VTK_CELLS[space.degree]
    cells = _cell_frame(state, per_element)
    nodes = _node_frame(state)
    n, m = space.n_nodes, len(space.leaves)

    lines = ["# vtk DataFile Version 3.0", _header(state, step), "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {n} double")
    lines.extend(f"{FLOAT_FORMAT % x} {FLOAT_FORMAT % y} 0" for x, y in space.node_coords)
    conn = space.elem_nodes[:, list(order)]
    lines.append(f"CELLS {m} {m * (len(order) + 1)}")
    lines.extend(f"{len(order)} " + " ".join(str(i) for i in row) for row in conn)
    lines.append(f"CELL_TYPES {m}")
    lines.extend([str(cell_type)] * m)

    lines.append(f"CELL_DATA {m}")
    for name in ("level", "ix", "iy"):
        lines.extend(_scalar_block(name, "long", cells[name]))
    lines.extend(_scalar_block("functional", "double", cells["functional"]))

    lines.append(f"POINT_DATA {n}")
    for name in ("kx", "ky"):
        lines.extend(_scalar_block(name, "long", nodes[name]))
    for name in UNKNOWN_NAMES:
        lines.extend(_scalar_block(name, "double", nodes[name]))
    for label, (a, b) in (("velocity", ("u1", "u2")), ("grad_phi", ("B1", "B2"))):
        lines.append(f"VECTORS {label} double")
        lines.extend(f"{FLOAT_FORMAT % u} {FLOAT_FORMAT % v} 0" for u, v in zip(nodes[a], nodes[b]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_vtk(path: Path) -> Tuple[Dict[str, str], pd.DataFrame, pd.DataFrame]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("# vtk"):
        raise SnapshotIOError(f"{path} is not a legacy VTK file")
    header = _parse_header(lines[1])
    cell_data: Dict[str, np.ndarray] = {}
    point_data: Dict[str, np.ndarray] = {}
    target = None
    i = 2
    while i < len(lines):
        tokens = lines[i].split()
        if not tokens:
            i += 1
            continue
        if tokens[0] == "CELL_DATA":
            target = cell_data
        elif tokens[0] == "POINT_DATA":
            target = point_data
        elif tokens[0] == "SCALARS" and target is not None:
            count = int(header["cells"] if target is cell_data else header["nodes"])
            raw = lines[i + 2 : i + 2 + count]
            dtype = np.int64 if tokens[2] == "long" else float
            target[tokens[1]] = np.array([float(v) if dtype is float else int(v) for v in raw], dtype=dtype)
            i += 2 + count
            continue
        i += 1
    try:
        cells = pd.DataFrame({k: cell_data[k] for k in ("level", "ix", "iy", "functional")})
        nodes = pd.DataFrame({k: point_data[k] for k in ("kx", "ky") + UNKNOWN_NAMES})
    except KeyError as e:
        raise SnapshotIOError(f"{path} lacks the data array {e}") from e
    return header, cells, nodes


def _cells_path(path: Path) -> Path:
    return path.with_name(path.stem + "_cells.csv")


def _write_csv(path: Path, state: State, step: int, per_element: Optional[pd.Series]):
    header = "# " + _header(state, step) + "\n"
    for target, frame in ((path, _node_frame(state)), (_cells_path(path), _cell_frame(state, per_element))):
        with open(target, "w", encoding="utf-8", newline="") as f:
            f.write(header)
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)


def _read_csv(path: Path) -> Tuple[Dict[str, str], pd.DataFrame, pd.DataFrame]:
    with open(path, encoding="utf-8") as f:
        header = _parse_header(f.readline())
    nodes = pd.read_csv(path, comment="#", float_precision="round_trip")
    cells = pd.read_csv(_cells_path(path), comment="#", float_precision="round_trip")
    return header, cells, nodes


def write_snapshot(
    state: State,
    path: PathLike,
    step: int = 0,
    per_element: Optional[pd.Series] = None,
    fmt: Optional[str] = None,
) -> Path:
    """
    Write the state's mesh, nodal values of all unknowns and local
    functional values at full precision.

    Args:
        state: State to write
        path: Target file (.vtk or .csv; CSV adds a <stem>_cells.csv file)
        step: Time step index
        per_element: Local functional values indexed by leaf id
        fmt: "vtk" or "csv" (default: from the file suffix)

    Raises:
        SnapshotIOError: On I/O failure (partial files are removed)
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in SNAPSHOT_FORMATS:
        raise SnapshotIOError(f"Unknown snapshot format {fmt!r}; expected one of {SNAPSHOT_FORMATS}")
    if fmt == "vtk":
        with _partial_file_guard(path):
            _write_vtk(path, state, step, per_element)
    else:
        with _partial_file_guard(path, _cells_path(path)):
            _write_csv(path, state, step, per_element)
    logger.debug(f"Snapshot of step {step} written to {path}")
    return path


def mesh_from_leaves(domain: Domain, nx: int, ny: int, leaves: pd.DataFrame) -> Mesh:
    """
    Rebuild a quadtree from its leaf cells (level, ix, iy) by refining every
    proper ancestor, coarsest first.
    """
    wanted = set()
    target = set()
    for level, ix, iy in leaves[["level", "ix", "iy"]].itertuples(index=False):
        level, ix, iy = int(level), int(ix), int(iy)
        target.add((level, ix, iy))
        for k in range(level):
            s = LATTICE_SIZE >> k
            wanted.add((k, ix - ix % s, iy - iy % s))
    mesh = build_uniform(nx, ny, domain)
    while True:
        marks = [e for e in mesh.leaves if (int(mesh.level[e]), int(mesh.ix[e]), int(mesh.iy[e])) in wanted]
        if not marks:
            break
        mesh = refine(mesh, marks)
    got = {(int(mesh.level[e]), int(mesh.ix[e]), int(mesh.iy[e])) for e in mesh.leaves}
    if got != target:
        raise SnapshotIOError("Stored leaves do not form a 1-irregular quadtree")
    return mesh


def load_snapshot(path: PathLike, bcs: Optional[BCSpec] = None) -> Snapshot:
    """
    Rebuild Mesh, Space and State from a snapshot, bit-exactly.

    Args:
        path: Snapshot file
        bcs: Boundary conditions of the rebuilt space (two-phase defaults)

    Raises:
        SnapshotIOError: If the file is unreadable or inconsistent
    """
    path = Path(path)
    try:
        if path.suffix.lower() == ".vtk":
            header, cells, nodes = _read_vtk(path)
        else:
            header, cells, nodes = _read_csv(path)
    except (OSError, ValueError, pd.errors.ParserError) as e:
        logger.error(f"Cannot read snapshot {path}: {e}")
        raise SnapshotIOError(f"Cannot read snapshot {path}: {e}") from e

    try:
        xmin, xmax, ymin, ymax = (float(v) for v in header["domain"].split(","))
        domain = Domain(xmin, xmax, ymin, ymax)
        mesh = mesh_from_leaves(domain, int(header["nx"]), int(header["ny"]), cells)
        space = build_space(
            mesh,
            int(header["degree"]),
            N_UNKNOWNS,
            two_phase_bcs(None) if bcs is None else bcs,
            int(header["quadrature_extra"]),
        )
    except KeyError as e:
        raise SnapshotIOError(f"Snapshot header lacks {e}") from e

    keys = nodes[["kx", "ky"]].to_numpy(dtype=np.int64)
    if keys.shape != space.node_keys.shape or not np.array_equal(keys, space.node_keys):
        raise SnapshotIOError("Stored node keys do not match the rebuilt space")
    coeffs = nodes[list(UNKNOWN_NAMES)].to_numpy(dtype=float).T
    state = State(space, coeffs, float(header["t"]))

    lookup = {(int(mesh.level[e]), int(mesh.ix[e]), int(mesh.iy[e])): int(e) for e in mesh.leaves}
    ids = [lookup[(int(l), int(x), int(y))] for l, x, y in cells[["level", "ix", "iy"]].itertuples(index=False)]
    functional = pd.Series(cells["functional"].to_numpy(dtype=float), index=ids, name="functional")
    per_element = None if functional.isna().all() else functional.sort_index()
    logger.info(f"✓ Loaded snapshot {path.name}: {len(mesh.leaves)} elements, t = {state.t}")
    return Snapshot(state=state, step=int(header["step"]), per_element=per_element)


# ----------------------------------------------------------------------
# Series, log and report
# ----------------------------------------------------------------------
def write_energy_series(records: Sequence[EnergyRecord], path: PathLike) -> Path:
    """Energy series as CSV: step, t, E, D, dEdt, mismatch."""
    path = Path(path)
    with _partial_file_guard(path):
        records_to_frame(records).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def load_energy_series(path: PathLike) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise SnapshotIOError(f"Cannot read energy series {path}: {e}") from e


def write_runlog_csv(runlog: RunLog, path: PathLike) -> Path:
    """Newton records as CSV; per-step summaries go to <stem>_steps.csv."""
    path = Path(path)
    steps_path = path.with_name(path.stem + "_steps.csv")
    with _partial_file_guard(path, steps_path):
        runlog.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
        runlog.steps_frame().to_csv(steps_path, index=False, float_format=FLOAT_FORMAT)
    return path


def _section(title: str, body: str) -> List[str]:
    return [title, "-" * len(title), body, ""]


def format_report(
    runlog: RunLog,
    title: str = "Run report",
    energy: Optional[Sequence[EnergyRecord]] = None,
) -> str:
    """Plain-text report: grid levels per step, work per step, run averages."""
    lines = [title, "=" * len(title), ""]
    levels = runlog.level_table()
    lines += _section(
        "Grid levels per time step",
        "(no time steps)" if levels.empty else levels.to_string(index=False),
    )

    steps = runlog.steps_frame()
    if steps.empty:
        lines += _section("Work per time step", "(no time steps)")
    else:
        work = steps[["step", "t", "finest_elements", "finest_nnz", "finest_functional", "wu", "avg_conv_factor"]]
        lines += _section("Work per time step", work.to_string(index=False, float_format=lambda v: f"{v:.4g}"))

    avg = runlog.averages()
    table = pd.DataFrame([{
        "Avg WU": avg["avg_wu"],
        "Avg Nonzeros": avg["avg_nonzeros"],
        "Avg Functional": avg["avg_functional"],
        "Avg Elements": avg["avg_elements"],
        "Avg Conv Factor": avg["avg_conv_factor"],
    }])
    lines += _section("Run averages", table.to_string(index=False, float_format=lambda v: f"{v:.4g}"))

    per_level = runlog.newton_per_level()
    lines += _section(
        "Average Newton steps per grid level",
        "(no time steps)" if per_level.empty else per_level.to_frame().to_string(float_format=lambda v: f"{v:.2f}"),
    )

    if energy is not None and len(energy) > 1:
        report = energy_law_report(energy, startup=STARTUP_STEPS)
        body = "\n".join([
            f"startup steps excluded  : {STARTUP_STEPS}",
            f"max |dE/dt + D| / max D : {report.max_relative:.4g}",
            f"mean |dE/dt + D| / max D: {report.mean_relative:.4g}",
            f"energy non-increasing   : {'yes' if report.monotone_after_startup else f'no (step {report.first_increase})'}",
        ])
        lines += _section("Energy law", body)
    return "\n".join(lines)


def write_report(
    runlog: RunLog,
    path: PathLike,
    title: str = "Run report",
    energy: Optional[Sequence[EnergyRecord]] = None,
) -> Path:
    path = Path(path)
    with _partial_file_guard(path):
        path.write_text(format_report(runlog, title, energy), encoding="utf-8")
    return path


def compare_runs(runs: Dict[str, RunLog], reference: Optional[str] = None) -> pd.DataFrame:
    """
    Run averages side by side, with each run's element and WU ratios to the
    reference run (the first one by default).
    """
    if not runs:
        raise ConfigError("No runs to compare")
    reference = reference or next(iter(runs))
    if reference not in runs:
        raise ConfigError(f"Unknown reference run {reference!r}")
    frame = pd.DataFrame({name: log.averages() for name, log in runs.items()}).T
    ref = frame.loc[reference]
    frame["element_ratio"] = frame["avg_elements"] / ref["avg_elements"] if ref["avg_elements"] else np.nan
    frame["wu_ratio"] = frame["avg_wu"] / ref["avg_wu"] if ref["avg_wu"] else np.nan
    return frame


class RunOutputs:
    """Output sink writing snapshots, the energy series, the Newton log and the report to a directory."""

    def __init__(self, output_dir: PathLike, snapshot_format: str = "vtk", title: str = "Run report"):
        if snapshot_format not in SNAPSHOT_FORMATS:
            raise ConfigError(f"snapshot_format must be one of {SNAPSHOT_FORMATS}, got {snapshot_format!r}")
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.snapshot_format = snapshot_format
        self.title = title
        self.energy: List[EnergyRecord] = []
        self.written: List[Path] = []

    @classmethod
    def from_config(cls, config: RunConfig) -> "RunOutputs":
        return cls(config.output_dir, config.snapshot_format, f"Run report: {config.test_case}")

    def on_snapshot(self, step: int, state: State, per_element: Optional[pd.Series]):
        path = self.output_dir / f"snapshot_{step:05d}.{self.snapshot_format}"
        self.written.append(write_snapshot(state, path, step, per_element, self.snapshot_format))

    def on_energy(self, records: Sequence[EnergyRecord]):
        self.energy = list(records)
        self.written.append(write_energy_series(self.energy, self.output_dir / "energy.csv"))

    def on_log(self, runlog: RunLog):
        self.written.append(write_runlog_csv(runlog, self.output_dir / "newton_log.csv"))
        self.written.append(write_report(runlog, self.output_dir / "report.txt", self.title, self.energy))

    def close(self):
        logger.info(f"✓ {len(self.written)} output files written to {self.output_dir}")
