#!/usr/bin/env python3
"""
Property Verification Suite

Small-scale checks of the properties the simulator relies on: 1-irregular
refinement, exact interpolation on hanging-node meshes, multigrid
convergence, consistency of the linearization, convergence on the
manufactured solution and the discrete energy law.

Usage:
    python verify_suite.py [config]
    python app.py verify [config]

Without a config file the default RunConfig (the coalescence parameters)
is checked.
"""

import logging
import math
import os
import sys
from dataclasses import replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from cli_io import RunConfig, load_config
from energy import STARTUP_STEPS, EnergyLawReport, energy_law_report
from fespace import (
    ComponentBC,
    apply_bcs,
    build_space,
    evaluate,
    interpolate_function,
    mass_matrix,
    reduced_transfer,
    stiffness_matrix,
)
from linsolve import Hierarchy, SparseSystem, pcg
from manufactured import build_problem, h1_error, manufactured_params
from mesh import build_uniform, is_one_irregular, refine
from nested_driver import DriverConfig, NullOutputs, newton_on_grid, run_simulation
from twophase_system import (
    N_UNKNOWNS,
    State,
    TimeHistory,
    assemble,
    linearize,
    linearized_functional,
    nonlinear_functional,
    two_phase_bcs,
    update_state,
)

logger = logging.getLogger(__name__)

Check = Tuple[str, Callable[[RunConfig], bool]]

MG_REDUCTION_BOUND = 0.25
LINEARIZATION_RTOL = 1e-8
MANUFACTURED_SIZES = (8, 16, 32)
MANUFACTURED_ORDER = 1.8
ENERGY_CHECK_STEPS = 6


def _report(name: str, passed: bool, detail: str) -> bool:
    status = "✅ PASS" if passed else "❌ FAIL"
    logger.info(f"{status} | {name}: {detail}")
    return passed


def check_mesh_closure(config: RunConfig) -> bool:
    """Refining one corner element repeatedly keeps the mesh 1-irregular."""
    mesh = build_uniform(2, 2)
    first = refine(mesh, [0])
    ok = first.n_leaves == 7 and len(first.hanging_vertices) == 2
    for _ in range(3):
        corner = int(first.locate(np.array([[1e-9, 1e-9]]))[0][0])
        first = refine(first, [corner])
        ok = ok and is_one_irregular(first)
    return _report("Mesh closure", ok, f"{first.n_leaves} leaves after repeated corner refinement")


def check_interpolation(config: RunConfig) -> bool:
    """Biquadratic functions are reproduced exactly on a hanging-node mesh."""
    mesh = refine(refine(build_uniform(2, 2), [0]), [4])
    space = build_space(mesh, 2)

    def f(x, y):
        return 1.0 + x - 2.0 * y + 3.0 * x * y + x * x * y * y - y * y

    coeffs = interpolate_function(space, f)
    points = np.random.default_rng(0).random((200, 2))
    err = float(np.max(np.abs(evaluate(space, coeffs, points)[0] - f(points[:, 0], points[:, 1]))))
    return _report("Hanging-node interpolation", err < 1e-12, f"max error {err:.2e}")


def check_multigrid(config: RunConfig) -> bool:
    """Two-grid preconditioned CG on the Poisson problem with 33 x 33 nodes."""
    bcs = [ComponentBC.dirichlet()]
    coarse = build_space(build_uniform(16, 16), 1, 1, bcs)
    fine_mesh = refine(coarse.mesh, coarse.mesh.leaves)
    fine = build_space(fine_mesh, 1, 1, bcs)
    full = SparseSystem(stiffness_matrix(fine), mass_matrix(fine) @ np.ones(fine.n_nodes), space=fine)
    system = apply_bcs(fine, full)
    hier = Hierarchy.galerkin(system.matrix, [reduced_transfer(coarse, fine)])
    _, stats = pcg(system, tol=1e-10, maxit=50, precond=hier)
    ok = stats.converged and stats.conv_factor <= MG_REDUCTION_BOUND
    return _report("Two-grid Poisson", ok, f"{stats.iterations} cycles, factor {stats.conv_factor:.3f}")


def check_linearization(config: RunConfig) -> bool:
    """Linearized functional matches the nonlinear one at zero, and exactly for the linear system."""
    space = build_space(build_uniform(4, 4), 2, N_UNKNOWNS, two_phase_bcs(None))
    rng = np.random.default_rng(1)
    state = State(space, 0.1 * rng.standard_normal((N_UNKNOWNS, space.n_nodes)))
    history = TimeHistory.steady(state, config.dt)

    params = config.params()
    linsys = linearize(state, history, params)
    zero = linearized_functional(np.zeros(space.size), linsys)
    ok = abs(zero - linsys.g_nl) <= LINEARIZATION_RTOL * max(linsys.g_nl, 1.0)

    linear = replace(params, lam=0.0, include_advection=False, include_cubic=False, include_transport=False)
    linsys = linearize(state, history, linear)
    system = assemble(linsys)
    expand = space.reduction.expand
    delta = expand @ (0.01 * rng.standard_normal(expand.shape[1]))
    g_lin = linearized_functional(delta, linsys, system=system)
    g_new, _ = nonlinear_functional(update_state(state, delta), history, linear)
    # update_state shifts the pressure mean, which the functional does not see
    gap = abs(g_lin - g_new) / max(g_new, 1e-30)
    ok = ok and gap <= 1e-6
    return _report("Linearization consistency", ok, f"relative gap {gap:.2e} on the linear system")


def manufactured_convergence(sizes: Sequence[int] = MANUFACTURED_SIZES, degree: int = 2) -> pd.DataFrame:
    """
    sqrt(G) and H1 error of the Newton solution on uniform n x n grids.

    Returns:
        One row per size with columns n, sqrt_g, h1_error, and the observed
        orders against the previous size (NaN on the first row)
    """
    problem = build_problem(manufactured_params())
    driver = DriverConfig(dt=problem.params.dt, max_newton=4)
    rows = []
    for n in sizes:
        space = build_space(build_uniform(n, n), degree, N_UNKNOWNS, two_phase_bcs(None))
        start = problem.exact_state(space)
        history = TimeHistory.steady(start, problem.params.dt)
        state, _ = newton_on_grid(start, history, problem.params, driver)
        g, _ = nonlinear_functional(state, history, problem.params)
        rows.append({"n": n, "sqrt_g": float(np.sqrt(g)), "h1_error": h1_error(state, problem)})
    table = pd.DataFrame(rows)
    ratio = table["n"] / table["n"].shift(1)
    for column in ("sqrt_g", "h1_error"):
        table[f"{column}_order"] = np.log(table[column].shift(1) / table[column]) / np.log(ratio)
    return table


def check_manufactured(config: RunConfig) -> bool:
    """sqrt(G) and the H1 error converge at second order on the manufactured solution."""
    table = manufactured_convergence()
    orders = table[["sqrt_g_order", "h1_error_order"]].dropna()
    ok = bool(len(orders)) and bool((orders >= MANUFACTURED_ORDER).all().all())
    detail = ", ".join(
        f"{int(r.n)}: sqrt(G) {r.sqrt_g:.3e}, H1 {r.h1_error:.3e}" for r in table.itertuples()
    )
    return _report(
        "Manufactured convergence",
        ok,
        f"{detail}; min orders {orders['sqrt_g_order'].min():.2f} / {orders['h1_error_order'].min():.2f}",
    )


def interface_levels(config: RunConfig) -> int:
    """Grid count that takes the coarsest element size down to at most eps."""
    h0 = 1.0 / min(config.coarse_nx, config.coarse_ny)
    return 1 + max(0, math.ceil(math.log2(h0 / config.eps)))


def energy_law_run(config: RunConfig, steps: int = ENERGY_CHECK_STEPS) -> EnergyLawReport:
    """
    Short run with the diffuse interface refined to h <= eps, returning the
    energy-law report over the steps after startup.
    """
    resolved = replace(
        config,
        refinement="adaptive",
        marker="interface",
        levels=max(config.levels, interface_levels(config)),
        max_time_steps=steps,
    ).validate()
    logger.info(
        f"Energy law run: {resolved.levels} grids, interface band {resolved.interface_band}, "
        f"{steps} steps of dt = {resolved.dt}"
    )
    sink = NullOutputs()
    run_simulation(resolved.driver_config(), resolved.test_case_spec(), sink)
    return energy_law_report(sink.energy, startup=STARTUP_STEPS)


def check_energy_law(config: RunConfig) -> bool:
    """A short resolved run of the configured test case dissipates energy as predicted."""
    if config.test_case == "manufactured":
        return _report("Energy law", True, "skipped for the forced manufactured problem")
    report = energy_law_run(config)
    ok = report.monotone_after_startup and report.passed(config.energy_tol)
    return _report(
        "Energy law",
        ok,
        f"max relative mismatch {report.max_relative:.3e} after step {STARTUP_STEPS} (tolerance {config.energy_tol})",
    )


CHECKS: List[Check] = [
    ("Mesh closure", check_mesh_closure),
    ("Hanging-node interpolation", check_interpolation),
    ("Two-grid Poisson", check_multigrid),
    ("Linearization consistency", check_linearization),
    ("Manufactured convergence", check_manufactured),
    ("Energy law", check_energy_law),
]


def run_verification(config: RunConfig) -> List[Tuple[str, bool]]:
    """Run every check; a check raising an exception counts as failed."""
    results = []
    for name, check in CHECKS:
        try:
            passed = bool(check(config))
        except Exception as e:
            logger.error(f"❌ FAIL | {name}: {type(e).__name__}: {e}")
            passed = False
        results.append((name, passed))
    return results


def main(config_path: Optional[str] = None) -> int:
    config = load_config(config_path) if config_path else RunConfig().validate()
    results = run_verification(config)

    logger.info("=" * 60)
    logger.info("VERIFICATION SUMMARY")
    logger.info("=" * 60)
    for name, passed in results:
        logger.info(f"{'✅ PASSED' if passed else '❌ FAILED'} | {name}")
    all_passed = all(passed for _, passed in results)
    logger.info("=" * 60)
    logger.info("✅ ALL CHECKS PASSED" if all_passed else "❌ SOME CHECKS FAILED")
    return 0 if all_passed else 1


if __name__ == "__main__":
    load_dotenv()
    logging.basicConfig(
        level=getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else None))
