#!/usr/bin/env python3
"""
Installation and Environment Check Script for foslsflow

Validates that all dependencies are installed, the simulator modules import,
and a small multigrid solve works.

Usage:
    python check_installation.py
"""

import logging
import os
import sys
from typing import Dict, List, Tuple

logging.basicConfig(level=logging.INFO, format='%(levelname)s: %(message)s')
logger = logging.getLogger(__name__)

REQUIRED_PACKAGES = {
    'numpy': 'numpy',
    'scipy': 'scipy',
    'pyamg': 'pyamg',
    'sympy': 'sympy',
    'pandas': 'pandas',
    'dotenv': 'python-dotenv',
    'pytest': 'pytest',
}


def check_python_version() -> bool:
    """Check if Python version meets requirements."""
    version_info = sys.version_info
    if version_info >= (3, 10):
        logger.info(f"✅ Python version {version_info.major}.{version_info.minor}.{version_info.micro} is supported")
        return True
    logger.error(f"❌ Python version {version_info.major}.{version_info.minor}.{version_info.micro} is not supported. Requires Python 3.10+")
    return False


def check_dependencies() -> Tuple[bool, List[str]]:
    """Check if all required dependencies are installed."""
    missing_packages = []
    for module, package in REQUIRED_PACKAGES.items():
        try:
            __import__(module)
            logger.info(f"✅ {package} is installed")
        except ImportError:
            logger.error(f"❌ {package} is not installed")
            missing_packages.append(package)
    return len(missing_packages) == 0, missing_packages


def check_environment() -> bool:
    """Check the optional .env settings."""
    try:
        from dotenv import load_dotenv
        load_dotenv()
    except ImportError:
        pass
    level = os.getenv("LOG_LEVEL", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        logger.error(f"❌ LOG_LEVEL={level} is not a logging level")
        return False
    logger.info(f"✅ LOG_LEVEL is {level}")
    return True


def check_module_imports() -> bool:
    """Check if the simulator modules can be imported."""
    try:
        import cli_io
        import nested_driver
        logger.info("✅ cli_io and nested_driver modules imported successfully")
        return True
    except ImportError as e:
        logger.error(f"❌ Failed to import simulator modules: {e}")
        return False


def check_multigrid_solve() -> bool:
    """Solve a small Poisson problem with V-cycle preconditioned CG."""
    try:
        import numpy as np

        from fespace import ComponentBC, apply_bcs, build_space, mass_matrix, reduced_transfer, stiffness_matrix
        from linsolve import Hierarchy, SparseSystem, pcg
        from mesh import build_uniform, refine

        bcs = [ComponentBC.dirichlet()]
        coarse = build_space(build_uniform(4, 4), 1, 1, bcs)
        fine = build_space(refine(coarse.mesh, coarse.mesh.leaves), 1, 1, bcs)
        full = SparseSystem(stiffness_matrix(fine), mass_matrix(fine) @ np.ones(fine.n_nodes), space=fine)
        system = apply_bcs(fine, full)
        hier = Hierarchy.galerkin(system.matrix, [reduced_transfer(coarse, fine)])
        _, stats = pcg(system, tol=1e-8, maxit=30, precond=hier)
        if not stats.converged:
            logger.error(f"❌ Multigrid solve did not converge ({stats.rel_residual:.2e})")
            return False
        logger.info(f"✅ Multigrid solve converged in {stats.iterations} cycles (rho = {stats.conv_factor:.3f})")
        return True
    except Exception as e:
        logger.error(f"❌ Multigrid solve failed: {e}")
        return False


def generate_report(results: Dict[str, bool], missing_packages: List[str]) -> None:
    """Print a summary report of check results."""
    print("\n" + "=" * 60)
    print("FOSLSFLOW - INSTALLATION CHECK REPORT")
    print("=" * 60)

    total = len(results)
    passed = sum(results.values())
    print(f"\nOverall Status: {passed}/{total} checks passed")
    if passed == total:
        print("🎉 All checks passed! Your environment is ready.")
    else:
        print("❌ Some checks failed. Please review the issues above.")

    print("\nCheck Results:")
    for name, result in results.items():
        status = "✅ PASS" if result else "❌ FAIL"
        print(f"  {name}: {status}")

    if missing_packages:
        print("\nMissing Packages:")
        for package in missing_packages:
            print(f"  - {package}")
        print("\nTo install missing packages, run:")
        print(f"  pip install {' '.join(missing_packages)}")

    print("\nNext Steps:")
    if passed == total:
        print("  1. Run a simulation: python app.py run --preset coalescence")
        print("  2. Run the property checks: python app.py verify")
    else:
        print("  1. Fix the failing checks above")
        print("  2. Re-run this script")
    print("\n" + "=" * 60)


def main():
    """Run all installation checks."""
    print("foslsflow - Installation Check")
    print("Checking your environment and dependencies...\n")

    results = {}
    results["Python Version"] = check_python_version()
    deps_ok, missing_packages = check_dependencies()
    results["Dependencies"] = deps_ok
    results["Environment Variables"] = check_environment()
    if deps_ok:
        results["Module Imports"] = check_module_imports()
        results["Multigrid Solve"] = check_multigrid_solve()

    generate_report(results, missing_packages)
    sys.exit(0 if all(results.values()) else 1)


if __name__ == "__main__":
    main()
