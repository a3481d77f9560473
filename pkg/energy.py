"""
Energy Diagnostics Module

Total energy (kinetic plus mixing), dissipation, the discrete energy rate
computed with the integrator's own BDF weights, the energy-law mismatch
report, and interface topology/shape measures of the phase field.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from fespace import evaluate, field_at_quadrature, integrate
from twophase_system import B1, B2, BDF_TABLE, PHI, SCHEMES, U1, U2, V11, V12, V21, Params, State, TimeHistory

logger = logging.getLogger(__name__)

DISSIPATION_FLOOR = 1e-14
MONOTONE_RTOL = 1e-12
# Steps in which the initial profile relaxes onto the discrete interface
STARTUP_STEPS = 2


class EnergyError(Exception):
    """Custom exception for energy diagnostics errors."""
    pass


@dataclass
class EnergyRecord:
    """Energy bookkeeping of one time level."""

    step: int
    t: float
    E: float
    D: float
    dEdt: float = float("nan")
    mismatch: float = float("nan")


def mixing_energy_density(phi, grad_phi, eps: float):
    """Ginzburg-Landau density 1/2 |grad phi|^2 + (phi^2 - 1)^2 / (4 eps^2)."""
    if eps <= 0:
        raise EnergyError(f"eps must be positive, got {eps}")
    phi = np.asarray(phi, dtype=float)
    g = np.asarray(grad_phi, dtype=float)
    return 0.5 * (g[0] ** 2 + g[1] ** 2) + (phi * phi - 1.0) ** 2 / (4.0 * eps * eps)


def total_energy(state: State, params: Params) -> float:
    """Kinetic plus lambda-weighted mixing energy; grad phi is taken from B."""
    vals, _, _ = field_at_quadrature(state.space, state.coeffs)
    kinetic = 0.5 * (vals[U1] ** 2 + vals[U2] ** 2)
    mixing = mixing_energy_density(vals[PHI], vals[[B1, B2]], params.eps)
    return integrate(state.space, kinetic + params.lam * mixing)


def dissipation(state: State, params: Params, history: Optional[TimeHistory] = None) -> float:
    """
    Viscous plus interfacial dissipation, using V for grad u.

    Given the time history of the step that produced `state`, the interfacial
    part is lam/gamma |phi_t + u.B|^2 with phi_t from the step's BDF weights.
    Without one (the initial condition) it is lam gamma |div B - phi(phi^2 - 1)/eps^2|^2.
    The two agree wherever the phase equation holds.
    """
    space = state.space
    vals, dx, dy = field_at_quadrature(space, state.coeffs)
    grad_u_sq = 2.0 * vals[V11] ** 2 + vals[V12] ** 2 + vals[V21] ** 2
    phi = vals[PHI]
    if history is None:
        chem = dx[B1] + dy[B2] - phi * (phi * phi - 1.0) / params.eps ** 2
        interfacial = params.lam * params.gamma * chem ** 2
    else:
        hist = history.at_quadrature(space)
        rate = history.alpha0 * phi + hist[2] + params.transport * (vals[U1] * vals[B1] + vals[U2] * vals[B2])
        interfacial = params.lam / params.gamma * rate ** 2
    return integrate(space, params.mu * grad_u_sq + interfacial)


def energy_record(step: int, state: State, params: Params, history: Optional[TimeHistory] = None) -> EnergyRecord:
    return EnergyRecord(step=step, t=state.t, E=total_energy(state, params), D=dissipation(state, params, history))


def energy_rate(series: Sequence[EnergyRecord], dt: float, scheme: str = "BDF2") -> List[EnergyRecord]:
    """
    Fill dEdt and mismatch with the time integrator's BDF differences.

    Record 0 keeps an undefined rate; record 1 uses BDF1; later records use
    the scheme's order.
    """
    if scheme not in SCHEMES:
        raise EnergyError(f"Unknown scheme {scheme!r}")
    if dt <= 0:
        raise EnergyError(f"dt must be positive, got {dt}")
    energies = [r.E for r in series]
    out = []
    for n, rec in enumerate(series):
        if n == 0:
            out.append(replace(rec, dEdt=float("nan"), mismatch=float("nan")))
            continue
        order = min(SCHEMES[scheme], n)
        a0, weights = BDF_TABLE[order]
        rate = a0 * energies[n]
        for i, w in enumerate(weights):
            rate += w * energies[n - 1 - i]
        rate /= dt
        out.append(replace(rec, dEdt=rate, mismatch=rate + rec.D))
    return out


def records_to_frame(series: Sequence[EnergyRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.step, r.t, r.E, r.D, r.dEdt, r.mismatch) for r in series],
        columns=["step", "t", "E", "D", "dEdt", "mismatch"],
    )


@dataclass
class EnergyLawReport:
    """Relative energy-law mismatch statistics of a series."""

    relative_mismatch: pd.Series
    max_relative: float
    mean_relative: float
    monotone_after_startup: bool
    first_increase: int = -1
    scale: float = 0.0

    def passed(self, tol: float) -> bool:
        return bool(self.max_relative <= tol)


def energy_law_report(
    series: Sequence[EnergyRecord], floor: float = DISSIPATION_FLOOR, startup: int = 0
) -> EnergyLawReport:
    """
    Mismatch |dE/dt + D| relative to max(D) over the series, and whether E
    is non-increasing after the startup step.

    Records with step <= `startup` are left out of the mismatch statistics
    and of the scale; the monotonicity check always starts at record 2.
    """
    frame = records_to_frame(series)
    window = frame[frame["step"] > startup]
    scale = max(float(window["D"].max()) if len(window) else 0.0, floor)
    rel = (window["mismatch"].abs() / scale).dropna()
    rel.index = window.loc[rel.index, "step"].to_numpy()

    first_increase = -1
    energies = frame["E"].to_numpy()
    for n in range(2, len(energies)):
        if energies[n] > energies[n - 1] * (1.0 + MONOTONE_RTOL) + floor:
            first_increase = int(frame["step"].iloc[n])
            break

    return EnergyLawReport(
        relative_mismatch=rel,
        max_relative=float(rel.max()) if len(rel) else 0.0,
        mean_relative=float(rel.mean()) if len(rel) else 0.0,
        monotone_after_startup=first_increase < 0,
        first_increase=first_increase,
        scale=scale,
    )


# ----------------------------------------------------------------------
# Interface topology and shape
# ----------------------------------------------------------------------
@dataclass
class TopologyStats:
    """Measures of the bubble phase (the phase not touching the boundary)."""

    components: int
    area: float
    perimeter: float
    extent_ratio: float
    bubble_sign: int
    labels: pd.Series = field(default=None, repr=False)


def bubble_sign(state: State) -> int:
    """Sign of the phase opposite to the mean boundary value of phi."""
    space = state.space
    boundary_mean = float(np.mean(state.coeffs[PHI, space.on_boundary]))
    return -1 if boundary_mean >= 0.0 else 1


def _corner_values(state: State) -> np.ndarray:
    space = state.space
    p = space.degree
    corners = [0, p, p * (p + 1), (p + 1) ** 2 - 1]  # SW, SE, NW, NE
    return state.coeffs[PHI][space.elem_nodes[:, corners]]


def zero_level_perimeter(state: State) -> float:
    """Length of the phi = 0 contour by marching squares on the leaves' corner values."""
    mesh = state.space.mesh
    x0, x1, y0, y1 = mesh.bounds(state.space.leaves)
    sw, se, nw, ne = _corner_values(state).T
    # Edge endpoints (value, x, y) in order south, east, north, west
    edges = [
        ((sw, x0, y0), (se, x1, y0)),
        ((se, x1, y0), (ne, x1, y1)),
        ((nw, x0, y1), (ne, x1, y1)),
        ((sw, x0, y0), (nw, x0, y1)),
    ]
    px, py, cut = [], [], []
    for (fa, xa, ya), (fb, xb, yb) in edges:
        crosses = (fa < 0) != (fb < 0)
        denom = np.where(crosses, fa - fb, 1.0)
        s = np.where(crosses, fa / denom, 0.0)
        px.append(xa + s * (xb - xa))
        py.append(ya + s * (yb - ya))
        cut.append(crosses)
    px, py, cut = np.array(px), np.array(py), np.array(cut)
    n_cut = cut.sum(axis=0)

    def seg(i, j, mask):
        return np.hypot(px[i, mask] - px[j, mask], py[i, mask] - py[j, mask])

    total = 0.0
    two = n_cut == 2
    for i in range(4):
        for j in range(i + 1, 4):
            mask = two & cut[i] & cut[j]
            total += float(seg(i, j, mask).sum())

    # Saddle cells: pair the crossings according to the sign at the centre
    four = n_cut == 4
    if four.any():
        centre = 0.25 * (sw + se + nw + ne)
        joined = four & ((centre < 0) == (sw < 0))
        split = four & ~joined
        total += float((seg(0, 1, joined) + seg(2, 3, joined)).sum())
        total += float((seg(0, 3, split) + seg(1, 2, split)).sum())
    return total


def extent_ratio(points: np.ndarray) -> float:
    """Ratio of the largest axis-aligned extent to the largest diagonal extent."""
    if len(points) < 2:
        return float("nan")
    x, y = points[:, 0], points[:, 1]
    axis = max(np.ptp(x), np.ptp(y))
    diag = max(np.ptp(x + y), np.ptp(x - y)) / np.sqrt(2.0)
    return float(axis / diag) if diag > 0 else float("nan")


def interface_topology(state: State, level: float = 0.0) -> TopologyStats:
    """
    Connected components, area, perimeter and extent ratio of the bubble phase.

    An element belongs to the bubble phase when bubble_sign * phi at its
    centroid exceeds `level`; components are connected through shared edges.
    A positive level separates bubbles whose diffuse layers overlap.
    """
    space = state.space
    mesh = space.mesh
    leaves = space.leaves
    centroids = mesh.centroids(leaves)
    phi_c = evaluate(space, state.coeffs[[PHI]], centroids)[0]
    sign = bubble_sign(state)
    inside = (sign * phi_c) > level

    rows, cols = [], []
    pos = space.leaf_index
    for e, per_edge in mesh.neighbor_table.items():
        if not inside[pos[e]]:
            continue
        for nbrs in per_edge:
            for n in nbrs:
                if inside[pos[n]]:
                    rows.append(pos[e])
                    cols.append(pos[n])
    n = len(leaves)
    graph = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    sub = np.flatnonzero(inside)
    if len(sub):
        count, labels = connected_components(graph[sub][:, sub], directed=False)
    else:
        count, labels = 0, np.zeros(0, dtype=np.int64)

    area = float(mesh.areas(leaves)[inside].sum())
    return TopologyStats(
        components=int(count),
        area=area,
        perimeter=zero_level_perimeter(state),
        extent_ratio=extent_ratio(centroids[inside]),
        bubble_sign=sign,
        labels=pd.Series(labels, index=leaves[inside], name="component"),
    )
