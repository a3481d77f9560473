"""
Quadtree Mesh Module

Hierarchical quadrilateral meshes of rectangular domains. Leaves tile the
domain; refinement splits a leaf into four children and closes the marked set
so that edge-adjacent leaves never differ by more than one level (1-irregular).

Element geometry lives on an integer lattice: a base cell is LATTICE_SIZE
units wide and a level-l element LATTICE_SIZE >> l units, so vertex and node
identification is exact.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LATTICE_BITS = 24
LATTICE_SIZE = 1 << LATTICE_BITS
MAX_LEVEL = LATTICE_BITS - 2

# Edge order used everywhere: south, east, north, west
SOUTH, EAST, NORTH, WEST = 0, 1, 2, 3
EDGE_NAMES = ("south", "east", "north", "west")
EDGE_OFFSETS = ((0, -1), (1, 0), (0, 1), (-1, 0))

# Children are stored SW, SE, NW, NE. For a neighbour lying across edge d of
# an element, these are the neighbour's children that touch the shared edge.
FACING_CHILDREN = {
    SOUTH: (2, 3),
    EAST: (0, 2),
    NORTH: (0, 1),
    WEST: (1, 3),
}

MarkSet = FrozenSet[int]


class MeshError(Exception):
    """Custom exception for mesh construction and refinement errors."""
    pass


@dataclass(frozen=True)
class Domain:
    """Axis-aligned rectangle [xmin, xmax] x [ymin, ymax]."""

    xmin: float = 0.0
    xmax: float = 1.0
    ymin: float = 0.0
    ymax: float = 1.0

    def __post_init__(self):
        if not self.xmax > self.xmin or not self.ymax > self.ymin:
            raise MeshError(
                f"Degenerate domain [{self.xmin}, {self.xmax}] x [{self.ymin}, {self.ymax}]"
            )

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


class Mesh:
    """
    Immutable quadtree mesh.

    Every element ever created is kept (ids are stable across refinement, so
    parent links stay valid for intergrid transfer); the current mesh is the
    set of leaves.
    """

    def __init__(
        self,
        domain: Domain,
        nx: int,
        ny: int,
        level: np.ndarray,
        ix: np.ndarray,
        iy: np.ndarray,
        parent: np.ndarray,
        children: np.ndarray,
    ):
        self.domain = domain
        self.nx = nx
        self.ny = ny
        self.level = np.asarray(level, dtype=np.int64)
        self.ix = np.asarray(ix, dtype=np.int64)
        self.iy = np.asarray(iy, dtype=np.int64)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.children = np.asarray(children, dtype=np.int64).reshape(-1, 4)
        for arr in (self.level, self.ix, self.iy, self.parent, self.children):
            arr.flags.writeable = False

        self._index: Dict[Tuple[int, int, int], int] = {
            (int(l), int(x), int(y)): e
            for e, (l, x, y) in enumerate(zip(self.level, self.ix, self.iy))
        }
        self.leaves = np.flatnonzero(self.children[:, 0] < 0)
        self.leaves.flags.writeable = False

        self.scale_x = (domain.xmax - domain.xmin) / nx / LATTICE_SIZE
        self.scale_y = (domain.ymax - domain.ymin) / ny / LATTICE_SIZE

    # ------------------------------------------------------------------
    # Basic queries
    # ------------------------------------------------------------------
    @property
    def n_elements(self) -> int:
        return len(self.level)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def max_level(self) -> int:
        return int(self.level[self.leaves].max())

    @property
    def lattice_extent(self) -> Tuple[int, int]:
        return self.nx * LATTICE_SIZE, self.ny * LATTICE_SIZE

    def level_of(self, element: int) -> int:
        return int(self.level[element])

    def is_leaf(self, element: int) -> bool:
        return 0 <= element < self.n_elements and self.children[element, 0] < 0

    def size(self, elements) -> np.ndarray:
        """Lattice edge length of the given elements."""
        return LATTICE_SIZE >> self.level[elements]

    def find(self, level: int, ix: int, iy: int) -> Optional[int]:
        return self._index.get((int(level), int(ix), int(iy)))

    def to_physical(self, kx, ky) -> Tuple[np.ndarray, np.ndarray]:
        """Map lattice coordinates to physical coordinates."""
        x = self.domain.xmin + np.asarray(kx, dtype=float) * self.scale_x
        y = self.domain.ymin + np.asarray(ky, dtype=float) * self.scale_y
        return x, y

    def bounds(self, elements=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Physical (x0, x1, y0, y1) of elements (default: the leaves)."""
        if elements is None:
            elements = self.leaves
        elements = np.asarray(elements, dtype=np.int64)
        s = self.size(elements)
        x0, y0 = self.to_physical(self.ix[elements], self.iy[elements])
        x1, y1 = self.to_physical(self.ix[elements] + s, self.iy[elements] + s)
        return x0, x1, y0, y1

    def areas(self, elements=None) -> np.ndarray:
        x0, x1, y0, y1 = self.bounds(elements)
        return (x1 - x0) * (y1 - y0)

    def centroids(self, elements=None) -> np.ndarray:
        x0, x1, y0, y1 = self.bounds(elements)
        return np.column_stack([0.5 * (x0 + x1), 0.5 * (y0 + y1)])

    # ------------------------------------------------------------------
    # Derived topology
    # ------------------------------------------------------------------
    @cached_property
    def neighbor_table(self) -> Dict[int, List[List[int]]]:
        """Leaf id -> per-edge list of leaf neighbours."""
        return {int(e): [_neighbors_across(self, int(e), d) for d in range(4)] for e in self.leaves}

    @cached_property
    def _vertex_data(self) -> Tuple[np.ndarray, Dict[Tuple[int, int], int]]:
        leaves = self.leaves
        s = self.size(leaves)
        x, y = self.ix[leaves], self.iy[leaves]
        corners = np.concatenate([
            np.column_stack([y, x]),
            np.column_stack([y, x + s]),
            np.column_stack([y + s, x]),
            np.column_stack([y + s, x + s]),
        ])
        keys = np.unique(corners, axis=0)[:, ::-1]
        lookup = {(int(kx), int(ky)): i for i, (kx, ky) in enumerate(keys)}
        return keys, lookup

    @property
    def vertex_keys(self) -> np.ndarray:
        return self._vertex_data[0]

    @cached_property
    def vertices(self) -> np.ndarray:
        keys = self.vertex_keys
        x, y = self.to_physical(keys[:, 0], keys[:, 1])
        return np.column_stack([x, y])

    @cached_property
    def hanging_vertices(self) -> List[Tuple[int, Tuple[int, int]]]:
        """(vertex index, (constraining leaf, edge)) for every hanging vertex."""
        lookup = self._vertex_data[1]
        hanging = []
        for e, per_edge in self.neighbor_table.items():
            for d, nbrs in enumerate(per_edge):
                if len(nbrs) == 2:
                    kx, ky = edge_point(self, e, d, 0.5)
                    hanging.append((lookup[(kx, ky)], (e, d)))
        return hanging

    # ------------------------------------------------------------------
    # Point location
    # ------------------------------------------------------------------
    def locate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Find the leaf containing each point and its reference coordinates.

        Args:
            points: (n, 2) physical coordinates inside the domain

        Returns:
            (leaf ids, (n, 2) reference coordinates in [-1, 1]^2)
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = pts[:, 0], pts[:, 1]
        hx = (self.domain.xmax - self.domain.xmin) / self.nx
        hy = (self.domain.ymax - self.domain.ymin) / self.ny
        i = np.clip(np.floor((x - self.domain.xmin) / hx).astype(np.int64), 0, self.nx - 1)
        j = np.clip(np.floor((y - self.domain.ymin) / hy).astype(np.int64), 0, self.ny - 1)
        ids = j * self.nx + i

        active = self.children[ids, 0] >= 0
        while active.any():
            a = np.flatnonzero(active)
            e = ids[a]
            x0, x1, y0, y1 = self.bounds(e)
            quadrant = (x[a] >= 0.5 * (x0 + x1)).astype(np.int64) + 2 * (y[a] >= 0.5 * (y0 + y1))
            ids[a] = self.children[e, quadrant]
            active = self.children[ids, 0] >= 0

        x0, x1, y0, y1 = self.bounds(ids)
        xi = np.clip(2.0 * (x - x0) / (x1 - x0) - 1.0, -1.0, 1.0)
        eta = np.clip(2.0 * (y - y0) / (y1 - y0) - 1.0, -1.0, 1.0)
        return ids, np.column_stack([xi, eta])

    def locate_keys(self, kx: np.ndarray, ky: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Exact variant of locate for lattice points.

        Points on an element boundary go to the leaf on their upper/right
        side, except on the domain's upper/right boundary.
        """
        kx = np.asarray(kx, dtype=np.int64)
        ky = np.asarray(ky, dtype=np.int64)
        i = np.clip(kx // LATTICE_SIZE, 0, self.nx - 1)
        j = np.clip(ky // LATTICE_SIZE, 0, self.ny - 1)
        ids = j * self.nx + i

        active = self.children[ids, 0] >= 0
        while active.any():
            a = np.flatnonzero(active)
            e = ids[a]
            half = self.size(e) // 2
            quadrant = (kx[a] >= self.ix[e] + half).astype(np.int64) + 2 * (ky[a] >= self.iy[e] + half)
            ids[a] = self.children[e, quadrant]
            active = self.children[ids, 0] >= 0

        s = self.size(ids).astype(float)
        xi = 2.0 * (kx - self.ix[ids]) / s - 1.0
        eta = 2.0 * (ky - self.iy[ids]) / s - 1.0
        return ids, np.column_stack([xi, eta])

    def __repr__(self) -> str:
        return f"Mesh({self.nx}x{self.ny} base, {self.n_leaves} leaves, max level {self.max_level})"


def edge_point(mesh: Mesh, element: int, edge: int, t: float) -> Tuple[int, int]:
    """Lattice point at parameter t in [0, 1] along an edge (increasing x or y)."""
    s = int(LATTICE_SIZE >> mesh.level[element])
    x, y = int(mesh.ix[element]), int(mesh.iy[element])
    offset = int(round(t * s))
    if edge == SOUTH:
        return x + offset, y
    if edge == EAST:
        return x + s, y + offset
    if edge == NORTH:
        return x + offset, y + s
    return x, y + offset


def _facing_leaves(mesh: Mesh, element: int, edge: int) -> List[int]:
    if mesh.children[element, 0] < 0:
        return [element]
    out = []
    for q in FACING_CHILDREN[edge]:
        out.extend(_facing_leaves(mesh, int(mesh.children[element, q]), edge))
    return out


def _neighbors_across(mesh: Mesh, element: int, edge: int) -> List[int]:
    level = int(mesh.level[element])
    s = LATTICE_SIZE >> level
    dx, dy = EDGE_OFFSETS[edge]
    px = int(mesh.ix[element]) + dx * s
    py = int(mesh.iy[element]) + dy * s
    wx, wy = mesh.lattice_extent
    if px < 0 or py < 0 or px >= wx or py >= wy:
        return []

    same = mesh.find(level, px, py)
    if same is not None:
        return _facing_leaves(mesh, same, edge)

    for k in range(level - 1, -1, -1):
        sk = LATTICE_SIZE >> k
        coarse = mesh.find(k, px - px % sk, py - py % sk)
        if coarse is not None:
            return [coarse]
    return []


def build_uniform(nx: int, ny: int, domain: Optional[Domain] = None) -> Mesh:
    """
    Build an nx x ny mesh of congruent rectangles.

    Args:
        nx: Elements in x
        ny: Elements in y
        domain: Rectangle to mesh (unit square by default)

    Returns:
        Mesh with nx*ny level-0 leaves

    Raises:
        MeshError: If a count is not a positive integer
    """
    if domain is None:
        domain = Domain()
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError(f"Element counts must be positive integers, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)

    j, i = np.divmod(np.arange(nx * ny), nx)
    mesh = Mesh(
        domain,
        nx,
        ny,
        level=np.zeros(nx * ny, dtype=np.int64),
        ix=i * LATTICE_SIZE,
        iy=j * LATTICE_SIZE,
        parent=np.full(nx * ny, -1),
        children=np.full((nx * ny, 4), -1),
    )
    logger.debug(f"Built uniform mesh {nx}x{ny} on {domain}")
    return mesh


def leaf_neighbors(mesh: Mesh, element: int) -> List[List[int]]:
    """
    Leaf neighbours of a leaf, per edge (south, east, north, west).

    Args:
        mesh: Mesh
        element: Leaf element id

    Returns:
        Four lists holding 0 (boundary), 1 or 2 leaf ids
    """
    if not mesh.is_leaf(element):
        raise MeshError(f"Element {element} is not a leaf")
    return mesh.neighbor_table[int(element)]


def close_marks(mesh: Mesh, marks: Iterable[int]) -> MarkSet:
    """Extend marks until refining them keeps the mesh 1-irregular."""
    marked = set(int(e) for e in marks)
    queue = sorted(marked)
    while queue:
        e = queue.pop()
        for nbrs in leaf_neighbors(mesh, e):
            for n in nbrs:
                if mesh.level[n] < mesh.level[e] and n not in marked:
                    marked.add(n)
                    queue.append(n)
    return frozenset(marked)


def is_one_irregular(mesh: Mesh) -> bool:
    for e, per_edge in mesh.neighbor_table.items():
        for nbrs in per_edge:
            if any(abs(int(mesh.level[n]) - int(mesh.level[e])) > 1 for n in nbrs):
                return False
    return True


def refine(mesh: Mesh, marks: Iterable[int]) -> Mesh:
    """
    Split marked leaves into four children, with 1-irregularity closure.

    Args:
        mesh: Current mesh
        marks: Leaf ids selected for refinement

    Returns:
        The refined mesh (the input mesh itself when marks is empty)

    Raises:
        MeshError: If a mark is not a current leaf, or refinement would
            exceed MAX_LEVEL
    """
    marks = [int(e) for e in marks]
    stale = [e for e in marks if not mesh.is_leaf(e)]
    if stale:
        raise MeshError(f"Stale element ids (not current leaves): {stale[:10]}")
    if not marks:
        return mesh

    closed = close_marks(mesh, marks)
    if len(closed) > len(set(marks)):
        logger.debug(f"Closure added {len(closed) - len(set(marks))} marks for 1-irregularity")

    order = sorted(closed)
    if int(mesh.level[order].max()) >= MAX_LEVEL:
        raise MeshError(f"Refinement beyond level {MAX_LEVEL} is not supported")

    n_old = mesh.n_elements
    n_new = 4 * len(order)
    level = np.concatenate([mesh.level, np.repeat(mesh.level[order] + 1, 4)])
    half = np.repeat(mesh.size(order) // 2, 4)
    q = np.tile(np.arange(4), len(order))
    ix = np.concatenate([mesh.ix, np.repeat(mesh.ix[order], 4) + (q & 1) * half])
    iy = np.concatenate([mesh.iy, np.repeat(mesh.iy[order], 4) + (q >> 1) * half])
    parent = np.concatenate([mesh.parent, np.repeat(order, 4)])
    children = np.concatenate([np.array(mesh.children), np.full((n_new, 4), -1)])
    children[order] = (n_old + np.arange(n_new)).reshape(-1, 4)

    refined = Mesh(mesh.domain, mesh.nx, mesh.ny, level, ix, iy, parent, children)
    logger.debug(f"Refined {len(order)} elements: {mesh.n_leaves} -> {refined.n_leaves} leaves")
    return refined
