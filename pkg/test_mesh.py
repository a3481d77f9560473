"""
Tests for the quadtree mesh: construction, neighbours, closure, point location
"""

import numpy as np
import pytest

from mesh import (
    LATTICE_SIZE,
    Domain,
    MeshError,
    build_uniform,
    close_marks,
    is_one_irregular,
    leaf_neighbors,
    refine,
)


def test_build_uniform_counts():
    """Test a uniform mesh has nx*ny leaves and (nx+1)(ny+1) vertices."""
    mesh = build_uniform(3, 2)
    assert mesh.n_leaves == 6
    assert len(mesh.vertices) == 12
    assert mesh.hanging_vertices == []
    assert np.allclose(mesh.areas(), 1.0 / 6.0)


def test_build_uniform_rejects_bad_counts():
    """Test non-positive or fractional counts are rejected."""
    with pytest.raises(MeshError):
        build_uniform(0, 2)
    with pytest.raises(MeshError):
        build_uniform(2.5, 2)


def test_degenerate_domain_rejected():
    """Test an empty rectangle is rejected."""
    with pytest.raises(MeshError):
        Domain(0.0, 0.0, 0.0, 1.0)


def test_refine_one_of_four():
    """Test refining one element of a 2x2 mesh: 7 leaves, 14 vertices, 2 hanging."""
    mesh = refine(build_uniform(2, 2), [0])
    assert mesh.n_leaves == 7
    assert len(mesh.vertices) == 14
    assert len(mesh.hanging_vertices) == 2
    assert is_one_irregular(mesh)
    # The four children tile the parent
    children = mesh.children[0]
    assert np.isclose(mesh.areas(children).sum(), 0.25)


def test_refine_all_matches_uniform():
    """Test refining every leaf of a 2x2 mesh gives the 4x4 geometry."""
    mesh = refine(build_uniform(2, 2), build_uniform(2, 2).leaves)
    uniform = build_uniform(4, 4)
    assert mesh.n_leaves == 16
    assert np.allclose(np.sort(mesh.vertices, axis=0), np.sort(uniform.vertices, axis=0))
    assert mesh.hanging_vertices == []


def test_refine_empty_marks_returns_same_mesh():
    """Test an empty mark set leaves the mesh untouched."""
    mesh = build_uniform(2, 2)
    assert refine(mesh, []) is mesh


def test_refine_rejects_stale_ids():
    """Test marking a non-leaf raises MeshError."""
    mesh = refine(build_uniform(2, 2), [0])
    with pytest.raises(MeshError):
        refine(mesh, [0])


def test_closure_keeps_one_irregular():
    """Test refining a fine corner leaf twice pulls in coarser neighbours."""
    mesh = refine(build_uniform(2, 2), [0])
    sw = int(mesh.children[0, 0])
    mesh = refine(mesh, [sw])
    ne_child = int(mesh.children[0, 3])
    marks = close_marks(mesh, [ne_child])
    # The NE child of element 0 touches level-0 elements 1 and 2
    assert {1, 2} <= set(marks)
    mesh = refine(mesh, [ne_child])
    assert is_one_irregular(mesh)


def test_closure_on_one_by_two_mesh():
    """Test refining the child next to the unrefined element also refines that element."""
    mesh = refine(build_uniform(2, 1), [0])
    se = int(mesh.children[0, 1])
    assert 1 in close_marks(mesh, [se])
    mesh = refine(mesh, [se])
    assert not mesh.is_leaf(1)
    assert mesh.n_leaves == 11
    assert is_one_irregular(mesh)


def test_neighbors_across_levels():
    """Test a coarse leaf sees two fine neighbours across a refined edge."""
    mesh = refine(build_uniform(2, 2), [0])
    east_of_0 = leaf_neighbors(mesh, 1)[3]  # west edge of element 1
    assert len(east_of_0) == 2
    child = int(mesh.children[0, 1])  # SE child of element 0
    assert leaf_neighbors(mesh, child)[1] == [1]
    assert leaf_neighbors(mesh, child)[0] == []


def test_leaf_neighbors_rejects_non_leaf():
    """Test leaf_neighbors only accepts leaves."""
    mesh = refine(build_uniform(2, 2), [0])
    with pytest.raises(MeshError):
        leaf_neighbors(mesh, 0)


def test_locate_points():
    """Test point location returns the containing leaf and reference coordinates."""
    mesh = refine(build_uniform(2, 2), [0])
    ids, ref = mesh.locate(np.array([[0.1, 0.1], [0.75, 0.75], [1.0, 1.0]]))
    assert ids[0] == mesh.children[0, 0]
    assert np.allclose(ref[0], [-0.2, -0.2])
    assert ids[1] == 3
    assert np.allclose(ref[1], [0.0, 0.0])
    assert np.allclose(ref[2], [1.0, 1.0])


def test_locate_keys_matches_locate():
    """Test exact lattice location agrees with physical location at cell centres."""
    mesh = refine(refine(build_uniform(2, 2), [0]), [4])
    centres = mesh.centroids()
    ids, _ = mesh.locate(centres)
    half = LATTICE_SIZE >> mesh.level[mesh.leaves]
    kx = mesh.ix[mesh.leaves] + half // 2
    ky = mesh.iy[mesh.leaves] + half // 2
    key_ids, ref = mesh.locate_keys(kx, ky)
    assert np.array_equal(ids, mesh.leaves)
    assert np.array_equal(key_ids, mesh.leaves)
    assert np.allclose(ref, 0.0)


def test_domain_scaling():
    """Test physical coordinates follow the domain rectangle."""
    mesh = build_uniform(2, 1, Domain(-1.0, 3.0, 0.0, 2.0))
    x0, x1, y0, y1 = mesh.bounds()
    assert np.allclose(x0, [-1.0, 1.0])
    assert np.allclose(x1, [1.0, 3.0])
    assert np.allclose(y1, 2.0)
