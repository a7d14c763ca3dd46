import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge.checks import geometry_check
from avatarforge.mesh import (
    MeshError,
    RiggedMesh,
    is_consistently_oriented,
    is_edge_manifold,
    mesh_equal,
    unique_edges,
    validate_mesh,
)
from avatarforge.remesh import (
    NonOrientableError,
    Provenance,
    RegressorFitError,
    fix_orientation,
    orientation_flips,
    refit_joint_regressor,
    remove_invalid_faces,
    split_long_edges,
    topology_correct,
    transfer_attributes,
)


def octahedron(scale=1.0) -> RiggedMesh:
    V = scale * np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1.0]])
    F = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    n = len(V)
    W = np.zeros((n, 2))
    W[:, 0] = np.clip(V[:, 1] / scale + 1, 0, 2) / 2
    W[:, 1] = 1 - W[:, 0]
    R = np.full((2, n), 1.0 / n)
    R[1] = 0
    R[1, [2, 4]] = 0.5
    B = np.stack([V * 0.1, np.c_[V[:, 1], np.zeros(n), np.zeros(n)]])
    return validate_mesh(RiggedMesh(V, F, (V[:, :2] / scale + 1) / 2, W, B, R, np.arange(n) % 6,
                                    np.array([-1, 0])))


def edge_max(m):
    e, _ = unique_edges(m.faces)
    return np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1).max()


def test_split_pass_subdivides_every_long_edge():
    m = octahedron()
    out, prov = split_long_edges(m, 1.0, return_provenance=True)
    # every edge has length sqrt(2), so all 12 get a midpoint and each face becomes 4
    assert out.n_vertices == 6 + 12
    assert out.n_faces == 32
    assert is_consistently_oriented(out.faces) and is_edge_manifold(out.faces)
    assert np.allclose(prov.apply(m.vertices), out.vertices)


def test_split_transfers_attributes_linearly():
    m = octahedron()
    out, prov = split_long_edges(m, 1.0, return_provenance=True)
    # blendshapes and uvs are linear in the parents, skin weights renormalized convex blends
    assert np.allclose(out.blendshapes, np.stack([prov.apply(b) for b in m.blendshapes]))
    assert np.allclose(out.uv, prov.apply(m.uv))
    assert np.allclose(out.skin_weights.sum(axis=1), 1.0, atol=1e-12)
    # original vertices keep their attributes bit-for-bit
    assert np.array_equal(out.skin_weights[:6], m.skin_weights)
    assert np.array_equal(out.part_labels[:6], m.part_labels)


def test_split_preserves_regressed_joints():
    m = octahedron()
    J = m.joint_regressor @ m.vertices
    out = split_long_edges(m, 0.5)
    assert np.abs(out.joint_regressor @ out.vertices - J).max() < 1e-9
    assert np.allclose(out.joint_regressor.sum(axis=1), 1.0)


def test_compliant_mesh_is_returned_unchanged():
    m = octahedron()
    out, prov = topology_correct(m, 2.0, return_provenance=True)
    assert mesh_equal(out, m)
    assert prov.is_identity()


def test_topology_correct_converges_below_epsilon_and_is_idempotent():
    m = octahedron()
    out = topology_correct(m, 0.3)
    assert edge_max(out) <= 0.3
    assert mesh_equal(topology_correct(out, 0.3), out)


def test_remove_invalid_faces_drops_degenerate_and_duplicates():
    m = octahedron()
    m.faces = np.vstack([m.faces, m.faces[:1][:, ::-1]])  # duplicate vertex set
    out, remap = remove_invalid_faces(m)
    assert out.n_faces == 8
    assert (remap >= 0).all()
    z = octahedron()
    z.vertices[4] = z.vertices[0]   # collapse: faces touching both become zero-area
    out, remap = remove_invalid_faces(z)
    assert out.n_faces < 8


def test_orientation_repair_restores_consistency():
    m = octahedron()
    m.faces[[1, 6]] = m.faces[[1, 6]][:, ::-1]
    assert not is_consistently_oriented(m.faces)
    flips = orientation_flips(m.faces)
    assert flips.sum() == 2 and flips[1] and flips[6]
    assert np.array_equal(fix_orientation(m).faces, octahedron().faces)


def test_non_orientable_strip_raises():
    # Moebius strip from 5 quads
    n = 5
    F = []
    for i in range(n):
        a, b = i, (i + 1) % n
        top_a, top_b = a + n, b + n
        if i == n - 1:
            top_b, b = b, top_b   # the half twist swaps the last rung
        F += [[a, b, top_b], [a, top_b, top_a]]
    with pytest.raises(NonOrientableError):
        orientation_flips(np.array(F))


def test_topology_correct_rejects_bad_input():
    m = octahedron()
    with pytest.raises(ValueError):
        topology_correct(m, 0.0)
    bad = m.copy()
    bad.faces = np.vstack([bad.faces, [[0, 2, 1]]])   # third face on edge 0-2
    with pytest.raises(MeshError):
        topology_correct(bad, 1.0)


def test_refit_regressor_reproduces_joints():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(50, 3))
    J = rng.normal(scale=0.3, size=(3, 3))
    R = refit_joint_regressor(J, V)
    # the ridge term trades a tiny bias for conditioning
    assert np.abs(R @ V - J).max() < 1e-6
    assert np.allclose(R.sum(axis=1), 1.0)
    assert (np.count_nonzero(R, axis=1) <= 16).all()
    exact = refit_joint_regressor(J, V, ridge=0.0)
    assert np.abs(exact @ V - J).max() < 1e-12


def test_refit_regressor_singular_support():
    V = np.zeros((6, 3))
    V[:, 0] = np.arange(6)   # collinear: the 3x3 system is rank 1
    with pytest.raises(RegressorFitError) as e:
        refit_joint_regressor(np.array([[0.0, 1.0, 0.0]]), V, ridge=0.0)
    assert e.value.condition > 1e12 or not np.isfinite(e.value.condition)


def test_transfer_attributes_rejects_shape_mismatch():
    m = octahedron()
    with pytest.raises(MeshError):
        transfer_attributes(m, np.zeros((3, 3)), Provenance.identity(6))


def test_provenance_composition():
    m = octahedron()
    _, p1 = split_long_edges(m, 1.0, return_provenance=True)
    assert p1.then(Provenance.identity(p1.shape[0])).shape == p1.shape
    ex = p1.exact_sources()
    assert np.array_equal(ex[:6], np.arange(6)) and (ex[6:] == -1).all()


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000))
def test_random_deformations_satisfy_invariants(seed):
    s = geometry_check(seed)
    assert s["manifold"] and s["oriented"] and s["idempotent"]
    assert s["weight_err"] <= 1e-9
    assert s["joint_err"] <= 1e-6
    assert s["max_edge_ratio"] <= 1.0
