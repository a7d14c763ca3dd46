"""The rigged triangle mesh and its invariant checks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

PART_NAMES = ("face", "hair", "neck", "eyeball", "eyelid", "other")
PART_INDEX = {name: i for i, name in enumerate(PART_NAMES)}


class MeshError(ValueError):
    """Base class; ``code`` identifies the failure kind."""

    code = "mesh_error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class MeshParseError(MeshError):
    code = "parse_error"


class MeshInvariantError(MeshError):
    code = "invariant_violation"


@dataclass
class RiggedMesh:
    """Triangle mesh with per-vertex UVs and an LBS rig.

    ``part_labels`` holds integer indices into :data:`PART_NAMES`.
    ``blendshapes`` is ``(K_b, N, 3)``; the first rows are shape components,
    the rest expression components (the split is decided by the pose params).
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    skin_weights: np.ndarray
    blendshapes: np.ndarray
    joint_regressor: np.ndarray
    part_labels: np.ndarray
    joint_parents: np.ndarray = field(default_factory=lambda: np.array([-1]))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.blendshapes = np.asarray(self.blendshapes, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_joints(self) -> int:
        return self.skin_weights.shape[1]

    def with_vertices(self, vertices) -> "RiggedMesh":
        return replace(self, vertices=np.array(vertices, dtype=np.float64))

    def copy(self) -> "RiggedMesh":
        return RiggedMesh(**{k: np.array(getattr(self, k)) for k in self.__dataclass_fields__})


def mesh_equal(a: RiggedMesh, b: RiggedMesh, atol: float = 0.0) -> bool:
    if a.faces.shape != b.faces.shape or not np.array_equal(a.faces, b.faces):
        return False
    if not np.array_equal(a.part_labels, b.part_labels):
        return False
    for name in ("vertices", "uv", "skin_weights", "blendshapes", "joint_regressor"):
        x, y = getattr(a, name), getattr(b, name)
        if x.shape != y.shape or not np.allclose(x, y, rtol=0.0, atol=atol):
            return False
    return np.array_equal(a.joint_parents, b.joint_parents)


# -- topology helpers ------------------------------------------------------

def face_edges(faces: np.ndarray) -> np.ndarray:
    """Directed edges (M*3, 2), ordered (f0->f1, f1->f2, f2->f0) per face."""
    f = np.asarray(faces)
    return np.stack([f, np.roll(f, -1, axis=1)], axis=2).reshape(-1, 2)


def unique_edges(faces: np.ndarray):
    """Undirected unique edges (E, 2) with per-face edge indices (M, 3)."""
    d = face_edges(faces)
    und = np.sort(d, axis=1)
    edges, inverse = np.unique(und, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def edge_lengths(vertices: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def is_edge_manifold(faces: np.ndarray) -> bool:
    if len(faces) == 0:
        return True
    _, inv = unique_edges(faces)
    return int(np.bincount(inv.reshape(-1)).max()) <= 2


def is_consistently_oriented(faces: np.ndarray) -> bool:
    """Every directed edge appears at most once (interior edges once per direction)."""
    if len(faces) == 0:
        return True
    d = face_edges(faces)
    _, counts = np.unique(d, axis=0, return_counts=True)
    return bool(counts.max() <= 1)


def euler_characteristic(faces: np.ndarray, n_vertices: int | None = None) -> int:
    used = np.unique(faces) if n_vertices is None else np.arange(n_vertices)
    edges, _ = unique_edges(faces)
    return int(len(used) - len(edges) + len(faces))


def vertex_adjacency(faces: np.ndarray, n: int) -> sp.csr_matrix:
    """Symmetric 0/1 one-ring adjacency."""
    edges, _ = unique_edges(faces)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    A.data[:] = 1.0
    return A


def weld_map(vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group exactly coincident vertices (UV-seam duplicates).

    Returns ``(rep, inverse)``: ``rep[g]`` is the lowest vertex index in group
    ``g`` and ``inverse[i]`` the group of vertex ``i``.
    """
    _, first, inverse = np.unique(vertices, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # renumber groups by their lowest member so the map is order-stable
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return first[order], rank[inverse]


def weld_average_matrix(vertices: np.ndarray) -> sp.csr_matrix:
    """N x N matrix averaging each vertex over its coincident group."""
    _, inv = weld_map(vertices)
    n = len(inv)
    counts = np.bincount(inv)
    G = sp.csr_matrix((np.ones(n), (np.arange(n), inv)), shape=(n, len(counts)))
    return (G @ sp.diags(1.0 / counts) @ G.T).tocsr()


# -- validation ------------------------------------------------------------

def validate_mesh(mesh: RiggedMesh, weight_tol: float = 1e-9) -> RiggedMesh:
    """Raise :class:`MeshInvariantError` (with a specific ``code``) on any violation."""
    n = mesh.n_vertices
    if mesh.vertices.ndim != 2 or mesh.vertices.shape[1] != 3:
        raise MeshInvariantError(f"vertices must be N x 3, got {mesh.vertices.shape}", "shape")
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshInvariantError("non-finite vertex coordinates", "non_finite")
    f = mesh.faces
    if len(f) and (f.min() < 0 or f.max() >= n):
        raise MeshInvariantError("face index out of range", "index_range")
    if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise MeshInvariantError("face repeats a vertex index", "repeated_index")
    if not is_edge_manifold(f):
        raise MeshInvariantError("edge shared by more than two faces", "non_manifold")
    if mesh.uv.shape != (n, 2):
        raise MeshInvariantError(f"uv must be N x 2, got {mesh.uv.shape}", "shape")
    if np.any(mesh.uv < 0.0) or np.any(mesh.uv > 1.0):
        raise MeshInvariantError("uv coordinate outside [0, 1]", "uv_range")
    W = mesh.skin_weights
    if W.ndim != 2 or W.shape[0] != n:
        raise MeshInvariantError(f"skin_weights must be N x J, got {W.shape}", "shape")
    if np.any(W < 0):
        raise MeshInvariantError("negative skin weight", "weights_negative")
    if np.any(np.abs(W.sum(axis=1) - 1.0) > weight_tol):
        raise MeshInvariantError("skin weight row does not sum to 1", "weights_row_sum")
    J = W.shape[1]
    if mesh.blendshapes.ndim != 3 or mesh.blendshapes.shape[1:] != (n, 3):
        raise MeshInvariantError(f"blendshapes must be K x N x 3, got {mesh.blendshapes.shape}", "shape")
    R = mesh.joint_regressor
    if R.shape != (J, n):
        raise MeshInvariantError(f"joint_regressor must be {J} x {n}, got {R.shape}", "shape")
    if np.any(np.abs(R.sum(axis=1) - 1.0) > weight_tol):
        raise MeshInvariantError("joint regressor row does not sum to 1", "regressor_row_sum")
    if mesh.part_labels.shape != (n,):
        raise MeshInvariantError("part_labels must have one entry per vertex", "shape")
    if len(mesh.part_labels) and (mesh.part_labels.min() < 0 or mesh.part_labels.max() >= len(PART_NAMES)):
        raise MeshInvariantError("unknown part label", "part_label")
    if mesh.joint_parents.shape != (J,):
        raise MeshInvariantError("joint_parents must have one entry per joint", "shape")
    return mesh
