"""Topology correction with rig-attribute transfer.

Every operation that changes connectivity also returns a *provenance*
matrix ``P`` (new vertices x old vertices) whose rows are barycentric
weights on one old face, so positions, rig attributes and per-vertex network
state can be carried over as ``P @ x``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import (
    MeshError,
    RiggedMesh,
    face_areas,
    is_edge_manifold,
    unique_edges,
    validate_mesh,
)


class NonOrientableError(MeshError):
    code = "non_orientable"


class RegressorFitError(MeshError):
    """The regressor system is singular; ``condition`` holds the estimate."""

    code = "singular_regressor"

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


@dataclass
class Provenance:
    """Sparse ``n_new x n_old`` barycentric anchor matrix."""

    matrix: sp.csr_matrix

    @classmethod
    def identity(cls, n: int) -> "Provenance":
        return cls(sp.identity(n, format="csr"))

    @classmethod
    def from_anchors(cls, face_ids, bary, old_faces, n_old: int) -> "Provenance":
        face_ids = np.asarray(face_ids, dtype=np.int64)
        bary = np.asarray(bary, dtype=np.float64)
        if np.any(face_ids < 0) or np.any(face_ids >= len(old_faces)):
            raise MeshError("provenance anchor refers to a missing face", "anchor_missing")
        cols = np.asarray(old_faces)[face_ids].reshape(-1)
        rows = np.repeat(np.arange(len(face_ids)), 3)
        M = sp.csr_matrix((bary.reshape(-1), (rows, cols)), shape=(len(face_ids), n_old))
        M.sum_duplicates()
        M.eliminate_zeros()
        return cls(M)

    @property
    def shape(self):
        return self.matrix.shape

    def then(self, later: "Provenance") -> "Provenance":
        """Provenance of applying ``self`` and then ``later``."""
        M = (later.matrix @ self.matrix).tocsr()
        M.eliminate_zeros()
        return Provenance(M)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        flat = x.reshape(x.shape[0], -1)
        return np.asarray(self.matrix @ flat).reshape((self.shape[0],) + x.shape[1:])

    def is_identity(self) -> bool:
        n, m = self.shape
        if n != m:
            return False
        d = self.matrix - sp.identity(n, format="csr")
        return d.count_nonzero() == 0

    def dominant_source(self) -> np.ndarray:
        """Old vertex with the largest weight per row (ties -> lowest index)."""
        M = self.matrix.tocsr()
        M.sort_indices()
        out = np.empty(M.shape[0], dtype=np.int64)
        for i in range(M.shape[0]):
            lo, hi = M.indptr[i], M.indptr[i + 1]
            if lo == hi:
                raise MeshError(f"new vertex {i} has no anchor", "anchor_missing")
            out[i] = M.indices[lo + int(np.argmax(M.data[lo:hi]))]
        return out

    def exact_sources(self) -> np.ndarray:
        """Old vertex index for rows that copy one old vertex exactly, else -1."""
        M = self.matrix.tocsr()
        counts = np.diff(M.indptr)
        out = np.full(M.shape[0], -1, dtype=np.int64)
        one = np.flatnonzero(counts == 1)
        vals = M.data[M.indptr[one]]
        sel = one[vals == 1.0]
        out[sel] = M.indices[M.indptr[sel]]
        return out


# -- attribute transfer ----------------------------------------------------------

def transfer_attributes(old: RiggedMesh, new_vertices, provenance) -> dict:
    """Barycentric transfer of skin weights, blendshape offsets, UVs and labels.

    ``provenance`` is a :class:`Provenance` or a ``(face_ids, bary)`` pair of
    anchors on ``old``.
    """
    if not isinstance(provenance, Provenance):
        face_ids, bary = provenance
        provenance = Provenance.from_anchors(face_ids, bary, old.faces, old.n_vertices)
    if provenance.shape != (len(new_vertices), old.n_vertices):
        raise MeshError(
            f"provenance {provenance.shape} does not map {old.n_vertices} -> {len(new_vertices)} vertices",
            "anchor_missing",
        )
    exact = provenance.exact_sources()
    W = provenance.apply(old.skin_weights)
    W = np.maximum(W, 0.0)
    W = W / W.sum(axis=1, keepdims=True)
    B = np.stack([provenance.apply(b) for b in old.blendshapes]) if len(old.blendshapes) else \
        np.zeros((0, len(new_vertices), 3))
    uv = np.clip(provenance.apply(old.uv), 0.0, 1.0)
    # rows that copy an old vertex keep its attributes bit-for-bit
    hit = exact >= 0
    W[hit] = old.skin_weights[exact[hit]]
    B[:, hit] = old.blendshapes[:, exact[hit]]
    uv[hit] = old.uv[exact[hit]]
    labels = old.part_labels[provenance.dominant_source()]
    return {"skin_weights": W, "blendshapes": B, "uv": uv, "part_labels": labels}


# -- joint regressor -------------------------------------------------------------

def refit_joint_regressor(canonical_joints, new_template, ridge: float = 1e-6, k: int = 16,
                          prior: np.ndarray | None = None, max_condition: float = 1e12) -> np.ndarray:
    """Locally supported regressor rows that reproduce ``canonical_joints``.

    Each row is the minimum-norm correction of a prior row (the transferred
    old regressor, or uniform weights over the support) subject to summing to
    one, restricted to the ``k`` nearest vertices plus the prior's support.
    The 3 x 3 normal system is ridge-regularized. With exactly four affinely
    independent support vertices the square system is solved directly.
    """
    J = np.asarray(canonical_joints, dtype=np.float64)
    V = np.asarray(new_template, dtype=np.float64)
    n = len(V)
    if n < len(J):
        raise MeshError(f"need at least {len(J)} vertices to regress {len(J)} joints, got {n}", "shape")
    tree = cKDTree(V)
    R = np.zeros((len(J), n))
    for j, target in enumerate(J):
        _, near = tree.query(target, k=min(k, n))
        support = np.atleast_1d(near)
        w0 = np.zeros(n)
        if prior is not None and prior[j].sum() != 0:
            support = np.union1d(support, np.flatnonzero(prior[j]))
            w0 = prior[j] / prior[j].sum()
        else:
            w0[support] = 1.0 / len(support)
        S = np.sort(support)
        VS = V[S]
        if len(S) == 4:
            A = np.vstack([VS.T, np.ones(4)])
            cond = np.linalg.cond(A)
            if not np.isfinite(cond) or cond > max_condition:
                raise RegressorFitError(f"joint {j}: support is affinely degenerate (cond {cond:.3g})", cond)
            R[j, S] = np.linalg.solve(A, np.append(target, 1.0))
            continue
        A = (VS - VS.mean(axis=0)).T  # 3 x s, rows orthogonal to the ones vector
        G = A @ A.T + ridge * np.eye(3)
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > max_condition:
            raise RegressorFitError(f"joint {j}: regressor system is singular (cond {cond:.3g})", cond)
        r = target - w0 @ V
        w = w0.copy()
        w[S] += A.T @ np.linalg.solve(G, r)
        R[j] = w
    return R


# -- connectivity edits ----------------------------------------------------------

def _split_pass(V: np.ndarray, F: np.ndarray, epsilon: float):
    """Connectivity part of one split pass: ``(V', F', provenance)`` or None if compliant."""
    n = len(V)
    if len(F) == 0:
        return None
    edges, fe = unique_edges(F)
    lengths = np.linalg.norm(V[edges[:, 1]] - V[edges[:, 0]], axis=1)
    long = lengths > epsilon
    if not long.any():
        return None
    k = int(long.sum())
    mid_id = np.full(len(edges), -1, dtype=np.int64)
    mid_id[long] = n + np.arange(k)
    V2 = np.vstack([V, 0.5 * (V[edges[long, 0]] + V[edges[long, 1]])])

    new_faces = []
    for f, e in zip(F, fe):
        m = mid_id[e]  # m[i] sits on edge (f[i], f[i+1])
        s = m >= 0
        cnt = int(s.sum())
        if cnt == 0:
            new_faces.append(f)
        elif cnt == 3:
            a, b, c = f
            ab, bc, ca = m
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        elif cnt == 1:
            i = int(np.flatnonzero(s)[0])
            a, b, c = f[i], f[(i + 1) % 3], f[(i + 2) % 3]
            new_faces += [(a, m[i], c), (m[i], b, c)]
        else:
            i = int(np.flatnonzero(~s)[0])  # unsplit edge (a, b); c is the shared corner
            a, b, c = f[i], f[(i + 1) % 3], f[(i + 2) % 3]
            mbc, mca = m[(i + 1) % 3], m[(i + 2) % 3]
            new_faces.append((mca, mbc, c))
            # remaining quad a, b, mbc, mca takes the shorter diagonal
            if np.linalg.norm(V2[a] - V2[mbc]) <= np.linalg.norm(V2[b] - V2[mca]):
                new_faces += [(a, b, mbc), (a, mbc, mca)]
            else:
                new_faces += [(a, b, mca), (b, mbc, mca)]
    F2 = np.array(new_faces, dtype=np.int64).reshape(-1, 3)

    rows = np.concatenate([np.arange(n), np.repeat(n + np.arange(k), 2)])
    cols = np.concatenate([np.arange(n), edges[long].reshape(-1)])
    vals = np.concatenate([np.ones(n), np.full(2 * k, 0.5)])
    prov = Provenance(sp.csr_matrix((vals, (rows, cols)), shape=(n + k, n)))
    return V2, F2, prov


def split_long_edges(mesh: RiggedMesh, epsilon: float, return_provenance: bool = False):
    """One pass of midpoint subdivision of every edge longer than ``epsilon``.

    Faces with one split edge become two triangles, faces with three become
    four; with two, the corner between the split edges is cut off and the
    remaining quad takes its shorter diagonal. Orientation is preserved and
    the joint regressor is refit so the regressed joints do not move.
    """
    res = _split_pass(mesh.vertices, mesh.faces, epsilon)
    if res is None:
        out, prov = mesh.copy(), Provenance.identity(mesh.n_vertices)
    else:
        V2, F2, prov = res
        out = _rebuild(mesh, V2, F2, prov)
    return (out, prov) if return_provenance else out


def _face_adjacency(faces: np.ndarray):
    """Pairs of faces sharing an edge, with whether they agree on orientation."""
    edges, fe = unique_edges(faces)
    owner = [[] for _ in range(len(edges))]
    for fi, row in enumerate(fe):
        for slot, e in enumerate(row):
            owner[e].append((fi, slot))
    pairs = []
    for e, own in enumerate(owner):
        if len(own) > 2:
            raise MeshError("edge shared by more than two faces", "non_manifold")
        if len(own) == 2:
            (f0, s0), (f1, s1) = own
            d0 = faces[f0][s0], faces[f0][(s0 + 1) % 3]
            d1 = faces[f1][s1], faces[f1][(s1 + 1) % 3]
            pairs.append((f0, f1, d0 != d1))  # consistent when traversed oppositely
    return pairs


def orientation_flips(faces: np.ndarray) -> np.ndarray:
    """Boolean per face: flip it so every component is consistently wound,
    keeping the majority winding of each component."""
    M = len(faces)
    nbrs = [[] for _ in range(M)]
    for f0, f1, consistent in _face_adjacency(faces):
        nbrs[f0].append((f1, consistent))
        nbrs[f1].append((f0, consistent))
    flip = np.zeros(M, dtype=bool)
    seen = np.zeros(M, dtype=bool)
    for seed in range(M):
        if seen[seed]:
            continue
        comp = [seed]
        seen[seed] = True
        queue = deque([seed])
        while queue:
            f = queue.popleft()
            for g, consistent in nbrs[f]:
                want = flip[f] if consistent else not flip[f]
                if not seen[g]:
                    seen[g] = True
                    flip[g] = want
                    comp.append(g)
                    queue.append(g)
                elif flip[g] != want:
                    raise NonOrientableError(f"component containing face {seed} is not orientable")
        comp = np.array(comp)
        if flip[comp].sum() * 2 > len(comp):
            flip[comp] = ~flip[comp]
    return flip


def fix_orientation(mesh: RiggedMesh) -> RiggedMesh:
    """Consistent winding per connected component (majority orientation kept)."""
    flip = orientation_flips(mesh.faces)
    out = mesh.copy()
    out.faces[flip] = out.faces[flip][:, ::-1]
    return out


def invalid_face_mask(vertices: np.ndarray, faces: np.ndarray, area_eps: float) -> np.ndarray:
    f = np.asarray(faces)
    bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    bad |= face_areas(vertices, f) < area_eps
    key = np.sort(f, axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    dup = np.ones(len(f), dtype=bool)
    dup[first] = False
    # keep the first occurrence among the valid faces
    bad |= dup
    return bad


def remove_invalid_faces(mesh: RiggedMesh, area_eps: float = 1e-10, return_provenance: bool = False):
    """Drop faces with repeated indices, area below ``area_eps`` or duplicate vertex sets.

    Unreferenced vertices are pruned. Returns ``(mesh, remap)`` where
    ``remap[old] = new`` or -1; with ``return_provenance`` the provenance is
    appended.
    """
    V, F = mesh.vertices, mesh.faces
    keep_f = ~invalid_face_mask(V, F, area_eps) if len(F) else np.zeros(0, dtype=bool)
    F2 = F[keep_f]
    used = np.zeros(len(V), dtype=bool)
    used[F2.reshape(-1)] = True
    remap = np.full(len(V), -1, dtype=np.int64)
    remap[used] = np.arange(used.sum())
    old_ids = np.flatnonzero(used)
    prov = Provenance(sp.csr_matrix((np.ones(len(old_ids)), (np.arange(len(old_ids)), old_ids)),
                                    shape=(len(old_ids), len(V))))
    if keep_f.all() and used.all():
        out = mesh.copy()
    else:
        out = _rebuild(mesh, V[used], remap[F2], prov)
    return (out, remap, prov) if return_provenance else (out, remap)


def _rebuild(old: RiggedMesh, vertices, faces, prov: Provenance, joints=None, template=None) -> RiggedMesh:
    """New mesh with attributes transferred through ``prov`` and a refit regressor."""
    attrs = transfer_attributes(old, vertices, prov)
    ref = old.vertices if template is None else template
    if joints is None:
        joints = old.joint_regressor @ ref
    new_ref = vertices if template is None else prov.apply(template)
    prior = _transfer_prior(old.joint_regressor, prov)
    R = refit_joint_regressor(joints, new_ref, prior=prior)
    return RiggedMesh(vertices=vertices, faces=faces, joint_regressor=R,
                      joint_parents=old.joint_parents.copy(), **attrs)


def _transfer_prior(R: np.ndarray, prov: Provenance) -> np.ndarray:
    """Old regressor rows moved onto new vertices that copy an old vertex."""
    src = prov.exact_sources()
    hit = np.flatnonzero(src >= 0)
    out = np.zeros((R.shape[0], prov.shape[0]))
    out[:, hit] = R[:, src[hit]]
    return out


# -- the full correction ---------------------------------------------------------

def topology_correct(mesh: RiggedMesh, epsilon: float, area_eps: float = 1e-10,
                     template: np.ndarray | None = None, joints: np.ndarray | None = None,
                     max_passes: int = 64, return_provenance: bool = False):
    """Split long edges to convergence, drop invalid faces, fix winding, refit joints.

    ``template`` gives the rest positions the joint regressor acts on
    (defaults to ``mesh.vertices``); ``joints`` the positions to preserve
    (defaults to ``joint_regressor @ template``).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not is_edge_manifold(mesh.faces):
        raise MeshError("topology_correct needs an edge-manifold mesh", "non_manifold")
    ref = mesh.vertices if template is None else np.asarray(template, dtype=np.float64)
    if joints is None:
        joints = mesh.joint_regressor @ ref

    V, F = mesh.vertices, mesh.faces
    prov = Provenance.identity(len(V))
    for _ in range(max_passes):
        res = _split_pass(V, F, epsilon)
        if res is None:
            break
        V, F, p = res
        prov = prov.then(p)
    else:
        raise MeshError(f"edge splitting did not converge in {max_passes} passes", "no_convergence")

    bad = invalid_face_mask(V, F, area_eps) if len(F) else np.zeros(0, dtype=bool)
    F = F[~bad]
    used = np.zeros(len(V), dtype=bool)
    used[F.reshape(-1)] = True
    if not used.all():
        ids = np.flatnonzero(used)
        remap = np.full(len(V), -1, dtype=np.int64)
        remap[ids] = np.arange(len(ids))
        sel = Provenance(sp.csr_matrix((np.ones(len(ids)), (np.arange(len(ids)), ids)), shape=(len(ids), len(V))))
        prov = prov.then(sel)
        V, F = V[ids], remap[F]
    flip = orientation_flips(F)
    F = F.copy()
    F[flip] = F[flip][:, ::-1]

    if prov.is_identity() and not flip.any():
        out = mesh.copy()
    elif prov.is_identity():
        out = mesh.copy()
        out.faces = F
    else:
        out = _rebuild(mesh, V, F, prov, joints=joints, template=ref)
    validate_mesh(out)
    return (out, prov) if return_provenance else out
