"""Procedural stand-in for a FLAME-style head rig.

The surface starts as a latitude/longitude sphere whose rings carry a segment
count proportional to their radius, with alternate rings offset by half a
segment so triangles stay close to equilateral. The UV chart is the plain
(longitude, latitude) map with a single seam at the back of the head; seam
vertices are duplicated so every face has a valid per-vertex UV triangle.
"""

from __future__ import annotations

import numpy as np

from ..mesh import PART_INDEX, RiggedMesh, face_areas, validate_mesh

JOINT_NAMES = ("root", "neck", "jaw", "eyes")
JOINT_PARENTS = np.array([-1, 0, 1, 1])
N_SHAPE = 4
N_EXPR = 4

PROFILES = {
    "desk": {"n_rings": 29, "n_equator": 52},
    "paper": {"n_rings": 79, "n_equator": 137},
}

_EYE_PHI = 0.38
_EYE_LAT = 0.28  # radians above the equator
_EYEBALL_RADIUS = 0.16
_EYELID_RADIUS = 0.27


def smoothstep(a: float, b: float, x):
    t = np.clip((np.asarray(x, dtype=np.float64) - a) / (b - a), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _direction(phi: float, lat: float) -> np.ndarray:
    return np.array([np.cos(lat) * np.sin(phi), np.sin(lat), np.cos(lat) * np.cos(phi)])


def sphere_chart(n_rings: int, n_equator: int):
    """Unit-sphere points, per-vertex UVs and faces (outward CCW).

    ``u = (phi + pi) / 2pi`` with phi = 0 facing +z, ``v = theta / pi`` from
    the top pole.
    """
    uv = [(0.5, 0.0)]
    rings = []
    for i in range(n_rings):
        theta = (i + 1) * np.pi / (n_rings + 1)
        n = max(6, int(round(n_equator * np.sin(theta))))
        if i % 2 == 0:
            us = np.arange(n + 1) / n
        else:
            us = np.concatenate([[0.0], (np.arange(n) + 0.5) / n, [1.0]])
        start = len(uv)
        uv.extend((u, theta / np.pi) for u in us)
        rings.append(np.arange(start, start + len(us)))
    uv.append((0.5, 1.0))
    uv = np.array(uv)
    top, bottom = 0, len(uv) - 1

    phi = 2.0 * np.pi * uv[:, 0] - np.pi
    theta = np.pi * uv[:, 1]
    pts = np.stack([np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)], axis=1)
    # exact duplicates at the seam and poles
    pts[:, 0] = np.where(np.isclose(np.abs(phi), np.pi), 0.0, pts[:, 0])
    pts[[top, bottom]] = [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]

    faces = []
    first = rings[0]
    faces += [(top, first[k], first[k + 1]) for k in range(len(first) - 1)]
    for A, B in zip(rings[:-1], rings[1:]):
        # strip between two u-monotone rings: close each triangle with the shorter diagonal
        i = j = 0
        while i < len(A) - 1 or j < len(B) - 1:
            advance_a = j == len(B) - 1 or (
                i < len(A) - 1
                and np.linalg.norm(pts[A[i + 1]] - pts[B[j]]) <= np.linalg.norm(pts[A[i]] - pts[B[j + 1]])
            )
            if advance_a:
                faces.append((A[i], A[i + 1], B[j]))
                i += 1
            else:
                faces.append((A[i], B[j + 1], B[j]))
                j += 1
    last = rings[-1]
    faces += [(bottom, last[k + 1], last[k]) for k in range(len(last) - 1)]
    faces = np.array(faces, dtype=np.int64)

    v = pts[faces]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", normal, v.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    return pts, uv, faces, rings


def _head_shape(p: np.ndarray) -> np.ndarray:
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    neck = smoothstep(-0.2, -0.9, y)
    radial = 1.0 - 0.3 * neck
    out = np.stack([0.8 * x * radial, 0.98 * y, 0.88 * z * radial], axis=1)
    front = smoothstep(0.2, 0.7, z)
    nose = 0.07 * np.exp(-((x / 0.2) ** 2 + ((y + 0.05) / 0.28) ** 2)) * front
    chin = 0.04 * np.exp(-((x / 0.35) ** 2 + ((y + 0.45) / 0.2) ** 2)) * front
    crown = 0.04 * np.exp(-((x / 0.6) ** 2 + ((y - 0.25) / 0.4) ** 2)) * smoothstep(-0.1, -0.6, z)
    out[:, 2] += nose + chin - crown
    return out


def _part_labels(p: np.ndarray) -> np.ndarray:
    y, z = p[:, 1], p[:, 2]
    labels = np.full(len(p), PART_INDEX["other"])
    labels[(z > 0.45) & (y < 0.42)] = PART_INDEX["face"]
    labels[y < -0.62] = PART_INDEX["neck"]
    labels[(y > 0.42) | ((z < -0.35) & (y > 0.0))] = PART_INDEX["hair"]
    for phi in (_EYE_PHI, -_EYE_PHI):
        ang = np.arccos(np.clip(p @ _direction(phi, _EYE_LAT), -1.0, 1.0))
        labels[ang < _EYELID_RADIUS] = PART_INDEX["eyelid"]
        labels[ang < _EYEBALL_RADIUS] = PART_INDEX["eyeball"]
    return labels


def _jaw_mask(p: np.ndarray) -> np.ndarray:
    return smoothstep(-0.12, -0.4, p[:, 1]) * smoothstep(0.0, 0.45, p[:, 2])


def _skin_weights(p: np.ndarray, labels: np.ndarray) -> np.ndarray:
    root = smoothstep(-0.55, -0.88, p[:, 1])
    jaw = _jaw_mask(p) * (1.0 - root)
    W = np.stack([root, 1.0 - root - jaw, jaw, np.zeros(len(p))], axis=1)
    W[labels == PART_INDEX["eyeball"]] = [0.0, 0.0, 0.0, 1.0]
    return W / W.sum(axis=1, keepdims=True)


def _joint_regressor(p: np.ndarray, uv: np.ndarray, rings, labels) -> np.ndarray:
    n = len(p)
    R = np.zeros((len(JOINT_NAMES), n))

    def ring_near(y_target):
        ys = np.array([p[r[0], 1] for r in rings])
        ring = rings[int(np.argmin(np.abs(ys - y_target)))]
        return ring[uv[ring, 0] < 1.0]

    def nearest(direction, k):
        return np.argsort(-(p @ direction), kind="stable")[:k]

    supports = [
        ring_near(-0.85),
        ring_near(-0.5),
        np.concatenate([nearest(_direction(1.3, -0.35), 8), nearest(_direction(-1.3, -0.35), 8)]),
        np.flatnonzero(labels == PART_INDEX["eyeball"]),
    ]
    for j, s in enumerate(supports):
        R[j, s] = 1.0 / len(s)
    return R


def _gauss(p, cx, cy, sx, sy):
    return np.exp(-(((p[:, 0] - cx) / sx) ** 2 + ((p[:, 1] - cy) / sy) ** 2)) * smoothstep(0.1, 0.5, p[:, 2])


def _blendshapes(p: np.ndarray, P: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = len(p)
    B = np.zeros((N_SHAPE + N_EXPR, n, 3))
    low = smoothstep(-0.1, -0.5, p[:, 1])
    # shape block
    B[0, :, 0] = 0.08 * P[:, 0]
    B[1, :, 1] = 0.06 * P[:, 1]
    B[2, :, 0] = 0.08 * P[:, 0] * low
    B[3, :, 2] = 0.06 * _gauss(p, 0.0, 0.5, 0.45, 0.25)
    # expression block
    jaw = _jaw_mask(p)
    B[4] = np.outer(jaw, [0.0, -0.08, -0.02])
    for side in (1.0, -1.0):
        g = _gauss(p, side * 0.3, -0.35, 0.12, 0.1)
        B[5] += np.outer(g, [side * 0.03, 0.03, 0.0])
        g = _gauss(p, side * 0.3, 0.42, 0.18, 0.1)
        B[6] += np.outer(g, [0.0, 0.04, 0.0])
    lid = (labels == PART_INDEX["eyelid"]) & (p[:, 1] > np.sin(_EYE_LAT))
    B[7, lid, 1] = -0.03
    return B


def make_mini_rig(profile: str = "desk") -> RiggedMesh:
    """Deterministic 4-joint, 8-blendshape head rig."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    cfg = PROFILES[profile]
    p, uv, faces, rings = sphere_chart(cfg["n_rings"], cfg["n_equator"])
    P = _head_shape(p)
    labels = _part_labels(p)
    rig = RiggedMesh(
        vertices=P,
        faces=faces,
        uv=uv,
        skin_weights=_skin_weights(p, labels),
        blendshapes=_blendshapes(p, P, labels),
        joint_regressor=_joint_regressor(p, uv, rings, labels),
        part_labels=labels,
        joint_parents=JOINT_PARENTS.copy(),
    )
    assert face_areas(rig.vertices, rig.faces).min() > 0
    return validate_mesh(rig)
