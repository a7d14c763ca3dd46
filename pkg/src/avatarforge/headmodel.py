"""Parametric head model: blendshapes, joint regression and linear blend skinning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import RiggedMesh


class RigError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera, OpenCV convention: x right, y down, looking along +z.

    ``x_cam = rotation @ x_world + translation``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 3.2]))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self) -> "Camera":
        if self.fx == 0 or self.fy == 0:
            raise RigError("degenerate camera: fx and fy must be nonzero")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise RigError("camera rotation is not orthonormal")
        return self

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel xy (N, 2), camera depth z (N,))."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return xy, z

    @classmethod
    def frontal(cls, resolution: int, distance: float = 3.2, focal_scale: float = 1.25) -> "Camera":
        f = focal_scale * resolution
        return cls(f, f, resolution / 2.0, resolution / 2.0,
                   np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, distance]))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


@dataclass
class PoseParams:
    shape_coeffs: np.ndarray
    expr_coeffs: np.ndarray
    joint_rotations: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.shape_coeffs = np.asarray(self.shape_coeffs, dtype=np.float64).reshape(-1)
        self.expr_coeffs = np.asarray(self.expr_coeffs, dtype=np.float64).reshape(-1)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def zeros(cls, rig: RiggedMesh, n_shape: int, camera: Camera) -> "PoseParams":
        kb = rig.blendshapes.shape[0]
        return cls(np.zeros(n_shape), np.zeros(kb - n_shape), np.zeros((rig.n_joints, 3)), camera)

    def to_dict(self) -> dict:
        return {"shape_coeffs": self.shape_coeffs.tolist(), "expr_coeffs": self.expr_coeffs.tolist(),
                "joint_rotations": self.joint_rotations.tolist(), "camera": self.camera.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseParams":
        return cls(d["shape_coeffs"], d["expr_coeffs"], d["joint_rotations"], Camera(**d["camera"]))


def save_params(params: PoseParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2))


def load_params(path) -> PoseParams:
    return PoseParams.from_dict(json.loads(Path(path).read_text()))


def check_params(rig: RiggedMesh, params: PoseParams) -> None:
    kb = rig.blendshapes.shape[0]
    if len(params.shape_coeffs) + len(params.expr_coeffs) != kb:
        raise RigError(
            f"coefficient count {len(params.shape_coeffs)} + {len(params.expr_coeffs)} != {kb} blendshapes"
        )
    if params.joint_rotations.shape != (rig.n_joints, 3):
        raise RigError(f"joint_rotations must be {rig.n_joints} x 3, got {params.joint_rotations.shape}")


# -- blendshapes and joints ----------------------------------------------------

def apply_blendshapes(mesh: RiggedMesh, params: PoseParams) -> np.ndarray:
    """template + sum_k c_k * blendshape_k, shape coefficients first."""
    check_params(mesh, params)
    coeffs = np.concatenate([params.shape_coeffs, params.expr_coeffs])
    return mesh.vertices + np.tensordot(coeffs, mesh.blendshapes, axes=1)


def shape_offsets(mesh: RiggedMesh, params: PoseParams) -> np.ndarray:
    ks = len(params.shape_coeffs)
    return np.tensordot(params.shape_coeffs, mesh.blendshapes[:ks], axes=1)


def expression_offsets(mesh: RiggedMesh, params: PoseParams) -> np.ndarray:
    ks = len(params.shape_coeffs)
    return np.tensordot(params.expr_coeffs, mesh.blendshapes[ks:], axes=1)


def regress_joints(mesh: RiggedMesh, shaped_vertices: np.ndarray) -> np.ndarray:
    shaped_vertices = np.asarray(shaped_vertices)
    if shaped_vertices.shape != (mesh.joint_regressor.shape[1], 3):
        raise RigError(
            f"vertices {shaped_vertices.shape} do not match regressor {mesh.joint_regressor.shape}"
        )
    return mesh.joint_regressor @ shaped_vertices


# -- skinning ------------------------------------------------------------------

def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for (..., 3) axis-angle vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    k = aa / safe
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def kinematic_order(parents: np.ndarray) -> list[int]:
    """Joints ordered parents-first; raises on cycles or bad indices."""
    parents = np.asarray(parents)
    J = len(parents)
    order, placed = [], np.zeros(J, dtype=bool)
    for _ in range(J):
        progressed = False
        for j in range(J):
            p = parents[j]
            if placed[j]:
                continue
            if p != -1 and not 0 <= p < J:
                raise RigError(f"joint {j} has invalid parent {p}")
            if p == -1 or placed[p]:
                order.append(j)
                placed[j] = True
                progressed = True
        if placed.all():
            return order
        if not progressed:
            break
    raise RigError("joint parent graph contains a cycle")


def joint_world_transforms(joints: np.ndarray, rotations: np.ndarray, parents: np.ndarray):
    """World (R, t) per joint: G_j = G_parent o [x -> R_j (x - j) + j]."""
    J = len(joints)
    Rl = axis_angle_to_matrix(rotations)
    Rw = np.zeros((J, 3, 3))
    tw = np.zeros((J, 3))
    for j in kinematic_order(parents):
        t_local = joints[j] - Rl[j] @ joints[j]
        p = parents[j]
        if p == -1:
            Rw[j], tw[j] = Rl[j], t_local
        else:
            Rw[j] = Rw[p] @ Rl[j]
            tw[j] = Rw[p] @ t_local + tw[p]
    return Rw, tw


def skinning_transforms(skin_weights, joints, joint_rotations, joint_parents):
    """Per-vertex blended affine map (A (N,3,3), b (N,3)) so posed = A v + b."""
    Rw, tw = joint_world_transforms(np.asarray(joints), np.asarray(joint_rotations), joint_parents)
    A = np.einsum("nj,jab->nab", skin_weights, Rw)
    b = skin_weights @ tw
    return A, b


def lbs(shaped_vertices, skin_weights, joints, joint_rotations, joint_parents) -> np.ndarray:
    A, b = skinning_transforms(skin_weights, joints, joint_rotations, joint_parents)
    return np.einsum("nab,nb->na", A, shaped_vertices) + b


def animate(vertices, rig: RiggedMesh, params: PoseParams, joints=None) -> RiggedMesh:
    """Canonical (template + shape + dV) -> add expression offsets -> LBS.

    ``joints`` defaults to the rig's regressor applied to the rig's own
    canonical vertices, so a displacement field does not drag the skeleton.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape != rig.vertices.shape:
        raise RigError(f"vertex array {vertices.shape} does not match rig {rig.vertices.shape}")
    check_params(rig, params)
    if joints is None:
        joints = regress_joints(rig, rig.vertices)
    expressed = vertices + expression_offsets(rig, params)
    posed = lbs(expressed, rig.skin_weights, joints, params.joint_rotations, rig.joint_parents)
    return rig.with_vertices(posed)
