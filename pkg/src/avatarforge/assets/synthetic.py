"""Synthetic ground-truth subjects rendered from the mini-rig.

A subject is the rig with sampled shape coefficients plus a smooth outward
hair displacement, painted with a procedural texture and posed in front of a
fixed frontal camera. The renders of that ground truth stand in for the photo
and the pretrained supervision networks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..headmodel import Camera, PoseParams, animate, load_params, regress_joints, save_params, shape_offsets
from ..mesh import PART_INDEX, PART_NAMES, RiggedMesh, validate_mesh
from ..raster import UvImage, rasterize, render_mask, render_normals, render_parts, shade_texture, vertex_normals
from .imageio import load_image, save_image
from .meshio import load_mesh, save_mesh
from .minirig import N_SHAPE

HAIR_LIMIT = 0.08
HAIR_PEAK = 0.06  # kept below the clip range so the ground truth is reachable


@dataclass
class SyntheticSubject:
    rig: RiggedMesh          # the template the pipeline starts from
    gt_mesh: RiggedMesh      # canonical ground truth (shape + hair displacement)
    gt_texture: UvImage
    pose_params: PoseParams
    input_image: np.ndarray  # H x W x 3
    fg_mask: np.ndarray      # H x W in {0, 1}
    normal_map: np.ndarray   # H x W x 3
    part_map: np.ndarray     # H x W x len(PART_NAMES)
    seed: int = 0

    @property
    def resolution(self) -> int:
        return self.input_image.shape[0]

    def canonical_start(self) -> np.ndarray:
        """Template with the subject's shape coefficients applied (V_0)."""
        return self.rig.vertices + shape_offsets(self.rig, self.pose_params)

    def joints(self) -> np.ndarray:
        return regress_joints(self.rig, self.canonical_start())

    def validate(self) -> "SyntheticSubject":
        validate_mesh(self.gt_mesh)
        self.gt_texture.validate()
        hw = self.input_image.shape[:2]
        for name in ("fg_mask", "normal_map", "part_map"):
            if getattr(self, name).shape[:2] != hw:
                raise ValueError(f"{name} resolution differs from the input image")
        m = self.fg_mask
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("fg_mask is not binary")
        norms = np.linalg.norm(self.normal_map, axis=-1)
        if np.abs(norms[m > 0] - 1.0).max(initial=0.0) > 1e-5 or np.any(norms[m == 0] != 0):
            raise ValueError("normal_map must be unit inside the mask and zero outside")
        return self


# -- procedural texture ----------------------------------------------------------

_GLYPHS = np.array([list(map(int, f"{g:015b}")) for g in (
    0b111101111101101, 0b110101110101110, 0b111100100100111, 0b110101101101110,
    0b111100110100111, 0b111100110100100, 0b101101111101101, 0b111010010010111,
    0b100100100100111, 0b101111111101101, 0b010101101101010, 0b111101111100100,
)]).reshape(-1, 5, 3)


def _glyph_strip(rng, width: int, height: int) -> np.ndarray:
    """Binary text-like row of 3x5 glyphs scaled to ``height`` pixels."""
    scale = max(1, height // 6)
    cell = 4 * scale
    out = np.zeros((height, width))
    for k in range(width // cell):
        g = np.kron(_GLYPHS[rng.integers(len(_GLYPHS))], np.ones((scale, scale)))
        out[scale // 2 : scale // 2 + g.shape[0], k * cell : k * cell + g.shape[1]] = g
    return out


def procedural_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency region colours plus stripes, a checker and glyph strips, 8-bit quantized."""
    v, u = (np.mgrid[0:size, 0:size] + 0.5) / size
    # region colours: a smooth random field seeded per subject
    base = np.zeros((size, size, 3))
    for c in range(3):
        for _ in range(3):
            fu, fv = rng.integers(1, 4, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            base[..., c] += rng.uniform(0.05, 0.15) * np.sin(2 * np.pi * fu * u + ph[0]) * np.cos(2 * np.pi * fv * v + ph[1])
    palette = rng.uniform(0.25, 0.75, size=(3, 3))
    band = np.clip((v - 0.35) / 0.1, 0, 1)  # top of the chart (hair) vs the rest
    tex = base + palette[0] * (1 - band)[..., None] + palette[1] * band[..., None]

    # stripes over the back half, a checker on the lower chart
    period = rng.uniform(0.04, 0.08)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (u + 0.3 * v) / period)
    back = (np.abs(u - 0.5) > 0.3)[..., None]
    tex = np.where(back, tex * (0.75 + 0.25 * stripes[..., None]), tex)
    n_check = int(rng.integers(8, 14))
    checker = ((np.floor(u * n_check) + np.floor(v * n_check)) % 2)[..., None]
    low = (v > 0.72)[..., None]
    tex = np.where(low, tex * (0.8 + 0.2 * checker), tex)

    # glyph strips across the forehead and the cheeks ("tattoos and text")
    for row0, col0, length in ((0.36, 0.38, 0.24), (0.55, 0.3, 0.12), (0.55, 0.58, 0.12)):
        h = max(6, size // 16)
        w = int(length * size)
        strip = _glyph_strip(rng, w, h)
        r0, c0 = int(row0 * size), int(col0 * size)
        ink = rng.uniform(0.0, 0.15, size=3)
        region = tex[r0 : r0 + h, c0 : c0 + w]
        tex[r0 : r0 + h, c0 : c0 + w] = np.where(strip[..., None] > 0, ink, region)
    return np.round(np.clip(tex, 0.0, 1.0) * 255.0) / 255.0


# -- geometry ----------------------------------------------------------------------

def hair_displacement(rng: np.random.Generator, rig: RiggedMesh, peak: float = HAIR_PEAK) -> np.ndarray:
    """Smooth outward bumps on hair vertices; every row norm is <= ``peak``."""
    P = rig.vertices
    n = vertex_normals(P, rig.faces)
    field = np.zeros(len(P))
    for _ in range(4):
        centre = rng.normal(size=3)
        centre[1] = abs(centre[1]) + 0.5
        centre /= np.linalg.norm(centre)
        width = rng.uniform(0.35, 0.7)
        d = np.linalg.norm(P / np.linalg.norm(P, axis=1, keepdims=True) - centre, axis=1)
        field += rng.uniform(0.5, 1.0) * np.exp(-((d / width) ** 2))
    field = field / field.max() * peak
    hair = rig.part_labels == PART_INDEX["hair"]
    return np.where(hair[:, None], field[:, None] * n, 0.0)


def sample_params(rng: np.random.Generator, rig: RiggedMesh, resolution: int) -> PoseParams:
    kb = rig.blendshapes.shape[0]
    shape = np.clip(rng.normal(scale=0.6, size=N_SHAPE), -1.5, 1.5)
    expr = rng.uniform(-0.8, 0.8, size=kb - N_SHAPE)
    expr[0] = rng.uniform(0.0, 1.0)  # jaw opening is one-sided
    rot = np.zeros((rig.n_joints, 3))
    rot[0, 1] = np.deg2rad(rng.uniform(-30.0, 30.0))   # root yaw
    rot[0, 0] = np.deg2rad(rng.uniform(-8.0, 8.0))
    rot[1] = np.deg2rad(rng.uniform(-6.0, 6.0, size=3))
    rot[2, 0] = np.deg2rad(rng.uniform(0.0, 8.0))      # jaw opens about x
    return PoseParams(shape, expr, rot, Camera.frontal(resolution))


def render_subject(mesh: RiggedMesh, params: PoseParams, texture, joints=None):
    """Render (image, mask, normals, parts) for a canonical mesh under ``params``."""
    posed = animate(mesh.vertices, mesh, params, joints)
    cam = params.camera
    res = (int(round(2 * cam.cy)), int(round(2 * cam.cx)))
    rmap = rasterize(posed, cam, res)
    return shade_texture(rmap, texture), render_mask(rmap), render_normals(rmap), render_parts(rmap)


def make_synthetic_subject(seed: int, rig: RiggedMesh, resolution: int = 128,
                           tex_resolution: int | None = None) -> SyntheticSubject:
    """Deterministic ground truth for ``seed``."""
    rng = np.random.default_rng([seed, 0x5EED])
    tex_resolution = tex_resolution or resolution
    params = sample_params(rng, rig, resolution)
    shaped = rig.vertices + shape_offsets(rig, params)
    joints = regress_joints(rig, shaped)
    gt_vertices = shaped + hair_displacement(rng, rig.with_vertices(shaped))
    gt_mesh = rig.with_vertices(gt_vertices)
    tex = procedural_texture(rng, tex_resolution)
    image, mask, normals, parts = render_subject(gt_mesh, params, tex, joints)
    return SyntheticSubject(
        rig=rig,
        gt_mesh=gt_mesh,
        gt_texture=UvImage.full(tex),
        pose_params=params,
        input_image=np.round(np.clip(image, 0, 1) * 255.0) / 255.0,
        fg_mask=mask,
        normal_map=normals.astype(np.float32).astype(np.float64),
        part_map=parts,
        seed=seed,
    )


# -- bundle ------------------------------------------------------------------------

_FILES = {
    "rig": "rig.obj", "gt_mesh": "gt_mesh.obj", "gt_texture": "gt_texture.png",
    "input_image": "input.png", "fg_mask": "mask.pfm", "normal_map": "normals.pfm",
    "part_map": "parts.pfm", "pose_params": "params.json",
}


def save_subject(subject: SyntheticSubject, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(subject.rig, out / _FILES["rig"])
    save_mesh(subject.gt_mesh, out / _FILES["gt_mesh"])
    save_image(subject.gt_texture.data, out / _FILES["gt_texture"])
    save_image(subject.input_image, out / _FILES["input_image"])
    save_image(subject.fg_mask, out / _FILES["fg_mask"])
    save_image(subject.normal_map, out / _FILES["normal_map"])
    label = np.where(subject.fg_mask > 0, subject.part_map.argmax(axis=-1), -1)
    save_image(label.astype(np.float32), out / _FILES["part_map"])
    save_params(subject.pose_params, out / _FILES["pose_params"])
    meta = {"seed": int(subject.seed), "resolution": int(subject.resolution),
            "parts": list(PART_NAMES), "files": _FILES}
    (out / "subject.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def load_subject(path) -> SyntheticSubject:
    d = Path(path)
    if not (d / "subject.json").exists():
        raise FileNotFoundError(f"{d} is not a subject bundle (no subject.json)")
    meta = json.loads((d / "subject.json").read_text())
    label = load_image(d / _FILES["part_map"]).astype(np.int64)
    parts = np.zeros(label.shape + (len(PART_NAMES),))
    rr, cc = np.nonzero(label >= 0)
    parts[rr, cc, label[rr, cc]] = 1.0
    return SyntheticSubject(
        rig=load_mesh(d / _FILES["rig"]),
        gt_mesh=load_mesh(d / _FILES["gt_mesh"]),
        gt_texture=UvImage.full(load_image(d / _FILES["gt_texture"])[..., :3]),
        pose_params=load_params(d / _FILES["pose_params"]),
        input_image=load_image(d / _FILES["input_image"])[..., :3],
        fg_mask=load_image(d / _FILES["fg_mask"]).astype(np.float64),
        normal_map=load_image(d / _FILES["normal_map"]).astype(np.float64),
        part_map=parts,
        seed=int(meta["seed"]),
    ).validate()
