"""Wavefront OBJ geometry plus a JSON rig sidecar.

The OBJ carries ``v``/``vt``/``f`` records only, with ``f a/a b/b c/c`` since
UVs are stored per vertex. Everything else lives in ``<mesh>.rig.json``.
Floats are written with 17 significant digits so a save/load cycle is exact.
The ``vt`` v coordinate is stored as-is (v = 0 is the top texel row), not
flipped to the usual bottom-up OBJ convention, because ``1 - (1 - v)`` does
not round-trip exactly in floating point.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..mesh import PART_INDEX, PART_NAMES, MeshInvariantError, MeshParseError, RiggedMesh, validate_mesh


def sidecar_path(path) -> Path:
    """``head.obj`` -> ``head.rig.json``."""
    return Path(path).with_suffix(".rig.json")


def _fmt(x: float) -> str:
    s = format(float(x), ".17g")
    # keep a float marker so "-0" survives a JSON round trip as -0.0
    return s if any(c in s for c in ".eni") else s + ".0"


def _dump(value, indent: int = 0) -> str:
    """JSON text with fixed float formatting; innermost lists stay on one line."""
    if isinstance(value, dict):
        pad = "  " * (indent + 1)
        items = [f'{pad}{json.dumps(k)}: {_dump(v, indent + 1)}' for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            pad = "  " * (indent + 1)
            rows = [pad + _dump(v, indent + 1) for v in value]
            return "[\n" + ",\n".join(rows) + "\n" + "  " * indent + "]"
        return "[" + ", ".join(_dump(v, indent) for v in value) + "]"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return _fmt(value)


def save_mesh(mesh: RiggedMesh, path) -> None:
    """Write ``path`` (OBJ) and its ``.rig.json`` sidecar deterministically."""
    validate_mesh(mesh)
    path = Path(path)
    lines = ["# avatarforge mesh"]
    lines += [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"vt {_fmt(u)} {_fmt(v)}" for u, v in mesh.uv]
    f = mesh.faces + 1
    lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in f]
    rig = {
        "skin_weights": mesh.skin_weights,
        "blendshapes": mesh.blendshapes,
        "joint_regressor": mesh.joint_regressor,
        "part_labels": [PART_NAMES[i] for i in mesh.part_labels],
        "joint_parents": [int(p) for p in mesh.joint_parents],
    }
    path.write_text("\n".join(lines) + "\n")
    sidecar_path(path).write_text(_dump(rig) + "\n")


def _parse_obj(text: str):
    verts, uvs, faces, face_uv = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                verts.append([float(x) for x in rest[:3]])
                if len(rest) < 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tag == "vt":
                if len(rest) < 2:
                    raise ValueError("texture coordinate needs 2 values")
                uvs.append([float(rest[0]), float(rest[1])])
            elif tag == "f":
                if len(rest) != 3:
                    raise ValueError("only triangles are supported")
                vi, ti = [], []
                for tok in rest:
                    parts = tok.split("/")
                    vi.append(int(parts[0]) - 1)
                    ti.append(int(parts[1]) - 1 if len(parts) > 1 and parts[1] else vi[-1])
                faces.append(vi)
                face_uv.append(ti)
            # other records (o, g, s, vn, usemtl) are ignored
        except ValueError as exc:
            raise MeshParseError(f"line {lineno}: {exc}: {raw!r}") from None
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(uvs).reshape(-1, 2), \
        np.array(faces, dtype=np.int64).reshape(-1, 3), np.array(face_uv, dtype=np.int64).reshape(-1, 3)


def load_mesh(path) -> RiggedMesh:
    """Read an OBJ and its rig sidecar; raises MeshParseError or MeshInvariantError."""
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise MeshParseError(f"{path}: not a text OBJ ({exc})") from None
    verts, uvs, faces, face_uv = _parse_obj(text)
    n = len(verts)
    if len(uvs) == 0:
        raise MeshParseError(f"{path}: no vt records; a UV atlas is required")
    if len(faces) and (face_uv.min() < 0 or face_uv.max() >= len(uvs)):
        raise MeshParseError(f"{path}: vt index out of range")
    uv = np.full((n, 2), np.nan)
    if len(faces):
        if faces.min() < 0 or faces.max() >= n:
            raise MeshInvariantError(f"{path}: face index out of range", "index_range")
        uv[faces.reshape(-1)] = uvs[face_uv.reshape(-1)]
        clash = np.abs(uv[faces.reshape(-1)] - uvs[face_uv.reshape(-1)]).max()
        if clash > 0:
            raise MeshParseError(f"{path}: a vertex is used with two different UVs; per-vertex UVs are required")
    missing = np.isnan(uv[:, 0])
    if missing.any():
        if len(uvs) != n:
            raise MeshParseError(f"{path}: unreferenced vertices without a matching vt record")
        uv[missing] = uvs[missing]

    side = sidecar_path(path)
    try:
        rig = json.loads(side.read_text())
    except FileNotFoundError:
        raise MeshParseError(f"missing rig sidecar {side}") from None
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"{side}: invalid JSON ({exc})") from None
    try:
        labels = [PART_INDEX[name] for name in rig["part_labels"]]
    except KeyError as exc:
        raise MeshInvariantError(f"{side}: unknown part label or missing key {exc}", "part_label") from None
    try:
        mesh = RiggedMesh(
            vertices=verts,
            faces=faces,
            uv=uv,
            skin_weights=np.array(rig["skin_weights"], dtype=np.float64),
            blendshapes=np.array(rig["blendshapes"], dtype=np.float64).reshape(-1, n, 3),
            joint_regressor=np.array(rig["joint_regressor"], dtype=np.float64),
            part_labels=np.array(labels, dtype=np.int64),
            joint_parents=np.array(rig["joint_parents"], dtype=np.int64),
        )
    except (KeyError, ValueError) as exc:
        raise MeshParseError(f"{side}: malformed rig record ({exc})") from None
    return validate_mesh(mesh)
