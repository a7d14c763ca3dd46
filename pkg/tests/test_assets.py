import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge.assets import (
    N_EXPR,
    N_SHAPE,
    ImageFormatError,
    load_image,
    load_mesh,
    load_subject,
    make_mini_rig,
    make_synthetic_subject,
    save_image,
    save_mesh,
    save_subject,
    sidecar_path,
)
from avatarforge.mesh import (
    PART_INDEX,
    MeshInvariantError,
    MeshParseError,
    euler_characteristic,
    is_consistently_oriented,
    is_edge_manifold,
    mesh_equal,
    validate_mesh,
    weld_average_matrix,
    weld_map,
)


@pytest.fixture(scope="module")
def rig():
    return make_mini_rig("desk")


def tree_digest(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_mini_rig_structure(rig):
    validate_mesh(rig)
    assert rig.n_joints == 4
    assert rig.blendshapes.shape[0] == N_SHAPE + N_EXPR
    assert is_edge_manifold(rig.faces)
    assert is_consistently_oriented(rig.faces)
    # welding the seam copies closes the chart into a sphere
    _, group = weld_map(rig.vertices)
    assert euler_characteristic(group[rig.faces]) == 2
    for name in ("face", "hair", "neck", "eyeball", "eyelid", "other"):
        assert (rig.part_labels == PART_INDEX[name]).any(), name


def test_mini_rig_is_deterministic_and_profile_checked(rig):
    assert mesh_equal(rig, make_mini_rig("desk"))
    with pytest.raises(ValueError):
        make_mini_rig("huge")


def test_mesh_roundtrip_is_exact(rig, tmp_path):
    path = tmp_path / "head.obj"
    save_mesh(rig, path)
    assert sidecar_path(path).exists()
    back = load_mesh(path)
    assert mesh_equal(rig, back)
    save_mesh(back, tmp_path / "again.obj")
    assert path.read_bytes() == (tmp_path / "again.obj").read_bytes()


def test_mesh_parse_errors(rig, tmp_path):
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1 4/1\n")
    with pytest.raises(MeshParseError):
        load_mesh(bad)
    novt = tmp_path / "novt.obj"
    novt.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(MeshParseError):
        load_mesh(novt)


def test_validate_mesh_reports_codes(rig):
    m = rig.copy()
    m.skin_weights[0] *= 2
    with pytest.raises(MeshInvariantError) as e:
        validate_mesh(m)
    assert e.value.code == "weights_row_sum"
    m = rig.copy()
    m.faces[0] = [0, 0, 1]
    with pytest.raises(MeshInvariantError) as e:
        validate_mesh(m)
    assert e.value.code == "repeated_index"


def test_weld_average_matrix_rows_sum_to_one(rig):
    A = weld_average_matrix(rig.vertices)
    assert np.allclose(np.asarray(A.sum(axis=1)).ravel(), 1.0)
    moved = A @ rig.vertices
    assert np.array_equal(moved, rig.vertices)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_pfm_roundtrip_exact(tmp_path_factory, h, w, c, seed):
    a = np.random.default_rng(seed).standard_normal((h, w, c)).astype(np.float32)
    a = a[..., 0] if c == 1 else a
    p = tmp_path_factory.mktemp("pfm") / "x.pfm"
    save_image(a, p)
    assert np.array_equal(load_image(p), a)


def test_png_quantizes_to_8_bits(tmp_path):
    a = np.linspace(0, 1, 48).reshape(4, 4, 3)
    save_image(a, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert np.abs(back - a).max() <= 0.5 / 255 + 1e-12


def test_image_format_errors(tmp_path):
    with pytest.raises(ImageFormatError):
        save_image(np.zeros((2, 2, 3)), tmp_path / "a.jpg")
    (tmp_path / "broken.png").write_bytes(b"not a png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "broken.png")


def test_synthetic_subject_is_deterministic_and_consistent(rig, tmp_path):
    s = make_synthetic_subject(3, rig, resolution=64)
    s.validate()
    assert s.input_image.shape == (64, 64, 3)
    assert set(np.unique(s.fg_mask)) <= {0.0, 1.0}
    # the background is black
    assert np.all(s.input_image[s.fg_mask == 0] == 0)
    # part maps are one-hot exactly on the foreground
    assert np.array_equal(s.part_map.sum(axis=2), s.fg_mask)
    t = make_synthetic_subject(3, rig, resolution=64)
    assert np.array_equal(s.input_image, t.input_image)
    assert not np.array_equal(s.input_image, make_synthetic_subject(4, rig, resolution=64).input_image)


def test_subject_bundle_roundtrip(rig, tmp_path):
    s = make_synthetic_subject(1, rig, resolution=64)
    save_subject(s, tmp_path / "a")
    save_subject(load_subject(tmp_path / "a"), tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    back = load_subject(tmp_path / "a")
    assert mesh_equal(back.gt_mesh, s.gt_mesh)
    assert np.array_equal(back.fg_mask, s.fg_mask)
