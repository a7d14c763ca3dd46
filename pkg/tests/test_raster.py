import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from avatarforge.assets import make_mini_rig
from avatarforge.autodiff import Tensor
from avatarforge.checks import coverage_check, roundtrip_psnr
from avatarforge.headmodel import Camera
from avatarforge.raster import (
    UvImage,
    bilinear_matrix,
    rasterize,
    rasterize_points,
    render_mask,
    shade_texture,
    unwrap,
    vertex_normals,
)


def square_quad(H, W):
    xy = np.array([[0, 0], [W, 0], [W, H], [0, H]], dtype=float)
    return xy, np.ones(4), np.array([[0, 1, 2], [0, 2, 3]])


def test_shared_diagonal_covers_each_pixel_exactly_once():
    H = W = 9
    xy, z, F = square_quad(H, W)
    fid, _, _ = rasterize_points(xy, z, F, H, W)
    assert (fid >= 0).all()
    # each triangle alone, then counted: no pixel may be claimed by both
    a = rasterize_points(xy, z, F[:1], H, W)[0] >= 0
    b = rasterize_points(xy, z, F[1:], H, W)[0] >= 0
    assert not (a & b).any()
    assert (a | b).all()


def test_top_left_rule_on_pixel_aligned_edges():
    # a 2x2 pixel square: edges pass exactly through sample points of the neighbours
    xy = np.array([[1.5, 1.5], [3.5, 1.5], [3.5, 3.5], [1.5, 3.5]])
    fid, _, _ = rasterize_points(xy, np.ones(4), np.array([[0, 1, 2], [0, 2, 3]]), 6, 6)
    cov = fid >= 0
    # left and top boundaries are owned, right and bottom are not
    expect = np.zeros((6, 6), bool)
    expect[1:3, 1:3] = True
    assert np.array_equal(cov, expect)


@pytest.mark.parametrize("seed", range(8))
def test_coverage_matches_brute_force(seed):
    assert coverage_check(seed) == 0


def test_nearer_triangle_wins():
    xy = np.array([[0, 0], [10, 0], [0, 10], [0, 0], [10, 0], [0, 10]], dtype=float)
    z = np.array([5.0, 5, 5, 2, 2, 2])
    F = np.array([[0, 1, 2], [3, 4, 5]])
    fid, _, depth = rasterize_points(xy, z, F, 10, 10)
    assert set(np.unique(fid[fid >= 0])) == {1}
    assert np.allclose(depth[fid >= 0], 2.0)
    fid2, _, _ = rasterize_points(xy, z, F[::-1], 10, 10)
    assert set(np.unique(fid2[fid2 >= 0])) == {0}


def test_back_faces_culled():
    xy, z, F = square_quad(4, 4)   # both faces have positive signed area
    assert (rasterize_points(xy, z, F, 4, 4, cull_sign=1.0)[0] == -1).all()
    assert (rasterize_points(xy, z, F, 4, 4, cull_sign=-1.0)[0] >= 0).all()


def test_perspective_correct_barycentrics():
    cam = Camera.frontal(32)
    # a slanted triangle: depth varies strongly across it
    P = np.array([[-0.6, -0.6, 0.8], [0.7, -0.5, -1.2], [0.0, 0.8, 0.1]])
    xy, z = cam.project(P)
    fid, bary, depth = rasterize_points(xy, z, np.array([[0, 1, 2]]), 32, 32)
    rr, cc = np.nonzero(fid >= 0)
    assert len(rr) > 50
    Pc = cam.to_camera(P)
    n = np.cross(Pc[1] - Pc[0], Pc[2] - Pc[0])
    for r, c in zip(rr[::7], cc[::7]):
        ray = np.array([(c + 0.5 - cam.cx) / cam.fx, (r + 0.5 - cam.cy) / cam.fy, 1.0])
        t = n @ Pc[0] / (n @ ray)
        hit = t * ray
        # barycentrics of the ray/plane hit, solved in 3D
        A = np.c_[Pc[0] - Pc[2], Pc[1] - Pc[2]]
        l01 = np.linalg.lstsq(A, hit - Pc[2], rcond=None)[0]
        ref = np.array([l01[0], l01[1], 1 - l01.sum()])
        assert np.allclose(bary[r, c], ref, atol=1e-9)
        assert depth[r, c] == pytest.approx(hit[2], rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_bilinear_matrix_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(2, 9, size=2)
    grid = rng.random((H, W))
    x = rng.uniform(-1, W, 20)
    y = rng.uniform(-1, H, 20)
    M = bilinear_matrix(x, y, H, W)
    ref = map_coordinates(grid, [np.clip(y, 0, H - 1), np.clip(x, 0, W - 1)], order=1, mode="nearest")
    assert np.allclose(M @ grid.reshape(-1), ref, atol=1e-12)
    assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), 1.0)


@pytest.fixture(scope="module")
def rig():
    return make_mini_rig("desk")


def test_rig_render_constant_texture(rig):
    cam = Camera.frontal(64)
    rmap = rasterize(rig, cam, 64)
    m = render_mask(rmap)
    assert 0.2 < m.mean() < 0.8
    img = shade_texture(rmap, np.full((32, 32, 3), 0.25))
    assert np.allclose(img[m > 0], 0.25)
    assert np.all(img[m == 0] == 0)
    # normals seen by a frontal camera point back towards it (+z world)
    assert (rmap.normal[m > 0][:, 2] > -0.2).mean() > 0.95


def test_vertex_normals_tensor_path_matches_array(rig):
    n_np = vertex_normals(rig.vertices, rig.faces)
    n_t = vertex_normals(Tensor(rig.vertices), rig.faces)
    assert np.allclose(n_np, n_t.data)
    assert np.allclose(np.linalg.norm(n_np, axis=1), 1.0)
    # the head is star-shaped around the origin, so normals point outward
    assert (np.sum(n_np * rig.vertices, axis=1) > 0).all()


def test_unwrap_roundtrip_recovers_texture(rig):
    psnr, n_valid = roundtrip_psnr(0, rig, res=96)
    assert n_valid > 500
    assert psnr >= 40.0


def test_unwrap_marks_hidden_texels_invalid(rig):
    cam = Camera.frontal(64)
    tex = np.random.default_rng(0).random((32, 32, 3))
    rmap = rasterize(rig, cam, 64)
    u = unwrap(shade_texture(rmap, tex), rig, cam, 32, rmap)
    assert isinstance(u, UvImage)
    # the back of the head (u near 0 or 1 with the seam at the back) is never seen
    assert u.mask[:, 0].sum() == 0 and u.mask[:, -1].sum() == 0
    assert np.all(u.data[u.mask == 0] == 0)
